"""Batch command line: ``phantom``, ``train``, ``eval`` and ``overlay``.

Every verb reads one YAML experiment config (``--config``) and writes below one
output directory (``--out``).  Layout::

    <out>/cohort/manifest.json            cohort manifest
    <out>/cohort/P000_ct.volhdr|.volraw   ... four volumes per patient
    <out>/split.json                      patient split used by train and eval
    <out>/models/model_A.ckpt.json|.raw   checkpoints (plus baselines, if enabled)
    <out>/reports/train_A.csv             per-epoch loss / lr traces
    <out>/eval/*.csv                      per-patient tables, summary, cross-eval, kappa
    <out>/predictions/P000_pred_A.*       reconstructed 3D predictions
    <out>/overlays/*.ppm                  overlay images

Exit codes: 0 ok, 2 configuration/usage error, 3 I/O or data-integrity error,
4 non-finite loss, 5 checkpoint/architecture mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import overlay as ov
from . import reports
from .dataset import AugmentationConfig, SplitAssignment, patient_split
from .evaluation import cross_eval, kappa_table, patient_level_eval
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn.unet import UNetConfig
from .phantom import PhantomConfig, generate_cohort
from .preprocess import WindowSpec, normalized_channels
from .training import (
    LossConfig,
    NonFiniteLossError,
    ScheduleConfig,
    Seeds,
    TrainConfig,
    build_datasets,
    train_model,
    with_channels,
)
from .volumes import MaskVolume, Study, VolumeError, atomic_write_bytes, read_volume, write_volume

log = logging.getLogger("dualseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NONFINITE = 4
EXIT_CHECKPOINT = 5

MANIFEST_VERSION = 1
VOLUME_KINDS = ("ct", "pet", "label_a", "label_b")
# Single-channel baselines: (name, channel indices); 0 = CT, 1 = PET.
BASELINES = (("ct", (0,)), ("pet", (1,)))


class ConfigError(ValueError):
    """Invalid or unknown configuration entry; the message names the field."""


class DataError(RuntimeError):
    """Inputs on disk are missing or inconsistent with each other."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PreprocessSection:
    window_width: float = 1500.0
    window_center: float = 350.0
    input_size: int = 64

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.window_width, self.window_center)


@dataclass(frozen=True)
class ModelSection:
    depth: int = 2
    base_channels: int = 8


@dataclass(frozen=True)
class OptimizerSection:
    lr: float = 1e-4
    epochs: int = 20
    eta_min: float = 0.0
    batch_size: int = 8
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class RunSection:
    precision: str = "f32"
    baselines: bool = False
    workers: int = 1
    threshold: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelSection = field(default_factory=ModelSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    seeds: Seeds = field(default_factory=Seeds)
    run: RunSection = field(default_factory=RunSection)

    def train_config(self) -> TrainConfig:
        o = self.optimizer
        return TrainConfig(
            unet=UNetConfig(
                in_channels=2,
                out_channels=1,
                depth=self.model.depth,
                base_channels=self.model.base_channels,
                input_size=self.preprocess.input_size,
            ),
            loss=self.loss,
            schedule=ScheduleConfig(lr0=o.lr, t_max=o.epochs, eta_min=o.eta_min),
            augmentation=self.augmentation,
            batch_size=o.batch_size,
            patience=o.patience,
            beta1=o.beta1,
            beta2=o.beta2,
            adam_eps=o.eps,
            weight_decay=o.weight_decay,
            precision=self.run.precision,
        )

    def with_overrides(self, precision: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        cfg = self
        if precision is not None:
            cfg = replace(cfg, run=replace(cfg.run, precision=precision))
        if seed is not None:
            cfg = replace(
                cfg,
                phantom=replace(cfg.phantom, seed=seed),
                seeds=Seeds(cohort=seed, split=seed, init=seed, shuffle=seed, augment=seed),
            )
        return cfg


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _build_section(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{where}.{key}: unknown key")
    try:
        return cls(**{k: _tupled(v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.{exc}") from exc


def parse_config(data: Any) -> ExperimentConfig:
    """Strict conversion of a parsed YAML document: unknown keys are errors."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    sections = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    for key in data:
        if key not in sections:
            raise ConfigError(f"{key}: unknown section")
    seeds = _build_section(Seeds, data.get("seeds"), "seeds")
    phantom_data = dict(data.get("phantom") or {})
    if "seed" in phantom_data:
        raise ConfigError("phantom.seed: set seeds.cohort instead")
    phantom_data["seed"] = seeds.cohort
    out = {"seeds": seeds, "phantom": _build_section(PhantomConfig, phantom_data, "phantom")}
    for name in ("preprocess", "augmentation", "loss", "model", "optimizer", "run"):
        out[name] = _build_section(sections[name].default_factory, data.get(name), name)
    cfg = ExperimentConfig(**out)
    if cfg.run.precision not in ("f32", "f64"):
        raise ConfigError("run.precision: must be f32 or f64")
    if cfg.run.workers < 1:
        raise ConfigError("run.workers: must be >= 1")
    if not 0.0 < cfg.run.threshold < 1.0:
        raise ConfigError("run.threshold: must lie in (0, 1)")
    if cfg.optimizer.epochs < 1:
        raise ConfigError("optimizer.epochs: must be >= 1")
    try:
        cfg.preprocess.window
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: {path} is not valid YAML: {exc}") from exc
    return parse_config(data)


# ---------------------------------------------------------------------------
# helpers


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"missing file {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise DataError(f"{path}: malformed JSON: {exc}") from exc


def write_cohort(studies: Sequence[Study], cohort_dir: Path) -> Path:
    entries = []
    for s in studies:
        files = {}
        for kind, vol in zip(VOLUME_KINDS, (s.ct, s.pet, s.label_a, s.label_b)):
            name = f"{s.patient_id}_{kind}"
            write_volume(vol, cohort_dir / name)
            files[kind] = name
        entries.append({"patient_id": s.patient_id, **files})
    manifest = cohort_dir / "manifest.json"
    _write_json(manifest, {"format_version": MANIFEST_VERSION, "patients": entries})
    return manifest


def read_cohort(cohort_dir: Path) -> list[Study]:
    manifest = _read_json(cohort_dir / "manifest.json")
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"{cohort_dir / 'manifest.json'}: unsupported format_version")
    studies = []
    try:
        for e in manifest["patients"]:
            vols = [read_volume(cohort_dir / e[kind]) for kind in VOLUME_KINDS]
            studies.append(Study(e["patient_id"], *vols))
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed cohort manifest: {exc}") from exc
    return studies


def read_split(out: Path, studies: Sequence[Study]) -> SplitAssignment:
    data = _read_json(out / "split.json")
    try:
        split = SplitAssignment.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed split record: {exc}") from exc
    unknown = split.all_ids() - {s.patient_id for s in studies}
    if unknown:
        raise DataError(f"split references unknown patients {sorted(unknown)}")
    return split


def _model_jobs(cfg: ExperimentConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """(stem, label source, channels) for every model the config asks for."""
    jobs = [("model_A", "A", (0, 1)), ("model_B", "B", (0, 1))]
    if cfg.run.baselines:
        jobs += [(f"model_A_{name}", "A", ch) for name, ch in BASELINES]
    return jobs


def _train_one(cfg: ExperimentConfig, studies, split, source: str, channels):
    tc = with_channels(cfg.train_config(), channels)
    train, val = build_datasets(studies, split, source, cfg.preprocess.input_size, cfg.preprocess.window)
    if not train or not val:
        raise DataError(f"label source {source}: empty training or validation slice set")
    s = cfg.seeds
    return train_model(train, val, tc, s.init, s.shuffle, s.augment)


def _train_job(args):
    cfg, out, stem, source, channels = args
    studies = read_cohort(out / "cohort")
    split = read_split(out, studies)
    model, report = _train_one(cfg, studies, split, source, channels)
    return stem, model, report


# ---------------------------------------------------------------------------
# verbs


def cmd_phantom(cfg: ExperimentConfig, out: Path) -> int:
    studies = generate_cohort(cfg.phantom)
    manifest = write_cohort(studies, out / "cohort")
    log.info("wrote %d patients to %s", len(studies), manifest.parent)
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    studies = read_cohort(out / "cohort")
    split = patient_split([s.patient_id for s in studies], seed=cfg.seeds.split)
    _write_json(out / "split.json", split.to_dict())
    jobs = [(cfg, out, stem, source, ch) for stem, source, ch in _model_jobs(cfg)]
    if cfg.run.workers > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.run.workers, len(jobs))) as pool:
            results = list(pool.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]
    for stem, model, report in results:
        extra = {"best_epoch": report.best_epoch, "epochs_run": len(report.train_loss)}
        save_checkpoint(model, out / "models" / stem, extra=extra)
        _write_text(out / "reports" / f"train_{stem.removeprefix('model_')}.csv", report.to_csv())
        log.info("%s: best epoch %d, val loss %.4f", stem, report.best_epoch, report.best_val_loss)
    return EXIT_OK


def _load_models(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    tc = cfg.train_config()
    models = {}
    for stem, _, channels in _model_jobs(cfg):
        unet = with_channels(tc, channels).unet
        models[stem] = load_checkpoint(out / "models" / stem, config=unet, dtype=tc.dtype)
    return models


def cmd_eval(cfg: ExperimentConfig, out: Path) -> int:
    studies = read_cohort(out / "cohort")
    split = read_split(out, studies)
    models = _load_models(cfg, out)
    test = [s for s in studies if s.patient_id in set(split.test)]
    size, window = cfg.preprocess.input_size, cfg.preprocess.window
    edir = out / "eval"

    matrix = cross_eval(models["model_A"], models["model_B"], test, size, window)
    rows = []
    for m in ("A", "B"):
        for g in ("A", "B"):
            result = matrix.cells[(m, g)]
            _write_text(edir / f"patients_Model{m}_GT_{g}.csv", reports.patient_table(result))
            rows.append((f"Model{m}", f"GT_{g}", result))
        for pid, pred in matrix.cells[(m, "A")].predictions.items():
            write_volume(pred, out / "predictions" / f"{pid}_pred_{m}")
    for name, channels in BASELINES if cfg.run.baselines else ():
        result = patient_level_eval(models[f"model_A_{name}"], test, "A", size, window, channels=channels)
        _write_text(edir / f"patients_ModelA_{name}_GT_A.csv", reports.patient_table(result))
        rows.append((f"ModelA_{name}", "GT_A", result))
    _write_text(edir / "summary.csv", reports.summary_table(rows))
    _write_text(edir / "cross_eval.csv", reports.cross_eval_table(matrix))
    _write_text(edir / "kappa.csv", reports.kappa_csv(kappa_table(test)))
    voxels = [f"Model{m},{reports.fmt(matrix.cells[(m, 'A')].mean_predicted_voxels())}" for m in ("A", "B")]
    _write_text(edir / "predicted_voxels.csv", "model,mean_predicted_voxels\n" + "\n".join(voxels) + "\n")
    log.info("cross-evaluation:\n%s", reports.cross_eval_table(matrix).rstrip())
    return EXIT_OK


def render_overlay(study: Study, preds: dict[str, MaskVolume], z: int, base: str, window: WindowSpec) -> np.ndarray:
    """Grayscale slice with Model A tinted red and Model B tinted blue."""
    nz = study.geometry.dims[0]
    if not 0 <= z < nz:
        raise ValueError(f"z={z} out of range [0, {nz})")
    ct, pet = normalized_channels(study, window)
    rgb = ov.grayscale((ct if base == "ct" else pet)[z])
    for name, color in (("A", ov.RED), ("B", ov.BLUE)):
        if name in preds:
            rgb = ov.tint(rgb, preds[name].voxels[z], color)
    return rgb


def cmd_overlay(cfg: ExperimentConfig, out: Path, patient: str | None, z: int | None, base: str) -> int:
    studies = {s.patient_id: s for s in read_cohort(out / "cohort")}
    split = read_split(out, list(studies.values()))
    pid = patient or split.test[0]
    if pid not in studies:
        raise ValueError(f"--patient {pid!r} is not in the cohort")
    study = studies[pid]
    preds = {}
    for m in ("A", "B"):
        vol = read_volume(out / "predictions" / f"{pid}_pred_{m}")
        if vol.geometry != study.geometry:
            raise DataError(f"prediction {pid}_pred_{m} does not match the study geometry")
        preds[m] = vol
    if z is None:
        # slice with the most Label B voxels, a natural default for inspection
        z = int(np.argmax(study.label_b.voxels.reshape(study.geometry.dims[0], -1).sum(axis=1)))
    rgb = render_overlay(study, preds, z, base, cfg.preprocess.window)
    path = out / "overlays" / f"{pid}_z{z:03d}_{base}.ppm"
    atomic_write_bytes(path, ov.encode_ppm(rgb))
    log.info("wrote %s", path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualseg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, text in (
        ("phantom", "generate the synthetic cohort"),
        ("train", "split the cohort and train the Label A / Label B models"),
        ("eval", "patient-level 3D evaluation, cross-evaluation and kappa tables"),
        ("overlay", "render prediction overlays as PPM images"),
    ):
        p = sub.add_parser(verb, help=text)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--precision", choices=("f32", "f64"), default=None)
        p.add_argument("--seed-override", type=int, default=None, metavar="N", help="use N for every seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if verb == "overlay":
            p.add_argument("--patient", default=None, help="patient id (default: first test patient)")
            p.add_argument("--z", type=int, default=None, help="axial slice (default: largest Label B area)")
            p.add_argument("--base", choices=("ct", "pet"), default="ct")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config).with_overrides(args.precision, args.seed_override)
        # re-validate after overrides (e.g. seed must still be a legal phantom seed)
        cfg = parse_config(_as_dict(cfg))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        if args.verb == "phantom":
            return cmd_phantom(cfg, out)
        if args.verb == "train":
            return cmd_train(cfg, out)
        if args.verb == "eval":
            return cmd_eval(cfg, out)
        return cmd_overlay(cfg, out, args.patient, args.z, args.base)
    except NonFiniteLossError as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, VolumeError, DataError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _as_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["phantom"].pop("seed")
    return d


if __name__ == "__main__":
    sys.exit(main())
