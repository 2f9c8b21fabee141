import json
import shutil

import numpy as np
import pytest
import yaml

from dualseg import cli
from dualseg.overlay import decode_ppm
from dualseg.volumes import read_volume

TINY = {
    "phantom": {"n_patients": 5, "dims": [24, 32, 32], "lesions_per_patient": [1, 1]},
    "preprocess": {"input_size": 16},
    "model": {"depth": 1, "base_channels": 2},
    "optimizer": {"epochs": 1},
    "run": {"precision": "f64"},
}


def _config(path, data=TINY, **sections):
    merged = {k: dict(v) for k, v in data.items()}
    for section, values in sections.items():
        merged.setdefault(section, {}).update(values)
    path.write_text(yaml.safe_dump(merged))
    return str(path)


def _run(verb, cfg, out, *extra):
    return cli.main([verb, "--config", cfg, "--out", str(out), *extra])


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root / "tiny.yaml")
    out = root / "out"
    for verb in ("phantom", "train", "eval"):
        assert _run(verb, cfg, out) == cli.EXIT_OK
    return cfg, out


def test_phantom_inventory(tmp_path):
    cfg = _config(tmp_path / "c.yaml", phantom={"n_patients": 20, "dims": [16, 32, 32], "lesions_per_patient": [0, 0]})
    assert _run("phantom", cfg, tmp_path / "o") == 0
    cohort = tmp_path / "o" / "cohort"
    assert len(list(cohort.glob("*.volhdr"))) == 80
    assert len(list(cohort.glob("*.volraw"))) == 80
    manifest = json.loads((cohort / "manifest.json").read_text())
    assert manifest["format_version"] == 1 and len(manifest["patients"]) == 20


def test_phantom_rerun_byte_identical(tmp_path):
    cfg = _config(tmp_path / "c.yaml")
    _run("phantom", cfg, tmp_path / "a")
    _run("phantom", cfg, tmp_path / "b")
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_invalid_config_exit_2(tmp_path, capsys):
    cfg = _config(tmp_path / "c.yaml", phantom={"n_patients": 0})
    assert _run("phantom", cfg, tmp_path / "o") == cli.EXIT_CONFIG
    assert "n_patients" in capsys.readouterr().err
    cfg = _config(tmp_path / "d.yaml", optimizer={"learning_rate": 1})
    assert _run("phantom", cfg, tmp_path / "o") == cli.EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err


def test_unplaceable_lesions_exit_2(tmp_path):
    cfg = _config(tmp_path / "c.yaml", phantom={"dims": [8, 16, 16], "lesions_per_patient": [6, 6]})
    assert _run("phantom", cfg, tmp_path / "o") == cli.EXIT_CONFIG


def test_missing_manifest_exit_3(tmp_path):
    cfg = _config(tmp_path / "c.yaml")
    assert _run("train", cfg, tmp_path / "empty") == cli.EXIT_IO


def test_train_artifacts(run_dir):
    _, out = run_dir
    assert (out / "split.json").exists()
    for stem in ("model_A", "model_B"):
        assert list((out / "models").glob(f"{stem}.ckpt*"))
    head = (out / "reports" / "train_A.csv").read_text().splitlines()[0]
    assert head.startswith("epoch")
    assert sorted(p.name for p in (out / "reports").iterdir()) == ["train_A.csv", "train_B.csv"]


def test_train_rerun_identical_in_f64(run_dir, tmp_path):
    cfg, out = run_dir
    again = tmp_path / "again"
    shutil.copytree(out / "cohort", again / "cohort")
    assert _run("train", cfg, again) == 0
    first, second = _tree(out), _tree(again)
    for name in ("reports/train_A.csv", "reports/train_B.csv", "split.json"):
        assert first[name] == second[name]
    for name in (k for k in first if k.startswith("models/")):
        assert first[name] == second[name]


def test_eval_outputs(run_dir):
    _, out = run_dir
    e = out / "eval"
    lines = (e / "cross_eval.csv").read_text().splitlines()
    assert lines[0] == "model,GT_A,GT_B"
    assert [l.split(",")[0] for l in lines[1:]] == ["ModelA", "ModelB"]
    for m in "AB":
        for g in "AB":
            assert (e / f"patients_Model{m}_GT_{g}.csv").exists()
    split = json.loads((out / "split.json").read_text())
    test_ids = split["test"]
    assert (e / "kappa.csv").read_text().splitlines()[1:] and len(test_ids) >= 1
    for pid in test_ids:
        vol = read_volume(out / "predictions" / f"{pid}_pred_A")
        assert vol.label_source == "PRED"


def test_eval_with_oracle_models(run_dir, tmp_path, monkeypatch):
    cfg, out = run_dir
    work = tmp_path / "w"
    shutil.copytree(out, work)
    studies = {s.patient_id: s for s in cli.read_cohort(work / "cohort")}

    class Oracle:
        def __init__(self, source):
            self.source = source

        def predict_slices(self, images, patient_id, zs):
            # labels are 32x32, the model input is 16x16: hand back a resized
            # copy so that the resize-back step restores the label
            from dualseg.preprocess import nearest_resize

            vol = studies[patient_id].label(self.source).voxels
            return np.stack([nearest_resize(vol[z], 16, 16) for z in zs]).astype(float)

    monkeypatch.setattr(cli, "_load_models", lambda c, o: {"model_A": Oracle("A"), "model_B": Oracle("B")})
    assert _run("eval", cfg, work) == 0
    table = (work / "eval" / "patients_ModelA_GT_A.csv").read_text().splitlines()
    dsc = [float(r.split(",")[1]) for r in table[1:-1]]
    assert min(dsc) >= 0.8  # lossy 32 -> 16 -> 32 resize, not a model error


def test_eval_oracle_exact_without_resize(run_dir, tmp_path, monkeypatch):
    cfg, out = run_dir
    work = tmp_path / "w"
    shutil.copytree(out, work)
    cfg32 = _config(tmp_path / "c32.yaml", preprocess={"input_size": 32})
    studies = {s.patient_id: s for s in cli.read_cohort(work / "cohort")}

    class Oracle:
        def __init__(self, source):
            self.source = source

        def predict_slices(self, images, patient_id, zs):
            return studies[patient_id].label(self.source).voxels[zs].astype(float)

    monkeypatch.setattr(cli, "_load_models", lambda c, o: {"model_A": Oracle("A"), "model_B": Oracle("B")})
    assert _run("eval", cfg32, work) == 0
    rows = (work / "eval" / "cross_eval.csv").read_text().splitlines()
    assert rows[1].split(",")[1] == "1±0" and rows[2].split(",")[2] == "1±0"
    summary = (work / "eval" / "summary.csv").read_text().splitlines()
    head = summary[0].split(",")
    for line in summary[1:]:
        cells = line.split(",")
        if cells[0][-1] == cells[1][-1]:
            assert cells[head.index("dsc_mean")] == "1" and cells[head.index("dsc_sd")] == "0"


def test_checkpoint_mismatch_exit_5(run_dir, tmp_path):
    cfg, out = run_dir
    wide = _config(tmp_path / "wide.yaml", model={"base_channels": 4})
    assert _run("eval", wide, out) == cli.EXIT_CHECKPOINT


def test_corrupt_checkpoint_exit_5(run_dir, tmp_path):
    cfg, out = run_dir
    work = tmp_path / "w"
    shutil.copytree(out, work)
    for p in (work / "models").glob("model_A.ckpt*"):
        data = p.read_bytes()
        p.write_bytes(data[: len(data) // 2])
    assert _run("eval", cfg, work) == cli.EXIT_CHECKPOINT


def test_split_with_unknown_patient_refused(run_dir, tmp_path):
    cfg, out = run_dir
    work = tmp_path / "w"
    shutil.copytree(out, work)
    split = json.loads((work / "split.json").read_text())
    split["test"].append("P999")
    (work / "split.json").write_text(json.dumps(split))
    assert _run("eval", cfg, work) == cli.EXIT_IO


def test_overlay_defaults_and_options(run_dir, tmp_path):
    cfg, out = run_dir
    work = tmp_path / "w"
    shutil.copytree(out, work)
    assert _run("overlay", cfg, work) == 0
    (ppm,) = (work / "overlays").glob("*.ppm")
    assert decode_ppm(ppm.read_bytes()).shape == (32, 32, 3)
    pid = json.loads((work / "split.json").read_text())["test"][0]
    assert _run("overlay", cfg, work, "--patient", pid, "--z", "3", "--base", "pet") == 0
    assert (work / "overlays" / f"{pid}_z003_pet.ppm").exists()
    assert _run("overlay", cfg, work, "--z", "999") == cli.EXIT_CONFIG
    assert _run("overlay", cfg, work, "--patient", "nobody") == cli.EXIT_CONFIG


def test_seed_override_changes_cohort(tmp_path):
    cfg = _config(tmp_path / "c.yaml")
    _run("phantom", cfg, tmp_path / "a")
    _run("phantom", cfg, tmp_path / "b", "--seed-override", "7")
    assert _tree(tmp_path / "a") != _tree(tmp_path / "b")
