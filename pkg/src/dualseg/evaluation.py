"""Patient-level 3D evaluation: binarization, confusion counts, overlap
metrics, slice-to-volume reconstruction, Mean +- SD summaries and the
models x annotation-sources cross-evaluation matrix."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .nn.unet import UNetModel
from .preprocess import BONE_WINDOW, WindowSpec, bilinear_resize, nearest_resize, normalized_channels
from .volumes import Geometry, InvalidGeometryError, MaskVolume, Study

METRICS = ("dsc", "iou", "sensitivity", "specificity")


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Positive where prob >= threshold (ties count as lesion)."""
    return (np.asarray(prob) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _voxels(m) -> np.ndarray:
    return m.voxels if isinstance(m, MaskVolume) else np.asarray(m)


def confusion(pred, gt) -> ConfusionCounts:
    if isinstance(pred, MaskVolume) and isinstance(gt, MaskVolume) and pred.geometry != gt.geometry:
        raise InvalidGeometryError("prediction and ground truth geometries differ")
    p = _voxels(pred).astype(bool)
    g = _voxels(gt).astype(bool)
    if p.shape != g.shape:
        raise InvalidGeometryError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


# Empty-denominator conventions: both masks empty -> perfect agreement.


def dsc(c: ConfusionCounts) -> float:
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def iou(c: ConfusionCounts) -> float:
    den = c.tp + c.fp + c.fn
    return 1.0 if den == 0 else c.tp / den


def sensitivity(c: ConfusionCounts) -> float:
    den = c.tp + c.fn
    return 1.0 if den == 0 else c.tp / den


def specificity(c: ConfusionCounts) -> float:
    den = c.tn + c.fp
    return 1.0 if den == 0 else c.tn / den


def cohen_kappa(mask_a, mask_b) -> float:
    a = _voxels(mask_a).astype(bool).ravel()
    b = _voxels(mask_b).astype(bool).ravel()
    if a.shape != b.shape:
        raise InvalidGeometryError("kappa operands differ in shape")
    n = a.size
    p_o = np.count_nonzero(a == b) / n
    pa = np.count_nonzero(a) / n
    pb = np.count_nonzero(b) / n
    p_e = pa * pb + (1 - pa) * (1 - pb)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1 - p_e)


@dataclass(frozen=True)
class PatientMetrics:
    patient_id: str
    dsc: float
    iou: float
    sensitivity: float
    specificity: float
    predicted_voxels: int = 0
    gt_voxels: int = 0

    @classmethod
    def from_counts(cls, patient_id: str, c: ConfusionCounts) -> "PatientMetrics":
        return cls(patient_id, dsc(c), iou(c), sensitivity(c), specificity(c), c.tp + c.fp, c.tp + c.fn)

    def get(self, metric: str) -> float:
        return getattr(self, metric)


@dataclass(frozen=True)
class CohortSummary:
    metric: str
    mean: float
    sd: float
    n: int

    def formatted(self) -> str:
        return f"{self.mean:.6g}±{self.sd:.6g}"


def mean_sd(values: Sequence[float], metric: str = "") -> CohortSummary:
    """Arithmetic mean and n-1 sample SD (0 for a single value)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("mean_sd of an empty sequence")
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return CohortSummary(metric, float(v.mean()), sd, int(v.size))


def reconstruct_3d(
    slices, geometry: Geometry, label_source: str = "PRED"
) -> MaskVolume:
    """Stack per-z 2D masks into a volume; z indices absent from ``slices`` stay empty.

    ``slices`` is a mapping z -> mask or a sequence of (z, mask) pairs.
    """
    items = list(slices.items()) if isinstance(slices, Mapping) else list(slices)
    nz, ny, nx = geometry.dims
    vol = np.zeros(geometry.dims, dtype=np.uint8)
    seen: set[int] = set()
    for z, m in items:
        z = int(z)
        if z in seen:
            raise ValueError(f"duplicate slice z={z}")
        if not 0 <= z < nz:
            raise ValueError(f"slice z={z} outside 0..{nz - 1}")
        m = np.asarray(m)
        if m.shape != (ny, nx):
            raise InvalidGeometryError(f"slice z={z} has shape {m.shape}, expected {(ny, nx)}")
        seen.add(z)
        vol[z] = m
    return MaskVolume(vol, geometry, label_source)


class SlicePredictor(Protocol):
    def predict_slices(self, images: np.ndarray, patient_id: str, zs: np.ndarray) -> np.ndarray:
        """Map an N x H x W x 2 stack of (CT, PET) slices to N x H x W probabilities."""


@dataclass
class ModelPredictor:
    model: UNetModel
    channels: tuple[int, ...] = (0, 1)

    def predict_slices(self, images: np.ndarray, patient_id: str = "", zs=None) -> np.ndarray:
        x = np.ascontiguousarray(images[..., list(self.channels)].transpose(0, 3, 1, 2), dtype=self.model.dtype)
        return self.model.predict(x)[:, 0]


def as_predictor(model, channels: tuple[int, ...] | None = None) -> SlicePredictor:
    if isinstance(model, UNetModel):
        if channels is None:
            if model.config.in_channels != 2:
                raise ValueError("single-channel models need an explicit channel selection")
            channels = (0, 1)
        return ModelPredictor(model, tuple(channels))
    if not hasattr(model, "predict_slices"):
        raise TypeError(f"{type(model).__name__} is not a slice predictor")
    return model


def predict_study(
    predictor: SlicePredictor,
    study: Study,
    input_size: int,
    window: WindowSpec = BONE_WINDOW,
    threshold: float = 0.5,
    z_subset: Sequence[int] | None = None,
) -> MaskVolume:
    """Predict every axial slice (or ``z_subset``) independently and rebuild the 3D mask."""
    ct, pet = normalized_channels(study, window)
    nz, ny, nx = study.geometry.dims
    zs = np.arange(nz) if z_subset is None else np.asarray(sorted(z_subset), dtype=int)
    stacked = np.stack([ct, pet], axis=-1)[zs]
    if (ny, nx) != (input_size, input_size):
        stacked = np.stack([bilinear_resize(s, input_size, input_size) for s in stacked])
    probs = predictor.predict_slices(stacked, study.patient_id, zs)
    masks = binarize(probs, threshold)
    if (ny, nx) != (input_size, input_size):
        masks = np.stack([nearest_resize(m, ny, nx) for m in masks])
    return reconstruct_3d(list(zip(zs, masks)), study.geometry)


@dataclass
class PatientLevelResult:
    gt_source: str
    patients: list[PatientMetrics]
    summary: dict[str, CohortSummary]
    predictions: dict[str, MaskVolume] = field(default_factory=dict)

    def mean(self, metric: str = "dsc") -> float:
        return self.summary[metric].mean

    def mean_predicted_voxels(self) -> float:
        return float(np.mean([p.predicted_voxels for p in self.patients]))


def summarize(patients: Sequence[PatientMetrics]) -> dict[str, CohortSummary]:
    return {m: mean_sd([p.get(m) for p in patients], m) for m in METRICS}


def patient_level_eval(
    model,
    studies: Sequence[Study],
    gt_source: str,
    input_size: int,
    window: WindowSpec = BONE_WINDOW,
    channels: tuple[int, ...] | None = None,
    predictions: Mapping[str, MaskVolume] | None = None,
) -> PatientLevelResult:
    """Per-patient 3D metrics against label ``gt_source`` plus Mean +- SD summaries.

    Pass ``predictions`` to reuse already reconstructed volumes.
    """
    if not studies:
        raise ValueError("empty test set")
    predictor = as_predictor(model, channels) if predictions is None else None
    preds: dict[str, MaskVolume] = {}
    patients = []
    for study in sorted(studies, key=lambda s: s.patient_id):
        pid = study.patient_id
        pred = predictions[pid] if predictions is not None else predict_study(predictor, study, input_size, window)
        preds[pid] = pred
        gt = study.label(gt_source)
        patients.append(PatientMetrics.from_counts(pid, confusion(pred.voxels, gt.voxels)))
    return PatientLevelResult(gt_source, patients, summarize(patients), preds)


@dataclass
class CrossEvalMatrix:
    """DSC summaries: rows (ModelA, ModelB) x columns (GT_A, GT_B)."""

    cells: dict[tuple[str, str], PatientLevelResult]

    def summary(self, model: str, gt: str) -> CohortSummary:
        return self.cells[(model, gt)].summary["dsc"]

    def to_csv(self) -> str:
        lines = ["model,GT_A,GT_B"]
        for m in ("A", "B"):
            lines.append(f"Model{m},{self.summary(m, 'A').formatted()},{self.summary(m, 'B').formatted()}")
        return "\n".join(lines) + "\n"


def cross_eval(
    model_a, model_b, studies: Sequence[Study], input_size: int, window: WindowSpec = BONE_WINDOW
) -> CrossEvalMatrix:
    """Each model is run once; its reconstruction is scored against both labels."""
    cells = {}
    for name, model in (("A", model_a), ("B", model_b)):
        first = patient_level_eval(model, studies, "A", input_size, window)
        cells[(name, "A")] = first
        cells[(name, "B")] = patient_level_eval(model, studies, "B", input_size, window, predictions=first.predictions)
    return CrossEvalMatrix(cells)


def kappa_table(studies: Sequence[Study]) -> list[tuple[str, float]]:
    """Voxel-wise Cohen's kappa between the two annotation sources, per patient."""
    return [(s.patient_id, cohen_kappa(s.label_a, s.label_b)) for s in sorted(studies, key=lambda s: s.patient_id)]
