"""3D segmentation metrics, FID/KID over supplied features, and a simple slice-stacking linker."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage.color import rgb2hed

from .errors import ParameterError, ShapeError, UndefinedMetricError

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass
class InstanceLabelVolume:
    labels: np.ndarray  # (Z, Y, X) non-negative ints
    spacing_um: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (dx, dy, dz)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ShapeError(f"label volume must be 3D, got shape {self.labels.shape}")
        if any(not s > 0 for s in self.spacing_um):
            raise ParameterError(f"spacing must be positive, got {self.spacing_um}")

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0


def _labels(v):
    return v.labels if isinstance(v, InstanceLabelVolume) else np.asarray(v)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"volume shapes differ: {a.shape} vs {b.shape}")


def dice3d(a, b) -> float:
    """Foreground Dice; 1 when both foregrounds are empty, 0 when exactly one is."""
    fa, fb = _labels(a) > 0, _labels(b) > 0
    _same_shape(fa, fb)
    na, nb = int(fa.sum()), int(fb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(fa, fb).sum()) / (na + nb)


def boundary_mask(foreground: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background or out-of-volume neighbour."""
    fg = np.asarray(foreground, dtype=bool)
    eroded = ndimage.binary_erosion(fg, structure=SIX_CONNECTED, border_value=0)
    return fg & ~eroded


def _zyx_spacing(spacing_um):
    dx, dy, dz = spacing_um
    return np.array([dz, dy, dx], dtype=np.float64)


def surface_distance(diff_voxels: np.ndarray, spacing_zyx: np.ndarray) -> np.ndarray:
    return np.sqrt((((diff_voxels * spacing_zyx) ** 2)).sum(axis=-1))


def directed_surface_distances(src_boundary, dst_boundary, spacing_um) -> np.ndarray:
    """Distance (um) from every boundary voxel of ``src`` to the nearest boundary voxel of ``dst``."""
    sp = _zyx_spacing(spacing_um)
    _, nearest = ndimage.distance_transform_edt(~dst_boundary, sampling=sp, return_indices=True)
    src = np.argwhere(src_boundary)
    hit = nearest[:, src[:, 0], src[:, 1], src[:, 2]].T
    return surface_distance((src - hit).astype(np.float64), sp)


def hd95(a, b, spacing_um=None, mode: str = "pooled") -> float:
    """95th percentile surface distance in um.

    ``mode="pooled"`` takes the percentile of both directed distance sets
    pooled together; ``mode="directed_max"`` takes the larger of the two
    directed 95th percentiles.
    """
    if spacing_um is None:
        spacing_um = a.spacing_um if isinstance(a, InstanceLabelVolume) else (1.0, 1.0, 1.0)
    fa, fb = _labels(a) > 0, _labels(b) > 0
    _same_shape(fa, fb)
    if not fa.any() or not fb.any():
        raise UndefinedMetricError("HD95 is undefined when a foreground is empty")
    ba, bb = boundary_mask(fa), boundary_mask(fb)
    d_ab = directed_surface_distances(ba, bb, spacing_um)
    d_ba = directed_surface_distances(bb, ba, spacing_um)
    if mode == "pooled":
        return float(np.percentile(np.concatenate([d_ab, d_ba]), 95, method="linear"))
    if mode == "directed_max":
        return float(max(np.percentile(d_ab, 95, method="linear"), np.percentile(d_ba, 95, method="linear")))
    raise ParameterError(f"unknown HD95 mode {mode!r}")


def mean_instance_volume(v, spacing_um=None) -> float:
    labels = _labels(v)
    if spacing_um is None:
        spacing_um = v.spacing_um if isinstance(v, InstanceLabelVolume) else (1.0, 1.0, 1.0)
    ids, counts = np.unique(labels[labels > 0], return_counts=True)
    if ids.size == 0:
        raise UndefinedMetricError("no instances in label volume")
    dx, dy, dz = spacing_um
    return float(np.mean(counts * (dx * dy * dz)))


def instance_count(v) -> int:
    labels = _labels(v)
    return int(np.unique(labels[labels > 0]).size)


def stack_masks_2d_to_3d(slices, iou_threshold: float = 0.5, spacing_um=(1.0, 1.0, 1.0)) -> InstanceLabelVolume:
    """Link per-slice 2D instance masks into 3D instances by greedy IoU matching.

    Each instance in slice z+1 joins the slice-z instance it overlaps most
    (IoU >= threshold, ties to the lower 3D id); otherwise it opens a new id.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ParameterError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    planes = [np.asarray(s) for s in slices]
    if not planes:
        raise ShapeError("no slices to stack")
    for p in planes:
        if p.ndim != 2 or p.shape != planes[0].shape:
            raise ShapeError("all slices must be 2D with equal dimensions")
    out = np.zeros((len(planes),) + planes[0].shape, dtype=np.int64)
    next_id = 1
    prev_ids: list[tuple[int, np.ndarray]] = []  # (3D id, mask) in the previous slice
    for z, plane in enumerate(planes):
        current = []
        for local in np.unique(plane[plane > 0]):
            mask = plane == local
            best_id, best_iou = None, -1.0
            for gid, prev in prev_ids:
                inter = np.logical_and(mask, prev).sum()
                if inter == 0:
                    continue
                iou = inter / np.logical_or(mask, prev).sum()
                if iou > best_iou or (iou == best_iou and gid < best_id):
                    best_id, best_iou = gid, iou
            if best_id is None or best_iou < iou_threshold:
                best_id = next_id
                next_id += 1
            out[z][mask] = best_id
            current.append((best_id, mask))
        # merge masks sharing one 3D id so the next slice sees whole instances
        merged: dict[int, np.ndarray] = {}
        for gid, mask in current:
            merged[gid] = merged[gid] | mask if gid in merged else mask
        prev_ids = sorted(merged.items())
    return InstanceLabelVolume(out, tuple(spacing_um))


# ---------------------------------------------------------------- distribution metrics

@dataclass
class FeatureSet:
    vectors: np.ndarray
    extractor: str = "unknown"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ShapeError(f"features must be an N x D matrix, got shape {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ParameterError("features contain non-finite values")


def _vectors(f) -> np.ndarray:
    return f.vectors if isinstance(f, FeatureSet) else np.asarray(f, dtype=np.float64)


def _check_pair(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("features must be N x D matrices")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ParameterError("need at least two feature vectors per set")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between Gaussians given their moments."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid(feats_a, feats_b) -> float:
    a, b = _vectors(feats_a), _vectors(feats_b)
    _check_pair(a, b)
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False, ddof=1),
                            b.mean(0), np.cov(b, rowvar=False, ddof=1))


def polynomial_kernel(x, y) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def kid(feats_a, feats_b) -> float:
    """Unbiased polynomial-kernel MMD^2 over the full sets."""
    a, b = _vectors(feats_a), _vectors(feats_b)
    _check_pair(a, b)
    m, n = a.shape[0], b.shape[0]
    k_aa, k_bb, k_ab = polynomial_kernel(a, a), polynomial_kernel(b, b), polynomial_kernel(a, b)
    term_a = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    term_b = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * k_ab.mean())


def save_features(features: FeatureSet, path) -> Path:
    path = Path(path)
    v = features.vectors
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"{v.shape[0]},{v.shape[1]},{features.extractor}\n")
        csv.writer(fh).writerows(v.tolist())
    return path


def load_features(path) -> FeatureSet:
    """Read a feature CSV whose first line is ``N,D,extractor``; ``.npy`` matrices are also accepted."""
    path = Path(path)
    if not path.is_file():
        raise ParameterError(f"{path}: feature file not found")
    if path.suffix == ".npy":
        try:
            return FeatureSet(np.load(path), extractor=path.stem)
        except (ValueError, ShapeError) as err:
            raise ParameterError(f"{path}: {err}") from None
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) != 3:
        raise ParameterError(f"{path}:1: header must be 'N,D,extractor'")
    try:
        n, d = int(rows[0][0]), int(rows[0][1])
    except ValueError:
        raise ParameterError(f"{path}:1: N and D must be integers") from None
    body = [r for r in rows[1:]]
    if len(body) != n:
        raise ParameterError(f"{path}:{len(body) + 2}: expected {n} feature rows, found {len(body)}")
    data = np.empty((n, d))
    for i, row in enumerate(body):
        lineno = i + 2
        if len(row) != d:
            raise ParameterError(f"{path}:{lineno}: expected {d} values, found {len(row)}")
        try:
            data[i] = [float(x) for x in row]
        except ValueError:
            raise ParameterError(f"{path}:{lineno}: non-numeric value") from None
        if not np.all(np.isfinite(data[i])):
            raise ParameterError(f"{path}:{lineno}: non-finite value")
    return FeatureSet(data, extractor=rows[0][2])


# ---------------------------------------------------------------- reporting

@dataclass
class MetricsReport:
    fid: Optional[float] = None
    kid: Optional[float] = None
    dice3d: Optional[float] = None
    hd95_um: Optional[float] = None
    mean_instance_volume_um3: Optional[float] = None
    gt_mean_instance_volume_um3: Optional[float] = None
    pred_instances: int = 0
    gt_instances: int = 0
    extractor: Optional[str] = None
    volume_ids: list = field(default_factory=list)
    absent: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        cols = [("FID", self.fid, "{:.2f}"), ("KID", self.kid, "{:.4f}"), ("3D DICE", self.dice3d, "{:.3f}"),
                ("Nuc. Volume (um^3)", self.mean_instance_volume_um3, "{:.1f}"), ("HD95 (um)", self.hd95_um, "{:.2f}")]
        head = " | ".join(c[0] for c in cols)
        row = " | ".join("-" if v is None else fmt.format(v) for _, v, fmt in cols)
        lines = [head, "-" * len(head), row]
        if self.gt_mean_instance_volume_um3 is not None:
            lines.append(f"Ground truth nuclei volume: {self.gt_mean_instance_volume_um3:.1f} um^3")
        for key, reason in sorted(self.absent.items()):
            lines.append(f"{key}: absent ({reason})")
        return "\n".join(lines)


def evaluate_pair(pred, gt, feats_pred=None, feats_real=None, spacing_um=None,
                  volume_ids=(), hd95_mode: str = "pooled") -> MetricsReport:
    """Compute every metric independently; a metric that cannot be computed is recorded in ``absent``."""
    if spacing_um is None:
        spacing_um = gt.spacing_um if isinstance(gt, InstanceLabelVolume) else (1.0, 1.0, 1.0)
    report = MetricsReport(volume_ids=list(volume_ids))
    pl, gl = _labels(pred), _labels(gt)
    report.pred_instances, report.gt_instances = instance_count(pl), instance_count(gl)

    def attempt(name, fn):
        try:
            setattr(report, name, fn())
        except (UndefinedMetricError, ParameterError, ShapeError) as err:
            report.absent[name] = str(err)

    attempt("dice3d", lambda: dice3d(pl, gl))
    attempt("hd95_um", lambda: hd95(pl, gl, spacing_um, mode=hd95_mode))
    attempt("mean_instance_volume_um3", lambda: mean_instance_volume(pl, spacing_um))
    attempt("gt_mean_instance_volume_um3", lambda: mean_instance_volume(gl, spacing_um))
    if feats_pred is None or feats_real is None:
        report.absent["fid"] = report.absent["kid"] = "no features"
    else:
        if isinstance(feats_pred, FeatureSet):
            report.extractor = feats_pred.extractor
        attempt("fid", lambda: fid(feats_pred, feats_real))
        attempt("kid", lambda: kid(feats_pred, feats_real))
    return report


# ---------------------------------------------------------------- nuclei detection on virtual H&E

def hematoxylin_channel(rgb) -> np.ndarray:
    """Hematoxylin channel of uint8 RGB by colour deconvolution."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    flat = rgb.reshape(-1, 1, 3)
    return rgb2hed(flat)[..., 0].reshape(rgb.shape[:-1])


def default_hematoxylin_threshold() -> float:
    from .phantom import HE_BACKGROUND, HE_NUCLEUS
    return float(0.5 * (hematoxylin_channel(np.array(HE_BACKGROUND)) + hematoxylin_channel(np.array(HE_NUCLEUS))))


def detect_nuclei(he_volume, threshold: Optional[float] = None, spacing_um=(1.0, 1.0, 1.0)) -> InstanceLabelVolume:
    """Fixed-threshold nuclei detector on the hematoxylin channel, 6-connected 3D components."""
    vol = np.asarray(he_volume)
    if vol.ndim != 4 or vol.shape[-1] != 3:
        raise ShapeError(f"expected a (Z, Y, X, 3) RGB volume, got shape {vol.shape}")
    thr = default_hematoxylin_threshold() if threshold is None else threshold
    labels, _ = ndimage.label(hematoxylin_channel(vol) > thr, structure=SIX_CONNECTED)
    return InstanceLabelVolume(labels, tuple(spacing_um))
