"""Slice-per-file volume directories with a plain-text metadata sidecar."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import VolumeIOError

META_NAME = "meta.txt"
SLICE_RE = re.compile(r"^slice_(\d+)\.png$")
MODALITIES = ("BIT", "HE", "label")


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]  # (X, Y, Z)
    spacing_um: tuple[float, float, float]  # (dx, dy, dz)
    modality: str

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) <= 0 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing_um) != 3 or any(not float(s) > 0 for s in self.spacing_um):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing_um}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

    @classmethod
    def for_array(cls, volume, spacing_um, modality):
        z, y, x = np.shape(volume)[:3]
        return cls((x, y, z), tuple(float(s) for s in spacing_um), modality)

    @property
    def voxel_volume_um3(self) -> float:
        dx, dy, dz = self.spacing_um
        return dx * dy * dz


def _write_meta(meta: VolumeMeta, path: Path) -> None:
    lines = [
        "dims = " + " ".join(str(int(d)) for d in meta.dims),
        "spacing_um = " + " ".join(repr(float(s)) for s in meta.spacing_um),
        f"modality = {meta.modality}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(directory) -> VolumeMeta:
    path = Path(directory) / META_NAME
    if not path.is_file():
        raise VolumeIOError(f"missing metadata sidecar: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise VolumeIOError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    try:
        dims = tuple(int(v) for v in values["dims"].split())
        spacing = tuple(float(v) for v in values["spacing_um"].split())
        return VolumeMeta(dims, spacing, values["modality"])
    except KeyError as err:
        raise VolumeIOError(f"{path}: missing key {err.args[0]!r}") from None
    except ValueError as err:
        raise VolumeIOError(f"{path}: {err}") from None


def save_volume(volume, directory, meta: VolumeMeta) -> Path:
    """Write a (Z, Y, X) or (Z, Y, X, 3) uint8/uint16 volume as numbered PNGs."""
    vol = np.asarray(volume)
    if vol.dtype not in (np.uint8, np.uint16):
        raise VolumeIOError(f"only uint8 and uint16 volumes can be saved, got {vol.dtype}")
    if vol.ndim == 4 and (vol.shape[-1] != 3 or vol.dtype != np.uint8):
        raise VolumeIOError("multichannel volumes must be 8-bit RGB")
    if vol.ndim not in (3, 4):
        raise VolumeIOError(f"expected a 3D volume, got shape {vol.shape}")
    z, y, x = vol.shape[:3]
    if tuple(meta.dims) != (x, y, z):
        raise VolumeIOError(f"meta dims {meta.dims} do not match volume (X, Y, Z) = {(x, y, z)}")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for stale in out.glob("slice_*.png"):
        stale.unlink()
    for index, plane in enumerate(vol):
        Image.fromarray(np.ascontiguousarray(plane)).save(out / f"slice_{index:04d}.png")
    _write_meta(meta, out / META_NAME)
    return out


def load_volume(directory):
    """Read a volume directory written by :func:`save_volume`; returns ``(volume, meta)``."""
    root = Path(directory)
    if not root.is_dir():
        raise VolumeIOError(f"volume directory does not exist: {root}")
    meta = read_meta(root)
    found = {}
    for path in root.iterdir():
        match = SLICE_RE.match(path.name)
        if match:
            found[int(match.group(1))] = path
    n_x, n_y, n_z = meta.dims
    for index in range(n_z):
        if index not in found:
            raise VolumeIOError(f"{root}: missing slice index {index} (slice_{index:04d}.png)")
    extra = sorted(i for i in found if i >= n_z)
    if extra:
        raise VolumeIOError(f"{root}: slice {found[extra[0]].name} beyond declared depth {n_z}")
    planes = []
    for index in range(n_z):
        with Image.open(found[index]) as img:
            plane = np.array(img)
        if plane.dtype == np.int32:
            plane = plane.astype(np.uint16)
        if plane.shape[:2] != (n_y, n_x):
            raise VolumeIOError(
                f"{found[index]}: slice shape {plane.shape[:2]} inconsistent with dims (Y, X) = {(n_y, n_x)}")
        if planes and (plane.shape != planes[0].shape or plane.dtype != planes[0].dtype):
            raise VolumeIOError(f"{found[index]}: inconsistent slice format")
        planes.append(plane)
    return np.stack(planes), meta
