"""Synthetic BIT / H&E / nuclei-label phantoms with focal-plane dependent contrast.

Nuclei are axis-aligned ellipsoids. In the BIT-like volume a nucleus is darker
than the background above the focal plane (z < focal_plane_z) and brighter at
or below it, which is the shift-variant behaviour the training losses target.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParameterError, PhantomGenerationError

BIT_BACKGROUND = 128.0
HE_BACKGROUND = (236, 178, 204)  # eosin pink
HE_NUCLEUS = (82, 44, 132)  # hematoxylin purple
MAX_PLACEMENT_ATTEMPTS = 2000


@dataclass(frozen=True)
class PhantomSpec:
    volume_dims: tuple[int, int, int] = (64, 64, 16)  # (X, Y, Z) voxels
    voxel_spacing_um: tuple[float, float, float] = (0.5, 0.5, 1.0)
    nuclei_count: int = 10
    radius_range_um: tuple[float, float] = (2.5, 4.0)
    focal_plane_z: int = 8
    contrast_amplitude: float = 0.25
    noise_sigma: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if len(self.volume_dims) != 3 or any(int(d) <= 0 for d in self.volume_dims):
            raise ParameterError(f"volume_dims must be positive, got {self.volume_dims}")
        if any(not s > 0 for s in self.voxel_spacing_um):
            raise ParameterError(f"voxel spacing must be positive, got {self.voxel_spacing_um}")
        if self.nuclei_count < 0:
            raise ParameterError("nuclei_count must be >= 0")
        lo, hi = self.radius_range_um
        if not 0 < lo <= hi:
            raise ParameterError(f"invalid radius range {self.radius_range_um}")
        if not 0 <= self.focal_plane_z <= self.volume_dims[2]:
            raise ParameterError(f"focal_plane_z {self.focal_plane_z} outside [0, {self.volume_dims[2]}]")
        if not 0 <= self.contrast_amplitude <= 0.5:
            raise ParameterError("contrast_amplitude must lie in [0, 0.5]")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown phantom spec keys: {sorted(unknown)}")
        kw = dict(data)
        for key in ("volume_dims", "voxel_spacing_um", "radius_range_um"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class Nucleus:
    label: int
    center_um: tuple[float, float, float]  # (x, y, z)
    radii_um: tuple[float, float, float]

    @property
    def analytic_volume_um3(self) -> float:
        a, b, c = self.radii_um
        return 4.0 / 3.0 * math.pi * a * b * c


@dataclass
class Phantom:
    bit: np.ndarray  # (Z, Y, X) uint8
    he: np.ndarray  # (Z, Y, X, 3) uint8
    labels: np.ndarray  # (Z, Y, X) uint16
    spec: PhantomSpec
    nuclei: list[Nucleus] = field(default_factory=list)

    def __iter__(self):
        return iter((self.bit, self.he, self.labels))


def _stream(seed: int, *path: int) -> np.random.Generator:
    # Philox is counter-based: each (seed, path) names an independent stream
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2**64 - 1), *path])))


def place_nuclei(spec: PhantomSpec) -> list[Nucleus]:
    rng = _stream(spec.seed, 0)
    extent = [n * s for n, s in zip(spec.volume_dims, spec.voxel_spacing_um)]
    lo, hi = spec.radius_range_um
    placed: list[Nucleus] = []
    attempts = 0
    while len(placed) < spec.nuclei_count:
        if attempts >= MAX_PLACEMENT_ATTEMPTS * max(spec.nuclei_count, 1):
            raise PhantomGenerationError(
                f"placed only {len(placed)} of {spec.nuclei_count} nuclei without overlap",
                placed=len(placed))
        attempts += 1
        radii = tuple(float(r) for r in rng.uniform(lo, hi, size=3))
        if any(2 * r > e for r, e in zip(radii, extent)):
            continue
        center = tuple(float(rng.uniform(r, e - r)) for r, e in zip(radii, extent))
        # bounding spheres guarantee disjoint ellipsoids
        r_max = max(radii)
        if any(math.dist(center, other.center_um) <= r_max + max(other.radii_um) for other in placed):
            continue
        placed.append(Nucleus(len(placed) + 1, center, radii))
    return placed


def rasterize_labels(nuclei, dims, spacing) -> np.ndarray:
    n_x, n_y, n_z = dims
    dx, dy, dz = spacing
    zz, yy, xx = np.meshgrid((np.arange(n_z) + 0.5) * dz, (np.arange(n_y) + 0.5) * dy,
                             (np.arange(n_x) + 0.5) * dx, indexing="ij")
    labels = np.zeros((n_z, n_y, n_x), dtype=np.uint16)
    for nuc in nuclei:
        (cx, cy, cz), (a, b, c) = nuc.center_um, nuc.radii_um
        inside = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 + ((zz - cz) / c) ** 2 <= 1.0
        labels[inside] = nuc.label
    return labels


def render_bit(labels, spec: PhantomSpec) -> np.ndarray:
    n_z = labels.shape[0]
    delta = spec.contrast_amplitude * 255.0
    out = np.empty(labels.shape, dtype=np.uint8)
    for z in range(n_z):
        polarity = -1.0 if z < spec.focal_plane_z else 1.0
        plane = np.full(labels.shape[1:], BIT_BACKGROUND)
        plane[labels[z] > 0] += polarity * delta
        if spec.noise_sigma > 0:
            plane += _stream(spec.seed, 1, z).normal(0.0, spec.noise_sigma, size=plane.shape)
        out[z] = np.clip(np.rint(plane), 0, 255).astype(np.uint8)
    return out


def render_he(labels) -> np.ndarray:
    he = np.empty(labels.shape + (3,), dtype=np.uint8)
    he[...] = HE_BACKGROUND
    he[labels > 0] = HE_NUCLEUS
    return he


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Render a (bit, he, labels) triplet; a pure function of ``spec``."""
    nuclei = place_nuclei(spec)
    labels = rasterize_labels(nuclei, spec.volume_dims, spec.voxel_spacing_um)
    return Phantom(render_bit(labels, spec), render_he(labels), labels, spec, nuclei)
