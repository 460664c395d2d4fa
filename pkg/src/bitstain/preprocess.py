"""Slice preprocessing: background subtraction, 8-bit scaling, channel stacking and tiling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError, ShapeError

DEFAULT_SIGMA_PX = 30.0
DEFAULT_PERCENTILES = (1.0, 99.0)


@dataclass(frozen=True)
class TileOrigin:
    volume_id: str
    z: int
    y: int
    x: int


def _as_slice(pixels) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"expected a non-empty 2D slice, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("slice contains non-finite intensities")
    return arr


def gaussian_blur(pixels, sigma_px: float) -> np.ndarray:
    """Gaussian blur with reflected boundaries, kernel truncated at 4 sigma."""
    if not sigma_px > 0:
        raise ParameterError(f"sigma must be positive, got {sigma_px}")
    arr = _as_slice(pixels)
    return ndimage.gaussian_filter(arr, sigma=sigma_px, mode="reflect", truncate=4.0)


def background_subtract(pixels, sigma_px: float = DEFAULT_SIGMA_PX) -> np.ndarray:
    """Remove the slowly varying background; the result may be negative."""
    arr = _as_slice(pixels)
    # shifting by one pixel value first makes constant slices come out exactly zero
    centred = arr - arr.flat[0]
    return centred - gaussian_blur(centred, sigma_px)


def percentile_window(values, lo_pct: float, hi_pct: float) -> tuple[float, float]:
    if not (0.0 <= lo_pct < hi_pct <= 100.0):
        raise ParameterError(f"need 0 <= lo < hi <= 100, got lo={lo_pct}, hi={hi_pct}")
    lo, hi = np.percentile(np.asarray(values, dtype=np.float64), [lo_pct, hi_pct])
    return float(lo), float(hi)


def to_eight_bit(pixels, lo_pct: float = DEFAULT_PERCENTILES[0],
                 hi_pct: float = DEFAULT_PERCENTILES[1], window=None) -> np.ndarray:
    """Clip to a percentile window and map affinely onto 0..255.

    ``window`` bypasses the percentile computation, which is how per-volume
    scaling reuses one window for every slice. A degenerate window maps
    everything to 0.
    """
    arr = _as_slice(pixels)
    lo, hi = window if window is not None else percentile_window(arr, lo_pct, hi_pct)
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    scaled = (np.clip(arr, lo, hi) - lo) * (255.0 / (hi - lo))
    # np.rint rounds half to even
    return np.rint(scaled).astype(np.uint8)


def make_three_channel(slice8) -> np.ndarray:
    """Stack (original, inverted, original) into a 3 x H x W uint8 array."""
    v = np.asarray(slice8)
    if v.ndim != 2:
        raise ShapeError(f"expected a 2D slice, got shape {v.shape}")
    if v.size and (v.min() < 0 or v.max() > 255):
        raise ParameterError("8-bit slice values must lie in [0, 255]")
    v = v.astype(np.uint8)
    return np.stack([v, 255 - v, v])


def preprocess_slice(pixels, sigma_px: float = DEFAULT_SIGMA_PX,
                     lo_pct: float = DEFAULT_PERCENTILES[0],
                     hi_pct: float = DEFAULT_PERCENTILES[1]) -> np.ndarray:
    return make_three_channel(to_eight_bit(background_subtract(pixels, sigma_px), lo_pct, hi_pct))


def preprocess_volume(volume, sigma_px: float = DEFAULT_SIGMA_PX,
                      lo_pct: float = DEFAULT_PERCENTILES[0],
                      hi_pct: float = DEFAULT_PERCENTILES[1],
                      per_volume: bool = False) -> np.ndarray:
    """Preprocess a (Z, Y, X) raw volume into (Z, 3, Y, X) uint8 network inputs."""
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ShapeError(f"expected a (Z, Y, X) volume, got shape {vol.shape}")
    subtracted = [background_subtract(s, sigma_px) for s in vol]
    window = percentile_window(np.stack(subtracted), lo_pct, hi_pct) if per_volume else None
    return np.stack([make_three_channel(to_eight_bit(s, lo_pct, hi_pct, window=window))
                     for s in subtracted])


def tile_offsets(length: int, tile: int, stride: int) -> list[int]:
    if stride <= 0:
        raise ParameterError(f"stride must be positive, got {stride}")
    if stride > tile:
        raise ParameterError(f"stride {stride} larger than tile {tile} would leave gaps")
    if tile <= 0 or tile > length:
        raise ShapeError(f"tile size {tile} does not fit in extent {length}")
    offsets = list(range(0, length - tile + 1, stride))
    if offsets[-1] != length - tile:
        offsets.append(length - tile)
    return offsets


def tile_volume(volume, tile_size: int = 512, stride: int | None = None, volume_id: str = ""):
    """Enumerate lateral tiles row-major; the last row/column is clamped to the edge.

    Accepts a (Y, X) slice, a (Z, Y, X) stack or a (Z, C, Y, X) channel stack.
    Returns a list of ``(tile, TileOrigin)``.
    """
    arr = np.asarray(volume)
    stride = tile_size if stride is None else stride
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim not in (3, 4):
        raise ShapeError(f"cannot tile array of shape {arr.shape}")
    height, width = arr.shape[-2:]
    ys = tile_offsets(height, tile_size, stride)
    xs = tile_offsets(width, tile_size, stride)
    tiles = []
    for z in range(arr.shape[0]):
        for y in ys:
            for x in xs:
                tile = arr[z, ..., y:y + tile_size, x:x + tile_size]
                tiles.append((tile, TileOrigin(volume_id, z, y, x)))
    return tiles
