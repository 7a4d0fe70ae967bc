"""Deterministic preprocessing: reorient, resample, clip, crop-or-pad, rescale."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .volume import CANONICAL_ORIENTATION, Volume3D, reorient


#: Desk-scale override used by the --toy preset.
TOY_TARGET_DIMS = (32, 32, 8)


@dataclass(frozen=True)
class PreprocessConfig:
    """Pipeline parameters. Defaults are the full-scale settings."""

    target_spacing: tuple[float, float, float] = (1.5, 1.5, 7.8)
    target_dims: tuple[int, int, int] = (256, 256, 36)
    clip_percentiles: tuple[float, float] = (1.0, 99.0)
    rescale_to_unit: bool = True

    def __post_init__(self):
        if any(s <= 0 for s in self.target_spacing):
            raise DataError(f"target_spacing must be positive, got {self.target_spacing}")
        if any(d <= 0 for d in self.target_dims):
            raise DataError(f"target_dims must be positive, got {self.target_dims}")
        lo, hi = self.clip_percentiles
        if not (0.0 <= lo < hi <= 100.0):
            raise DataError(
                f"clip_percentiles must satisfy 0 <= lo < hi <= 100, got {self.clip_percentiles}"
            )
        object.__setattr__(self, "target_spacing", tuple(float(s) for s in self.target_spacing))
        object.__setattr__(self, "target_dims", tuple(int(d) for d in self.target_dims))
        object.__setattr__(self, "clip_percentiles", (float(lo), float(hi)))

    def digest(self) -> str:
        """Stable hash of the config, used to key preprocessing caches."""
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.blake2s(payload.encode("utf-8"), digest_size=8).hexdigest()


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def percentile(values: np.ndarray, q: float) -> float:
    """Percentile by sorting and linear interpolation at rank q*(n-1)/100."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise DataError("percentile of an empty array")
    return float(np.percentile(flat, q))


def _axis_coords(n_out: int, t_sp: float, s_sp: float, n_in: int):
    """Input-space sample coordinates for one axis, edge clamped."""
    u = np.arange(n_out, dtype=np.float64) * (t_sp / s_sp)
    np.clip(u, 0.0, float(n_in - 1), out=u)
    lo = np.floor(u).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = u - lo
    return lo, hi, frac


def trilinear_resize(arr: np.ndarray, out_dims: tuple[int, int, int]) -> np.ndarray:
    """Trilinear resize of a 3-D array to ``out_dims`` (endpoints aligned).

    Output index j reads input coordinate j*(n_in-1)/(n_out-1); a size-1
    output axis reads the input midpoint. Used for saliency upsampling and
    coarse-grid field expansion, where there is no physical spacing to honor.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D array, got shape {arr.shape}")
    if any(d < 1 for d in out_dims):
        raise ValueError(f"output dims must be positive: {out_dims}")

    def axis(n_out: int, n_in: int):
        if n_out == 1:
            u = np.array([(n_in - 1) / 2.0])
        else:
            u = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
        lo = np.floor(u).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, u - lo

    lox, hix, fx = axis(out_dims[0], arr.shape[0])
    loy, hiy, fy = axis(out_dims[1], arr.shape[1])
    loz, hiz, fz = axis(out_dims[2], arr.shape[2])
    cx = arr[lox] * (1.0 - fx)[:, None, None] + arr[hix] * fx[:, None, None]
    cy = cx[:, loy] * (1.0 - fy)[None, :, None] + cx[:, hiy] * fy[None, :, None]
    return cy[:, :, loz] * (1.0 - fz)[None, None, :] + cy[:, :, hiz] * fz[None, None, :]


def resample(vol: Volume3D, target_spacing: tuple[float, float, float]) -> Volume3D:
    """Trilinear resample onto ``target_spacing``.

    Output dims are round(dims_i * spacing_i / target_i), at least 1. Voxel
    centers sit at index*spacing, so output index j reads input coordinate
    j*target/spacing, clamped to the grid. Equal spacing returns the volume
    unchanged.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise DataError(f"target spacing must be positive, got {target_spacing}")
    if target_spacing == vol.spacing:
        return vol
    out_dims = tuple(
        max(1, _round_half_up(d * s / t))
        for d, s, t in zip(vol.dims, vol.spacing, target_spacing)
    )
    arr = vol.array().astype(np.float64, copy=False)
    lox, hix, fx = _axis_coords(out_dims[0], target_spacing[0], vol.spacing[0], vol.dims[0])
    loy, hiy, fy = _axis_coords(out_dims[1], target_spacing[1], vol.spacing[1], vol.dims[1])
    loz, hiz, fz = _axis_coords(out_dims[2], target_spacing[2], vol.spacing[2], vol.dims[2])

    # Interpolate axis by axis: gather the two x-planes, then blend y, then z.
    cx = arr[lox] * (1.0 - fx)[:, None, None] + arr[hix] * fx[:, None, None]
    cy = cx[:, loy] * (1.0 - fy)[None, :, None] + cx[:, hiy] * fy[None, :, None]
    out = cy[:, :, loz] * (1.0 - fz)[None, None, :] + cy[:, :, hiz] * fz[None, None, :]
    return Volume3D.from_array(out.astype(np.float32), target_spacing, vol.orientation)


def clip_percentiles(vol: Volume3D, lo: float = 1.0, hi: float = 99.0) -> Volume3D:
    """Clip intensities to the [lo, hi] percentile interval of this volume."""
    p_lo, p_hi = _clip_bounds(vol.data, lo, hi)
    clipped = np.clip(vol.data, p_lo, p_hi)
    return Volume3D(vol.dims, vol.spacing, vol.orientation, clipped.astype(np.float32))


def _clip_bounds(values: np.ndarray, lo: float, hi: float) -> tuple[float, float]:
    if not (0.0 <= lo < hi <= 100.0):
        raise DataError(f"percentile bounds out of order: ({lo}, {hi})")
    p = np.percentile(np.asarray(values, dtype=np.float64), [lo, hi])
    return float(p[0]), float(p[1])


def crop_or_pad(vol: Volume3D, target_dims: tuple[int, int, int],
                pad_value: float = 0.0) -> Volume3D:
    """Center crop or zero pad each axis to ``target_dims``.

    Cropping starts at floor((n-N)/2); padding puts floor((N-n)/2) voxels on the
    low-index side, so any odd remainder goes to the high side.
    """
    target_dims = tuple(int(d) for d in target_dims)
    if any(d <= 0 for d in target_dims):
        raise DataError(f"target dims must be positive, got {target_dims}")
    arr = vol.array()
    slices = []
    pads = []
    for n, want in zip(vol.dims, target_dims):
        if n >= want:
            start = (n - want) // 2
            slices.append(slice(start, start + want))
            pads.append((0, 0))
        else:
            before = (want - n) // 2
            slices.append(slice(0, n))
            pads.append((before, want - n - before))
    out = arr[tuple(slices)]
    if any(p != (0, 0) for p in pads):
        out = np.pad(out, pads, constant_values=np.float32(pad_value))
    return Volume3D.from_array(out, vol.spacing, vol.orientation)


def preprocess_pipeline(vol: Volume3D, cfg: PreprocessConfig) -> Volume3D:
    """Run the full pipeline; output dims always equal ``cfg.target_dims``.

    Stages: reorient to (R→L, P→A, I→S), resample to target spacing, clip to the
    configured percentiles, center crop or zero pad to target dims, then (when
    enabled) affine rescale of the clip interval onto [0, 1], clamped so padded
    zeros cannot fall below 0.
    """
    vol = reorient(vol, CANONICAL_ORIENTATION)
    vol = resample(vol, cfg.target_spacing)
    lo, hi = cfg.clip_percentiles
    p_lo, p_hi = _clip_bounds(vol.data, lo, hi)
    clipped = np.clip(vol.data, p_lo, p_hi).astype(np.float32)
    vol = Volume3D(vol.dims, vol.spacing, vol.orientation, clipped)
    vol = crop_or_pad(vol, cfg.target_dims)
    if cfg.rescale_to_unit:
        span = p_hi - p_lo
        if span <= 0:
            data = np.zeros(vol.data.size, dtype=np.float32)
        else:
            data = (vol.data.astype(np.float64) - p_lo) / span
            data = np.clip(data, 0.0, 1.0).astype(np.float32)
        vol = Volume3D(vol.dims, vol.spacing, vol.orientation, data)
    return vol
