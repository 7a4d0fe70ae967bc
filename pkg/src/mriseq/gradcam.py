"""3D GradCAM saliency volumes and slice overlay export.

The saliency of a class is ReLU(sum_k w_k A_k) where A_k are the channels
of a chosen feature layer and w_k is the spatial mean of the gradient of
that class logit with respect to A_k. The map is trilinearly upsampled to
the input dims and normalized so its maximum is 1 (an all-zero map stays
zero).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, select_logit
from .errors import DataError
from .models import Module
from .preprocess import trilinear_resize
from .volume import SeriesLabel


@dataclass(frozen=True)
class SaliencyVolume:
    """Non-negative saliency over the model input grid, max-normalized."""

    values: np.ndarray
    target_class: SeriesLabel
    layer: str

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise DataError(f"saliency must be 3-D, got shape {v.shape}")
        if (v < 0).any() or (v > 1.0 + 1e-6).any():
            raise DataError("saliency values must lie in [0,1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)


def gradcam(model: Module, arr: np.ndarray, target_class,
            layer: str = "final") -> SaliencyVolume:
    """Saliency of ``target_class`` for one preprocessed input array.

    ``arr`` is the (nx, ny, nz) array that would be fed to the model. The
    model runs in eval mode; gradients flow only to compute the channel
    weights, nothing is mutated.
    """
    if isinstance(target_class, SeriesLabel):
        target = target_class
    else:
        target = SeriesLabel.from_index(int(target_class))
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise DataError(f"expected a 3-D input array, got shape {arr.shape}")
    x = Tensor(arr[None, None].astype(np.float32))
    logits, feat = model(x, training=False, capture=layer)
    if feat.data.ndim != 5:
        raise DataError(f"feature layer {layer!r} is not a 5-D map")
    score = select_logit(logits, 0, target.index)
    score.backward()
    grad = feat.grad[0]
    weights = grad.mean(axis=(1, 2, 3))
    cam = np.maximum(0.0, np.tensordot(weights, feat.data[0], axes=1))
    cam = trilinear_resize(cam, arr.shape)
    cam = np.maximum(cam, 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return SaliencyVolume(values=cam.astype(np.float32), target_class=target,
                          layer=layer)


def _slice2d(arr: np.ndarray, axis: int, index: int) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise DataError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < arr.shape[axis]:
        raise DataError(
            f"slice {index} out of range for axis {axis} with extent {arr.shape[axis]}")
    return np.take(arr, index, axis=axis)


def export_overlay(arr: np.ndarray, saliency: SaliencyVolume, axis: int,
                   slice_index: int, path: str | Path) -> None:
    """Write one slice as a binary PPM with a blue-to-red saliency tint.

    The grayscale underlay is the clipped [0,1] volume slice; the saliency
    colormap runs from blue (0) to red (1) and is blended at alpha 0.4.
    Output bytes are a pure function of the inputs.
    """
    arr = np.asarray(arr)
    if arr.shape != saliency.values.shape:
        raise DataError(f"volume dims {arr.shape} do not match saliency "
                        f"dims {saliency.values.shape}")
    gray = np.clip(_slice2d(arr, axis, slice_index), 0.0, 1.0)
    sal = _slice2d(saliency.values, axis, slice_index)
    red, green, blue = sal, np.zeros_like(sal), 1.0 - sal
    alpha = 0.4
    rgb = np.stack([
        (1 - alpha) * gray + alpha * red,
        (1 - alpha) * gray + alpha * green,
        (1 - alpha) * gray + alpha * blue,
    ], axis=-1)
    raster = np.round(255.0 * np.clip(rgb, 0.0, 1.0)).astype(np.uint8)
    height, width = raster.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(raster.tobytes())
