"""Deterministic volume preprocessing: percentile min-max normalization,
in-plane resampling to a fixed resolution, and center crop / zero-pad to
fixed dimensions. Normalization runs first, then resampling, then crop/pad.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .data import LabelVolume, Volume


class PreprocessError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    target_resolution: tuple[float, float] = (1.3, 1.3)  # mm per pixel
    target_dims: tuple[int, int] = (64, 64)
    percentiles: tuple[float, float] = (1.0, 99.0)

    def validate(self):
        if self.target_resolution[0] <= 0 or self.target_resolution[1] <= 0:
            raise PreprocessError("target_resolution must be positive")
        if self.target_dims[0] <= 0 or self.target_dims[1] <= 0:
            raise PreprocessError("target_dims must be positive")
        lo, hi = self.percentiles
        if not (0 <= lo < hi <= 100):
            raise PreprocessError("percentiles must satisfy 0 <= low < high <= 100")


def percentile_normalize(vol: Volume, percentiles: tuple[float, float] = (1.0, 99.0)
                         ) -> Volume:
    """Min-max normalize a volume by its low/high intensity percentiles.

    Computes (x - x_lo) / (x_hi - x_lo) over the whole 3D volume, where the
    percentiles use numpy's linear interpolation between order statistics.
    Values outside the percentile window are NOT clamped, so outputs may
    fall outside [0, 1].
    """
    x = vol.intensities.astype(np.float64)
    lo, hi = np.percentile(x, percentiles)
    if hi <= lo:
        raise PreprocessError(f"constant-intensity volume {vol.subject_id!r}: "
                              f"percentile window is degenerate ({lo} == {hi})")
    out = (x - lo) / (hi - lo)
    return Volume(intensities=out.astype(np.float32), spacing=vol.spacing,
                  subject_id=vol.subject_id)


def _resample_grid(size: int, spacing: float, target: float) -> tuple[int, np.ndarray]:
    new_size = max(1, int(round(size * spacing / target)))
    coords = np.arange(new_size, dtype=np.float64) * (target / spacing)
    return new_size, coords


def resample_inplane(vol: Volume, labels: Optional[LabelVolume],
                     cfg: PreprocessConfig) -> tuple[Volume, Optional[LabelVolume]]:
    """Resample each 2D slice to the target in-plane resolution.

    Intensities use bilinear interpolation, labels nearest-neighbour, on a
    corner-anchored sampling grid. The through-plane axis is untouched and
    the output spacing equals the target resolution.
    """
    cfg.validate()
    S, H, W = vol.dims
    new_h, rcoords = _resample_grid(H, vol.spacing[0], cfg.target_resolution[0])
    new_w, ccoords = _resample_grid(W, vol.spacing[1], cfg.target_resolution[1])
    grid = np.meshgrid(rcoords, ccoords, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])

    out_img = np.empty((S, new_h, new_w), dtype=np.float64)
    for s in range(S):
        out_img[s] = ndimage.map_coordinates(
            vol.intensities[s].astype(np.float64), coords, order=1, mode="nearest",
        ).reshape(new_h, new_w)
    out_vol = Volume(intensities=out_img.astype(np.float32),
                     spacing=cfg.target_resolution, subject_id=vol.subject_id)

    out_lab = None
    if labels is not None:
        if labels.dims != vol.dims:
            raise PreprocessError("label dims do not match volume dims")
        out_l = np.empty((S, new_h, new_w), dtype=np.uint8)
        for s in range(S):
            out_l[s] = ndimage.map_coordinates(
                labels.labels[s], coords, order=0, mode="nearest",
            ).reshape(new_h, new_w)
        out_lab = LabelVolume(labels=out_l, num_classes=labels.num_classes)
    return out_vol, out_lab


def crop_or_pad(img_slice: np.ndarray, target_dims: tuple[int, int],
                fill=0) -> np.ndarray:
    """Center-crop axes larger than the target, zero-pad axes smaller.

    Odd remainders put the extra pixel (cropped or padded) on the
    high-index side of the axis.
    """
    out = img_slice
    for axis, target in enumerate(target_dims):
        size = out.shape[axis]
        if size > target:
            start = (size - target) // 2
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(start, start + target)
            out = out[tuple(sl)]
        elif size < target:
            total = target - size
            low, high = total // 2, total - total // 2
            widths = [(0, 0)] * out.ndim
            widths[axis] = (low, high)
            out = np.pad(out, widths, mode="constant", constant_values=fill)
    return out


def preprocess_volume(vol: Volume, labels: Optional[LabelVolume],
                      cfg: PreprocessConfig) -> tuple[Volume, Optional[LabelVolume]]:
    """Full pipeline: normalize, resample in-plane, crop or pad to target dims."""
    cfg.validate()
    vol = percentile_normalize(vol, cfg.percentiles)
    vol, labels = resample_inplane(vol, labels, cfg)
    img = np.stack([crop_or_pad(sl, cfg.target_dims, fill=0.0)
                    for sl in vol.intensities])
    vol = Volume(intensities=img, spacing=cfg.target_resolution,
                 subject_id=vol.subject_id)
    if labels is not None:
        lab = np.stack([crop_or_pad(sl, cfg.target_dims, fill=0)
                        for sl in labels.labels])
        labels = LabelVolume(labels=lab, num_classes=labels.num_classes)
    return vol, labels


def preprocess_dataset(dataset, cfg: PreprocessConfig):
    """Apply `preprocess_volume` to every (volume, labels-or-None) pair."""
    return [preprocess_volume(vol, lab, cfg) for vol, lab in dataset]
