"""Random geometric and intensity augmentations.

Geometric transforms compose in the fixed order flip -> scale/rotate/
translate -> elastic deformation, all about the image center, with
out-of-bounds regions filled with 0. The affine+flip subfamily is exactly
invertible, which the pseudo-label consistency filter relies on; elastic
fields are excluded from inversion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage


class AugmentError(ValueError):
    pass


@dataclass
class GeomTransform:
    rotation_deg: float = 0.0
    scale: float = 1.0
    translation_px: tuple[float, float] = (0.0, 0.0)  # (row, col) content shift
    flip_h: bool = False  # reverse columns
    flip_v: bool = False  # reverse rows
    elastic_field: Optional[np.ndarray] = None  # (2, H, W) displacements, pixels

    def __post_init__(self):
        if self.scale <= 0:
            raise AugmentError("scale must be positive")
        if self.elastic_field is not None:
            self.elastic_field = np.asarray(self.elastic_field, dtype=np.float64)
            if self.elastic_field.ndim != 3 or self.elastic_field.shape[0] != 2:
                raise AugmentError("elastic_field must have shape (2, H, W)")

    @property
    def is_affine(self) -> bool:
        return self.elastic_field is None


@dataclass
class IntensityTransform:
    contrast: float = 1.0
    brightness: float = 0.0

    def __post_init__(self):
        if self.contrast <= 0:
            raise AugmentError("contrast must be positive")


@dataclass
class AugmentConfig:
    """Parameter ranges for random augmentation sampling."""

    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    scale: tuple[float, float] = (0.9, 1.1)
    translation_px: tuple[float, float] = (-4.0, 4.0)
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    elastic_prob: float = 0.5
    elastic_alpha_px: float = 2.5    # peak displacement magnitude
    elastic_sigma_px: float = 6.0    # smoothing of the displacement field
    dims: Optional[tuple[int, int]] = None  # needed when elastic_prob > 0
    contrast: tuple[float, float] = (0.9, 1.1)
    brightness: tuple[float, float] = (-0.1, 0.1)

    def validate(self):
        for name in ("rotation_deg", "scale", "translation_px", "contrast", "brightness"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise AugmentError(f"{name} range must satisfy low <= high")
        if self.scale[0] <= 0 or self.contrast[0] <= 0:
            raise AugmentError("scale and contrast ranges must be positive")
        for name in ("flip_h_prob", "flip_v_prob", "elastic_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise AugmentError(f"{name} must be a probability")
        if self.elastic_prob > 0 and self.dims is None:
            raise AugmentError("dims must be set to sample elastic fields")

    def without_elastic(self) -> "AugmentConfig":
        cfg = AugmentConfig(**{**self.__dict__})
        cfg.elastic_prob = 0.0
        return cfg


def _smooth_field(noise: np.ndarray, sigma: float, alpha: float) -> np.ndarray:
    f = ndimage.gaussian_filter(noise, sigma)
    peak = np.abs(f).max()
    if peak > 0:
        f = f / peak
    return f * alpha


def sample_geom(rng: np.random.Generator, cfg: AugmentConfig) -> GeomTransform:
    """Draw a random geometric transform. The rng consumption order is fixed:
    rotation, scale, translation row, translation col, flip_h, flip_v,
    elastic coin, then (only if triggered) the two field components."""
    cfg.validate()
    rotation = float(rng.uniform(*cfg.rotation_deg))
    scale = float(rng.uniform(*cfg.scale))
    tr = float(rng.uniform(*cfg.translation_px))
    tc = float(rng.uniform(*cfg.translation_px))
    flip_h = bool(rng.random() < cfg.flip_h_prob)
    flip_v = bool(rng.random() < cfg.flip_v_prob)
    elastic = None
    if rng.random() < cfg.elastic_prob:
        H, W = cfg.dims
        dr = _smooth_field(rng.uniform(-1.0, 1.0, size=(H, W)),
                           cfg.elastic_sigma_px, cfg.elastic_alpha_px)
        dc = _smooth_field(rng.uniform(-1.0, 1.0, size=(H, W)),
                           cfg.elastic_sigma_px, cfg.elastic_alpha_px)
        elastic = np.stack([dr, dc])
    return GeomTransform(rotation_deg=rotation, scale=scale,
                         translation_px=(tr, tc), flip_h=flip_h, flip_v=flip_v,
                         elastic_field=elastic)


def sample_intensity(rng: np.random.Generator, cfg: AugmentConfig) -> IntensityTransform:
    cfg.validate()
    return IntensityTransform(contrast=float(rng.uniform(*cfg.contrast)),
                              brightness=float(rng.uniform(*cfg.brightness)))


def _affine_matrix(t: GeomTransform, dims: tuple[int, int]) -> np.ndarray:
    """Homogeneous point map: output position = M @ input position.

    Composed as translate @ rotate @ scale @ flip, all about the image
    center ((H-1)/2, (W-1)/2); a positive angle rotates content from the
    +row axis toward the +col axis.
    """
    H, W = dims
    cr, cc = (H - 1) / 2.0, (W - 1) / 2.0

    def about_center(lin: np.ndarray) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = lin
        m[:2, 2] = np.array([cr, cc]) - lin @ np.array([cr, cc])
        return m

    th = math.radians(t.rotation_deg)
    rot = about_center(np.array([[math.cos(th), -math.sin(th)],
                                 [math.sin(th), math.cos(th)]]))
    sca = about_center(np.eye(2) * t.scale)
    flip = about_center(np.diag([-1.0 if t.flip_v else 1.0,
                                 -1.0 if t.flip_h else 1.0]))
    tra = np.eye(3)
    tra[:2, 2] = t.translation_px
    return tra @ rot @ sca @ flip


def _inverse_affine_matrix(t: GeomTransform, dims: tuple[int, int]) -> np.ndarray:
    inv = GeomTransform(rotation_deg=-t.rotation_deg, scale=1.0 / t.scale,
                        translation_px=(-t.translation_px[0], -t.translation_px[1]),
                        flip_h=t.flip_h, flip_v=t.flip_v)
    # flip @ scale^-1 @ rot^-1 @ trans^-1, composed from exact component inverses
    H, W = dims
    cr, cc = (H - 1) / 2.0, (W - 1) / 2.0

    def about_center(lin):
        m = np.eye(3)
        m[:2, :2] = lin
        m[:2, 2] = np.array([cr, cc]) - lin @ np.array([cr, cc])
        return m

    th = math.radians(inv.rotation_deg)
    rot = about_center(np.array([[math.cos(th), -math.sin(th)],
                                 [math.sin(th), math.cos(th)]]))
    sca = about_center(np.eye(2) * inv.scale)
    flip = about_center(np.diag([-1.0 if t.flip_v else 1.0,
                                 -1.0 if t.flip_h else 1.0]))
    tra = np.eye(3)
    tra[:2, 2] = inv.translation_px
    return flip @ sca @ rot @ tra


def apply_geom(image_slice: np.ndarray, t: GeomTransform,
               interp: str = "bilinear", fill=0) -> np.ndarray:
    """Apply a geometric transform to one 2D slice.

    `interp` is "bilinear" for intensity images or "nearest" for label maps;
    bilinear interpolation of integer-typed label input is rejected.
    """
    if image_slice.ndim != 2:
        raise AugmentError(f"expected a 2D slice, got shape {image_slice.shape}")
    if interp not in ("bilinear", "nearest"):
        raise AugmentError(f"unknown interpolation {interp!r}")
    if interp == "bilinear" and np.issubdtype(image_slice.dtype, np.integer):
        raise AugmentError("bilinear interpolation on integer label input; use nearest")
    H, W = image_slice.shape
    if t.elastic_field is not None and t.elastic_field.shape[1:] != (H, W):
        raise AugmentError(f"elastic field dims {t.elastic_field.shape[1:]} "
                           f"do not match slice dims {(H, W)}")

    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    pr, pc = rows.ravel(), cols.ravel()
    if t.elastic_field is not None:
        pr = pr + t.elastic_field[0].ravel()
        pc = pc + t.elastic_field[1].ravel()
    minv = _inverse_affine_matrix(t, (H, W))
    src_r = minv[0, 0] * pr + minv[0, 1] * pc + minv[0, 2]
    src_c = minv[1, 0] * pr + minv[1, 1] * pc + minv[1, 2]
    order = 1 if interp == "bilinear" else 0
    out = ndimage.map_coordinates(image_slice, np.stack([src_r, src_c]),
                                  order=order, mode="constant", cval=fill)
    return out.reshape(H, W)


def invert_geom(t: GeomTransform) -> GeomTransform:
    """Exact inverse within the affine+flip family.

    Flips are involutions and commute into the rotation by negating the
    angle when the composite has an odd number of reflections; translation
    maps through the inverse linear part.
    """
    if t.elastic_field is not None:
        raise AugmentError("elastic transform is not invertible")
    odd_reflection = t.flip_h != t.flip_v
    theta_inv = t.rotation_deg if odd_reflection else -t.rotation_deg
    s_inv = 1.0 / t.scale
    th = math.radians(theta_inv)
    rot = np.array([[math.cos(th), -math.sin(th)],
                    [math.sin(th), math.cos(th)]])
    lf = np.diag([-1.0 if t.flip_v else 1.0, -1.0 if t.flip_h else 1.0])
    t_inv = -s_inv * (rot @ (lf @ np.asarray(t.translation_px, dtype=np.float64)))
    return GeomTransform(rotation_deg=theta_inv, scale=s_inv,
                         translation_px=(float(t_inv[0]), float(t_inv[1])),
                         flip_h=t.flip_h, flip_v=t.flip_v)


def apply_intensity(image_slice: np.ndarray, t: IntensityTransform) -> np.ndarray:
    """contrast * image + brightness, without clamping."""
    return image_slice * t.contrast + t.brightness
