"""Synthetic dataset generation, raw-volume I/O, and dataset splitting.

Volumes are 3D intensity arrays (slice, row, col) with in-plane spacing
metadata. Labels are integer maps with 0 = background and 1..C foreground
structures. The synthetic generator produces a cardiac-like layout per
subject: an outer ring enclosing a disk, plus adjacent elliptical blobs,
with per-subject pose/size/intensity variability so that a model trained
on a single volume does not trivially generalize.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1

LABELED = "labeled"
PSEUDO = "pseudo"


class DatasetError(ValueError):
    """Raised for malformed datasets, manifests, or invalid split requests."""


@dataclass
class Volume:
    """A 3D intensity volume with in-plane spacing metadata (mm per pixel)."""

    intensities: np.ndarray  # (slices, H, W) float32
    spacing: tuple[float, float]
    subject_id: str

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        if self.intensities.ndim != 3 or self.intensities.shape[0] < 1:
            raise DatasetError(f"volume {self.subject_id!r}: need a (slices, H, W) array "
                               f"with at least 1 slice, got shape {self.intensities.shape}")
        if not np.all(np.isfinite(self.intensities)):
            raise DatasetError(f"volume {self.subject_id!r}: non-finite intensities")
        self.spacing = (float(self.spacing[0]), float(self.spacing[1]))
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise DatasetError(f"volume {self.subject_id!r}: spacing must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.intensities.shape)


@dataclass
class LabelVolume:
    """Integer label map paired with a Volume; values in {0, ..., num_classes}."""

    labels: np.ndarray  # (slices, H, W) uint8
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise DatasetError(f"labels must be 3D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise DatasetError(f"labels must be integer-typed, got {labels.dtype}")
        self.num_classes = int(self.num_classes)
        if self.num_classes < 1:
            raise DatasetError("num_classes must be >= 1")
        if labels.min() < 0 or labels.max() > self.num_classes:
            raise DatasetError("label out of range: values must lie in "
                               f"{{0..{self.num_classes}}}, got [{labels.min()}, {labels.max()}]")
        self.labels = labels.astype(np.uint8)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass
class ShapeJitter:
    """Per-subject geometric variability of the synthetic structures."""

    center_px: float = 6.0      # max |offset| of the layout center, pixels
    radius_frac: float = 0.2    # relative radius perturbation
    aspect_frac: float = 0.15   # relative ellipse-axis anisotropy
    slice_taper: float = 0.35   # structures shrink to (1 - taper) at the first slice


@dataclass
class SyntheticSpec:
    """Configuration of the synthetic multi-structure volume generator.

    Default intensity ranges overlap between neighbouring classes on purpose:
    a single subject exposes one intensity per class, so intensity alone does
    not identify a class across subjects and shape/layout context is needed.
    """

    num_subjects: int = 70
    num_classes: int = 3
    slices_per_volume: int = 8
    dims: tuple[int, int] = (80, 80)
    noise_std: float = 0.05
    shape_jitter: ShapeJitter = field(default_factory=ShapeJitter)
    # index 0 is background, 1..C the foreground classes
    intensity_ranges: tuple[tuple[float, float], ...] = (
        (0.10, 0.30),
        (0.35, 0.75),
        (0.45, 0.85),
        (0.55, 0.95),
    )
    spacing_range: tuple[float, float] = (1.0, 1.6)

    def validate(self):
        if self.num_subjects < 1:
            raise DatasetError("num_subjects must be >= 1")
        if self.num_classes < 1:
            raise DatasetError("num_classes must be >= 1")
        if self.slices_per_volume < 1:
            raise DatasetError("slices_per_volume must be >= 1")
        if self.dims[0] < 16 or self.dims[1] < 16:
            raise DatasetError("dims too small for structured content")
        if self.noise_std < 0:
            raise DatasetError("noise_std must be >= 0")
        if len(self.intensity_ranges) < self.num_classes + 1:
            raise DatasetError(f"need {self.num_classes + 1} intensity ranges "
                               f"(background + {self.num_classes} classes), "
                               f"got {len(self.intensity_ranges)}")
        for lo, hi in self.intensity_ranges:
            if hi < lo:
                raise DatasetError("intensity range must satisfy low <= high")


@dataclass
class DatasetSplit:
    """Disjoint labeled / unlabeled / validation / test partition of a dataset."""

    labeled: list[tuple[Volume, LabelVolume]]
    unlabeled: list[Volume]
    validation: list[tuple[Volume, LabelVolume]]
    test: list[tuple[Volume, LabelVolume]]
    seed: int

    def __post_init__(self):
        groups = {
            "labeled": [v.subject_id for v, _ in self.labeled],
            "unlabeled": [v.subject_id for v in self.unlabeled],
            "validation": [v.subject_id for v, _ in self.validation],
            "test": [v.subject_id for v, _ in self.test],
        }
        seen: dict[str, str] = {}
        for name, ids in groups.items():
            for sid in ids:
                if sid in seen:
                    raise DatasetError(f"subject {sid!r} appears in both "
                                       f"{seen[sid]!r} and {name!r} splits")
                seen[sid] = name


@dataclass
class SliceBatch:
    """A batch of 2D slices with per-slice label maps and provenance flags."""

    images: np.ndarray        # (N, H, W) float32
    labels: np.ndarray        # (N, H, W) uint8; ground truth or pseudo-label
    provenance: list[str]     # LABELED or PSEUDO per slice
    subject_ids: list[str]
    slice_indices: list[int]

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def is_pseudo(self) -> np.ndarray:
        return np.array([p == PSEUDO for p in self.provenance], dtype=bool)


def _ellipse_mask(rows, cols, center, axes, angle_rad):
    """Boolean mask of a rotated ellipse on the given coordinate grids."""
    dr = rows - center[0]
    dc = cols - center[1]
    ca, sa = np.cos(angle_rad), np.sin(angle_rad)
    u = dr * ca + dc * sa
    v = -dr * sa + dc * ca
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def _generate_subject(spec: SyntheticSpec, rng: np.random.Generator,
                      subject_id: str) -> tuple[Volume, LabelVolume]:
    H, W = spec.dims
    S = spec.slices_per_volume
    C = spec.num_classes
    jit = spec.shape_jitter

    spacing = float(rng.uniform(*spec.spacing_range))
    center = np.array([H / 2.0, W / 2.0]) + rng.uniform(-jit.center_px, jit.center_px, size=2)

    base_r = 0.18 * min(H, W) * (1.0 + rng.uniform(-jit.radius_frac, jit.radius_frac))
    aspect = 1.0 + rng.uniform(-jit.aspect_frac, jit.aspect_frac)
    ring_angle = rng.uniform(0.0, np.pi)
    thickness = rng.uniform(0.30, 0.45) * base_r

    n_blobs = max(0, C - 2)
    blob_angle0 = rng.uniform(0.0, 2.0 * np.pi)
    blob_params = []
    for b in range(n_blobs):
        ang = blob_angle0 + 2.0 * np.pi * b / max(1, n_blobs)
        a_ax = base_r * rng.uniform(0.55, 0.85)
        b_ax = a_ax * (1.0 + rng.uniform(-jit.aspect_frac, jit.aspect_frac))
        dist = base_r + 0.75 * a_ax
        c_blob = center + dist * np.array([np.sin(ang), np.cos(ang)])
        blob_params.append((c_blob, (a_ax, b_ax), rng.uniform(0.0, np.pi)))

    # one intensity value per class per volume (constant within the volume)
    values = np.array([rng.uniform(lo, hi) for lo, hi in
                       spec.intensity_ranges[: C + 1]], dtype=np.float64)

    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    # structures shrink toward the first slice ("apex" profile)
    if S > 1:
        taper = np.linspace(1.0 - jit.slice_taper, 1.0, S)
    else:
        taper = np.ones(1)

    labels = np.zeros((S, H, W), dtype=np.uint8)
    for s in range(S):
        k = taper[s]
        lab = np.zeros((H, W), dtype=np.uint8)
        # blobs first; nested ring/disk drawn on top so overlaps stay clean
        for b, (c_blob, (a_ax, b_ax), ang) in enumerate(blob_params):
            m = _ellipse_mask(rows, cols, c_blob, (max(1.5, a_ax * k), max(1.5, b_ax * k)), ang)
            lab[m] = b + 1
        if C >= 2:
            r_out = max(3.0, base_r * k)
            r_in = max(1.5, (base_r - thickness) * k)
            outer = _ellipse_mask(rows, cols, center, (r_out, r_out * aspect), ring_angle)
            inner = _ellipse_mask(rows, cols, center, (r_in, r_in * aspect), ring_angle)
            lab[outer] = C - 1   # ring
            lab[inner] = C       # enclosed disk
        else:
            disk = _ellipse_mask(rows, cols, center, (max(2.0, base_r * k),
                                                      max(2.0, base_r * k * aspect)), ring_angle)
            lab[disk] = 1
        labels[s] = lab

    intensities = values[labels]
    if spec.noise_std > 0:
        intensities = intensities + rng.normal(0.0, spec.noise_std, size=intensities.shape)

    vol = Volume(intensities=intensities.astype(np.float32),
                 spacing=(spacing, spacing), subject_id=subject_id)
    return vol, LabelVolume(labels=labels, num_classes=C)


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int
                               ) -> list[tuple[Volume, LabelVolume]]:
    """Generate `spec.num_subjects` synthetic volumes, deterministic given seed."""
    spec.validate()
    root = np.random.SeedSequence(seed)
    children = root.spawn(spec.num_subjects)
    dataset = []
    for idx, child in enumerate(children):
        rng = np.random.default_rng(child)
        dataset.append(_generate_subject(spec, rng, subject_id=f"synth_{idx:03d}"))
    return dataset


# ---------------------------------------------------------------------------
# Dataset directory format: manifest.json + raw little-endian arrays
# ---------------------------------------------------------------------------

def save_dataset(dataset: Iterable[tuple[Volume, Optional[LabelVolume]]],
                 out_dir: str | Path) -> Path:
    """Write volumes (and labels when present) as raw arrays plus a manifest.

    Images are stored as little-endian float32, labels as uint8, both in
    slice-major (slice, row, column) order. Round trips are bit-exact.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = []
    for vol, lab in dataset:
        img_name = f"{vol.subject_id}.img.raw"
        (out_dir / img_name).write_bytes(
            np.ascontiguousarray(vol.intensities, dtype="<f4").tobytes())
        entry = {
            "subject_id": vol.subject_id,
            "dims": list(vol.dims),
            "spacing": [vol.spacing[0], vol.spacing[1]],
            "image": img_name,
            "labels": None,
            "num_classes": None,
        }
        if lab is not None:
            if lab.dims != vol.dims:
                raise DatasetError(f"subject {vol.subject_id!r}: label dims {lab.dims} "
                                   f"do not match image dims {vol.dims}")
            lbl_name = f"{vol.subject_id}.lbl.raw"
            (out_dir / lbl_name).write_bytes(
                np.ascontiguousarray(lab.labels, dtype=np.uint8).tobytes())
            entry["labels"] = lbl_name
            entry["num_classes"] = lab.num_classes
        subjects.append(entry)
    manifest = {"format_version": FORMAT_VERSION, "subjects": subjects}
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir / MANIFEST_NAME


def load_dataset(manifest_path: str | Path
                 ) -> list[tuple[Volume, Optional[LabelVolume]]]:
    """Load a dataset directory; validates dims and label ranges."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version: "
                           f"{manifest.get('format_version')!r}")
    base = manifest_path.parent
    dataset: list[tuple[Volume, Optional[LabelVolume]]] = []
    for entry in manifest["subjects"]:
        dims = tuple(entry["dims"])
        n = int(np.prod(dims))
        img_path = base / entry["image"]
        if not img_path.exists():
            raise DatasetError(f"missing image file: {img_path}")
        raw = np.frombuffer(img_path.read_bytes(), dtype="<f4")
        if raw.size != n:
            raise DatasetError(f"subject {entry['subject_id']!r}: image size {raw.size} "
                               f"does not match dims {dims}")
        vol = Volume(intensities=raw.reshape(dims).copy(),
                     spacing=tuple(entry["spacing"]),
                     subject_id=entry["subject_id"])
        lab = None
        if entry.get("labels"):
            lbl_path = base / entry["labels"]
            if not lbl_path.exists():
                raise DatasetError(f"missing label file: {lbl_path}")
            raw_l = np.frombuffer(lbl_path.read_bytes(), dtype=np.uint8)
            if raw_l.size != n:
                raise DatasetError(f"subject {entry['subject_id']!r}: label size "
                                   f"{raw_l.size} does not match dims {dims}")
            lab = LabelVolume(labels=raw_l.reshape(dims).copy(),
                              num_classes=int(entry["num_classes"]))
        dataset.append((vol, lab))
    return dataset


# ---------------------------------------------------------------------------
# Splitting and slice sampling
# ---------------------------------------------------------------------------

def make_split(dataset: Sequence[tuple[Volume, LabelVolume]],
               n_labeled: int, n_val: int, n_test: int, seed: int,
               pool_size: Optional[int] = None,
               assignment_seed: Optional[int] = None,
               ) -> tuple[DatasetSplit, dict[str, LabelVolume]]:
    """Partition a labeled dataset into labeled/unlabeled/validation/test sets.

    Unlabeled volumes have their labels stripped; the stripped ground truth
    is returned separately as a diagnostics-only mapping and must never be
    given to a trainer's optimization path.

    `pool_size` reserves a candidate pool (>= n_labeled + n_val) from which
    the labeled and validation volumes are drawn with `assignment_seed`;
    test and unlabeled membership then depend only on `seed`, so repeated
    runs can resample labeled/validation volumes while keeping the test and
    unlabeled sets fixed. Pool volumes left unassigned are excluded from the
    split. By default the pool is exactly n_labeled + n_val and nothing is
    excluded.
    """
    if n_labeled < 0 or n_val < 0 or n_test < 0:
        raise DatasetError("split sizes must be non-negative")
    if pool_size is None:
        pool_size = n_labeled + n_val
    if pool_size < n_labeled + n_val:
        raise DatasetError("pool_size must be >= n_labeled + n_val")
    if pool_size + n_test > len(dataset):
        raise DatasetError(f"insufficient volumes: need {pool_size + n_test}, "
                           f"have {len(dataset)}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    test_idx = order[:n_test]
    pool_idx = order[n_test:n_test + pool_size]
    unlabeled_idx = order[n_test + pool_size:]

    arng = np.random.default_rng(seed if assignment_seed is None else assignment_seed)
    pool_perm = arng.permutation(pool_idx)
    labeled_idx = pool_perm[:n_labeled]
    val_idx = pool_perm[n_labeled:n_labeled + n_val]

    hidden = {dataset[i][0].subject_id: dataset[i][1] for i in unlabeled_idx}
    split = DatasetSplit(
        labeled=[dataset[i] for i in labeled_idx],
        unlabeled=[dataset[i][0] for i in unlabeled_idx],
        validation=[dataset[i] for i in val_idx],
        test=[dataset[i] for i in test_idx],
        seed=seed,
    )
    return split, hidden


def _slice_pool(volumes: Sequence[Volume]) -> list[tuple[int, int]]:
    pool = []
    for vi, vol in enumerate(volumes):
        for s in range(vol.dims[0]):
            pool.append((vi, s))
    return pool


def sample_slice_batch(split: DatasetSplit, pseudo_store,
                       n_labeled_slices: int, n_unlabeled_slices: int,
                       rng: np.random.Generator) -> SliceBatch:
    """Sample 2D slices uniformly over (volume, slice) pairs with replacement.

    Labeled slices carry ground truth; unlabeled slices carry the current
    pseudo-labels of `pseudo_store` and are restricted to its eligible
    (consistency-retained) subjects.
    """
    if n_labeled_slices < 0 or n_unlabeled_slices < 0:
        raise DatasetError("requested slice counts must be >= 0")
    if n_labeled_slices + n_unlabeled_slices == 0:
        raise DatasetError("empty batch requested")

    images, labels, provenance, subject_ids, slice_indices = [], [], [], [], []

    if n_labeled_slices > 0:
        if not split.labeled:
            raise DatasetError("labeled slice pool is empty")
        vols = [v for v, _ in split.labeled]
        pool = _slice_pool(vols)
        picks = rng.integers(0, len(pool), size=n_labeled_slices)
        for p in picks:
            vi, s = pool[p]
            vol, lab = split.labeled[vi]
            images.append(vol.intensities[s])
            labels.append(lab.labels[s])
            provenance.append(LABELED)
            subject_ids.append(vol.subject_id)
            slice_indices.append(s)

    if n_unlabeled_slices > 0:
        if pseudo_store is None:
            raise DatasetError("unlabeled slices requested but no pseudo-label store given")
        eligible = set(pseudo_store.eligible_subjects())
        vols = [v for v in split.unlabeled if v.subject_id in eligible]
        if not vols:
            raise DatasetError("unlabeled slice pool is empty "
                               "(no eligible pseudo-labeled subjects)")
        pool = _slice_pool(vols)
        picks = rng.integers(0, len(pool), size=n_unlabeled_slices)
        for p in picks:
            vi, s = pool[p]
            vol = vols[vi]
            pl = pseudo_store.labels[vol.subject_id]
            images.append(vol.intensities[s])
            labels.append(pl.labels[s])
            provenance.append(PSEUDO)
            subject_ids.append(vol.subject_id)
            slice_indices.append(s)

    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DatasetError(f"cannot batch slices of differing shapes: {sorted(shapes)}")

    return SliceBatch(
        images=np.stack(images).astype(np.float32),
        labels=np.stack(labels).astype(np.uint8),
        provenance=provenance,
        subject_ids=subject_ids,
        slice_indices=slice_indices,
    )
