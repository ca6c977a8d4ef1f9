"""Segmentation and pixel-wise contrastive losses.

The contrastive loss operates on per-pixel feature maps z of shape (D, H, W)
produced by the contrastive head. For an anchor image x and a partner image
x', each sampled anchor pixel of foreground class c is pulled toward the
partner's class-c mean representation and pushed from the partner's other
present foreground class means, through a temperature-scaled softmax over
cosine similarities:

    L(i, c) = -log( exp(sim(z_i, m_c)/tau)
                    / sum_{k present} exp(sim(z_i, m_k)/tau) )

The pair loss averages L(i, c) over sampled anchor pixels per class, then
over the classes present in both images. Class means use ALL pixels of a
class; subsampling applies to anchors only. Background never contributes,
neither as anchor nor as negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch


class LossError(ValueError):
    pass


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    samples_per_class: int = 3      # anchor pixels drawn per class per image
    mode: str = "intra"             # "intra" or "inter"
    pooled_means: bool = False      # inter variant: class means pooled over the batch
    lambda_cont: float = 0.1

    def validate(self):
        if self.temperature <= 0:
            raise LossError("temperature must be positive")
        if self.samples_per_class < 1:
            raise LossError("samples_per_class must be >= 1")
        if self.mode not in ("intra", "inter"):
            raise LossError(f"mode must be 'intra' or 'inter', got {self.mode!r}")


@dataclass
class ClassMeanSet:
    """Per-class mean representations of one image; absent classes flagged."""

    means: torch.Tensor    # (C, D); rows of absent classes are zeros
    present: torch.Tensor  # (C,) bool
    num_classes: int

    def mean_for(self, c: int) -> torch.Tensor:
        if not self.present[c - 1]:
            raise LossError(f"class {c} absent from this image")
        return self.means[c - 1]


@dataclass
class ZeroNormGuard:
    """Optional epsilon guard for zero-norm vectors inside cosine terms.

    Disabled by default: a zero-norm anchor or mean raises. The trainer
    enables the guard so a pathological iteration clamps norms to 1e-12
    instead of aborting, and logs the hit count.
    """

    enabled: bool = False
    hits: int = 0


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two D-vectors; zero-norm input is an error."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    na, nb = a.norm(), b.norm()
    if na.item() == 0.0 or nb.item() == 0.0:
        raise LossError("zero-norm vector in cosine similarity")
    return (a * b).sum() / (na * nb)


def _as_label_tensor(label_map, device) -> torch.Tensor:
    if isinstance(label_map, torch.Tensor):
        return label_map.to(device=device, dtype=torch.long)
    return torch.as_tensor(np.asarray(label_map).astype(np.int64), device=device)


def class_means(z: torch.Tensor, label_map, num_classes: int) -> ClassMeanSet:
    """Mean feature vector per foreground class over ALL pixels of the class."""
    if z.ndim != 3:
        raise LossError(f"expected feature map (D, H, W), got shape {tuple(z.shape)}")
    lm = _as_label_tensor(label_map, z.device)
    if lm.shape != z.shape[1:]:
        raise LossError(f"label map shape {tuple(lm.shape)} does not match "
                        f"feature map spatial dims {tuple(z.shape[1:])}")
    D = z.shape[0]
    means, present = [], []
    for c in range(1, num_classes + 1):
        mask = lm == c
        if bool(mask.any()):
            means.append(z[:, mask].mean(dim=1))
            present.append(True)
        else:
            means.append(torch.zeros(D, dtype=z.dtype, device=z.device))
            present.append(False)
    return ClassMeanSet(means=torch.stack(means),
                        present=torch.tensor(present, device=z.device),
                        num_classes=num_classes)


def pooled_class_means(z_batch: torch.Tensor, label_batch, num_classes: int
                       ) -> ClassMeanSet:
    """Class means over all pixels of the whole batch (pooled inter variant)."""
    B, D = z_batch.shape[0], z_batch.shape[1]
    lm = _as_label_tensor(label_batch, z_batch.device)
    means, present = [], []
    for c in range(1, num_classes + 1):
        mask = lm == c
        if bool(mask.any()):
            vecs = z_batch.permute(1, 0, 2, 3)[:, mask]  # (D, n)
            means.append(vecs.mean(dim=1))
            present.append(True)
        else:
            means.append(torch.zeros(D, dtype=z_batch.dtype, device=z_batch.device))
            present.append(False)
    return ClassMeanSet(means=torch.stack(means),
                        present=torch.tensor(present, device=z_batch.device),
                        num_classes=num_classes)


def sample_coords(label_map, c: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly sample up to n pixel coordinates of class c, without replacement.

    Returns an (k, 2) int array of (row, col); empty when the class is absent.
    """
    if n < 1:
        raise LossError("n must be >= 1")
    lm = np.asarray(label_map.cpu() if isinstance(label_map, torch.Tensor) else label_map)
    idx = np.argwhere(lm == c)
    if idx.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    take = min(n, idx.shape[0])
    sel = rng.choice(idx.shape[0], size=take, replace=False)
    return idx[sel]


def _anchor_logits(anchors: torch.Tensor, means: torch.Tensor, tau: float,
                   guard: Optional[ZeroNormGuard]) -> torch.Tensor:
    """Cosine similarities / tau between anchors (k, D) and means (K, D)."""
    na = anchors.norm(dim=1)
    nm = means.norm(dim=1)
    if bool((na == 0).any()) or bool((nm == 0).any()):
        if guard is not None and guard.enabled:
            guard.hits += int((na == 0).sum() + (nm == 0).sum())
            na = na.clamp_min(1e-12)
            nm = nm.clamp_min(1e-12)
        else:
            raise LossError("zero-norm vector in cosine similarity")
    sims = (anchors @ means.T) / (na[:, None] * nm[None, :])
    return sims / tau


def contrastive_pixel_term(z_i: torch.Tensor, means: ClassMeanSet, c: int,
                           tau: float, guard: Optional[ZeroNormGuard] = None
                           ) -> torch.Tensor:
    """One anchor pixel's loss against a partner's class means (non-negative).

    Exactly 0 when class c is the only present class (empty negative set).
    """
    if not bool(means.present[c - 1]):
        raise LossError(f"class {c} absent from partner means")
    present_ids = [k for k in range(1, means.num_classes + 1) if means.present[k - 1]]
    m = means.means[[k - 1 for k in present_ids]]
    logits = _anchor_logits(z_i[None, :], m, tau, guard)[0]
    pos = present_ids.index(c)
    return torch.logsumexp(logits, dim=0) - logits[pos]


def contrastive_pair_loss(z_x: torch.Tensor, labels_x, means_xprime: ClassMeanSet,
                          cfg: ContrastiveConfig,
                          rng: Optional[np.random.Generator] = None,
                          coords: Optional[dict[int, np.ndarray]] = None,
                          guard: Optional[ZeroNormGuard] = None,
                          ) -> tuple[torch.Tensor, int]:
    """Total pair loss between anchor image x and partner means from x'.

    Averages anchor-pixel terms per class, then over the classes present in
    both images. Anchor coordinates are subsampled per class (cfg.samples_per_class)
    unless explicit `coords` are given. Returns (loss, num_shared_classes);
    the loss is 0 when no foreground class is shared.
    """
    cfg.validate()
    lm = np.asarray(labels_x.cpu() if isinstance(labels_x, torch.Tensor) else labels_x)
    shared = [c for c in range(1, means_xprime.num_classes + 1)
              if bool(means_xprime.present[c - 1]) and bool((lm == c).any())]
    if not shared:
        return torch.zeros((), dtype=z_x.dtype, device=z_x.device), 0

    present_ids = [k for k in range(1, means_xprime.num_classes + 1)
                   if means_xprime.present[k - 1]]
    m = means_xprime.means[[k - 1 for k in present_ids]]
    per_class = []
    for c in shared:
        if coords is not None:
            coord = np.asarray(coords[c])
        else:
            if rng is None:
                raise LossError("need rng to subsample anchor coordinates")
            coord = sample_coords(lm, c, cfg.samples_per_class, rng)
        anchors = z_x[:, coord[:, 0], coord[:, 1]].T  # (k, D)
        logits = _anchor_logits(anchors, m, cfg.temperature, guard)
        pos = present_ids.index(c)
        terms = torch.logsumexp(logits, dim=1) - logits[:, pos]
        per_class.append(terms.mean())
    return torch.stack(per_class).mean(), len(shared)


def contrastive_batch_loss(z_batch: torch.Tensor, label_batch,
                           cfg: ContrastiveConfig, rng: np.random.Generator,
                           num_classes: Optional[int] = None,
                           guard: Optional[ZeroNormGuard] = None,
                           ) -> tuple[torch.Tensor, dict]:
    """Batch contrastive loss with intra- or inter-image matching.

    intra: every image is paired with itself. inter: each image's partner is
    drawn uniformly with replacement from the batch (self allowed) in a
    single rng call before any coordinate sampling, then anchors are
    subsampled per image in batch order with classes ascending; this fixed
    consumption order is what makes runs replayable. Returns the mean pair
    loss over anchor images with at least one shared class (0 if none).
    """
    cfg.validate()
    if z_batch.ndim != 4:
        raise LossError(f"expected (B, D, H, W) features, got {tuple(z_batch.shape)}")
    B = z_batch.shape[0]
    if B == 0:
        raise LossError("empty batch")
    labels_np = np.asarray(label_batch.cpu() if isinstance(label_batch, torch.Tensor)
                           else label_batch)
    if num_classes is None:
        num_classes = int(labels_np.max())
    if num_classes < 1:
        # background-only batch: nothing to contrast
        return torch.zeros((), dtype=z_batch.dtype, device=z_batch.device), \
            {"anchors_used": 0, "per_image": [None] * B}

    pooled = cfg.mode == "inter" and cfg.pooled_means
    if cfg.mode == "inter" and not pooled:
        partners = rng.integers(0, B, size=B)
    else:
        partners = np.arange(B)

    means_cache: dict[int, ClassMeanSet] = {}

    def means_of(idx: int) -> ClassMeanSet:
        if idx not in means_cache:
            means_cache[idx] = class_means(z_batch[idx], labels_np[idx], num_classes)
        return means_cache[idx]

    pooled_means = pooled_class_means(z_batch, labels_np, num_classes) if pooled else None

    losses, per_image = [], []
    for b in range(B):
        means = pooled_means if pooled else means_of(int(partners[b]))
        loss_b, n_shared = contrastive_pair_loss(
            z_batch[b], labels_np[b], means, cfg, rng=rng, guard=guard)
        if n_shared > 0:
            losses.append(loss_b)
            per_image.append(loss_b)
        else:
            per_image.append(None)
    if losses:
        total = torch.stack(losses).mean()
    else:
        total = torch.zeros((), dtype=z_batch.dtype, device=z_batch.device)
    return total, {"anchors_used": len(losses), "per_image": per_image}


def dice_loss(prob_maps: torch.Tensor, label_maps, eps: float = 1e-6) -> torch.Tensor:
    """Soft Dice loss over foreground classes, squared-denominator variant.

    Per foreground class c: d_c = (2*sum(p_c*g_c) + eps) /
    (sum(p_c^2) + sum(g_c^2) + eps), with sums pooled over the whole batch.
    Returns 1 - mean(d_c) over the foreground classes present in the ground
    truth (0 when the batch contains no foreground at all).
    """
    if prob_maps.ndim != 4:
        raise LossError(f"expected (B, C+1, H, W) probabilities, got "
                        f"{tuple(prob_maps.shape)}")
    lm = _as_label_tensor(label_maps, prob_maps.device)
    B, C1, H, W = prob_maps.shape
    if lm.shape != (B, H, W):
        raise LossError(f"label maps shape {tuple(lm.shape)} does not match "
                        f"probabilities {(B, H, W)}")
    if int(lm.max()) >= C1:
        raise LossError("label value out of range for probability channels")
    one_hot = torch.nn.functional.one_hot(lm, C1).permute(0, 3, 1, 2).to(prob_maps.dtype)
    dims = (0, 2, 3)
    inter = (prob_maps * one_hot).sum(dim=dims)
    denom = (prob_maps ** 2).sum(dim=dims) + (one_hot ** 2).sum(dim=dims)
    d = (2.0 * inter + eps) / (denom + eps)
    present = one_hot.sum(dim=dims)[1:] > 0
    if not bool(present.any()):
        return torch.zeros((), dtype=prob_maps.dtype, device=prob_maps.device)
    return 1.0 - d[1:][present].mean()


def total_loss(seg_probs: Optional[torch.Tensor], seg_labels,
               cont_features: Optional[torch.Tensor], cont_labels,
               cfg: ContrastiveConfig, rng: np.random.Generator,
               num_classes: Optional[int] = None,
               guard: Optional[ZeroNormGuard] = None,
               ) -> tuple[torch.Tensor, dict]:
    """Joint objective: dice on labeled slices + lambda * contrastive loss.

    Returns (total, components) where components holds the seg and cont
    tensors separately for logging. The contrastive term is skipped when
    lambda_cont is 0 or no contrastive features are given.
    """
    if seg_probs is None or seg_probs.shape[0] == 0:
        raise LossError("no labeled slices in batch: segmentation loss undefined")
    l_seg = dice_loss(seg_probs, seg_labels)
    info = {"anchors_used": 0}
    if cont_features is not None and cfg.lambda_cont != 0.0:
        l_cont, cinfo = contrastive_batch_loss(
            cont_features, cont_labels, cfg, rng,
            num_classes=num_classes, guard=guard)
        info.update(cinfo)
    else:
        l_cont = torch.zeros((), dtype=l_seg.dtype, device=l_seg.device)
    total = l_seg + cfg.lambda_cont * l_cont
    components = {"seg": l_seg, "cont": l_cont, **info}
    return total, components
