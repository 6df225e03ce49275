"""Training objectives.

All image losses take tensors shaped ``(..., H, W)`` and reduce to a scalar
tensor so they can be back-propagated; label maps and masks may be numpy
arrays or tensors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

DEFAULT_LAMBDA = 10.0
SEG_EPS = 1e-8


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    if like is not None:
        t = t.to(dtype=like.dtype, device=like.device)
    return t


def exclusion_mask(label_mr, label_ct) -> np.ndarray:
    """1 where a pixel takes part in the reconstruction loss, 0 on any labelled organ.

    The excluded set is the union of the non-background pixels of both
    label maps.
    """
    a = np.asarray(getattr(label_mr, "classes", label_mr))
    b = np.asarray(getattr(label_ct, "classes", label_ct))
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    return (~((a != 0) | (b != 0))).astype(np.uint8)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def masked_l1_loss(pred: torch.Tensor, target: torch.Tensor, u, mean_over_unmasked: bool = False) -> torch.Tensor:
    """Mean of ``|u*pred - u*target|`` over every pixel.

    With ``mean_over_unmasked`` the sum is divided by the number of pixels
    where ``u == 1`` instead (0 if there are none).
    """
    u = _as_tensor(u, pred)
    if not torch.all((u == 0) | (u == 1)):
        raise ValueError("exclusion mask must be binary")
    u = u.expand_as(pred)
    diff = (u * pred - u * target).abs()
    if not mean_over_unmasked:
        return diff.mean()
    n = u.sum()
    return diff.sum() / n if n > 0 else diff.sum() * 0.0


def lsgan_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return ((d_real - 1.0) ** 2).mean() + (d_fake ** 2).mean()


def lsgan_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return ((d_fake - 1.0) ** 2).mean()


def class_weights(y: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Inverse pixel frequency ``N / n_c`` per class, 0 for absent classes."""
    counts = torch.bincount(y.reshape(-1), minlength=num_classes).to(torch.float64)
    n = float(y.numel())
    w = torch.zeros(num_classes, dtype=torch.float64)
    present = counts > 0
    w[present] = n / counts[present]
    return w


def weighted_seg_ce(probs: torch.Tensor, y, eps: float = SEG_EPS) -> torch.Tensor:
    """Frequency-balanced cross-entropy of a per-pixel class distribution.

    ``probs`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``y`` holds class ids of
    shape ``(H, W)`` or ``(B, H, W)``. Each pixel's negative log-likelihood is
    scaled by ``N / n_c`` of its class in that image; images are averaged over
    pixels, then over the batch.
    """
    if probs.dim() == 3:
        probs = probs[None]
    y = _as_tensor(getattr(y, "classes", y)).to(device=probs.device, dtype=torch.long)
    if y.dim() == 2:
        y = y[None]
    if y.shape[0] != probs.shape[0] or y.shape[-2:] != probs.shape[-2:]:
        raise ValueError("labels and probabilities disagree in shape")
    sums = probs.sum(dim=1)
    if torch.any((sums - 1.0).abs() > 1e-4):
        raise ValueError("probabilities do not sum to 1 over classes")

    num_classes = probs.shape[1]
    losses = []
    for b in range(probs.shape[0]):
        w = class_weights(y[b], num_classes).to(probs.dtype)
        p_true = probs[b].gather(0, y[b][None]).squeeze(0)
        losses.append(-(w[y[b]] * torch.log(p_true + eps)).mean())
    return torch.stack(losses).mean()


def joint_objective(gan_g, l_exc, lam: float = DEFAULT_LAMBDA):
    return gan_g + lam * l_exc


@dataclass
class LossReport:
    gan_d: float = 0.0
    gan_g: float = 0.0
    l1: float = 0.0
    l_exc: float = 0.0
    seg_ce: float = 0.0
    style: float = 0.0
    content: float = 0.0
    total: float = 0.0
    lam: float = DEFAULT_LAMBDA

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossReport":
        d = dict(d)
        d["lam"] = d.pop("lambda", DEFAULT_LAMBDA)
        return cls(**d)

    @classmethod
    def mean(cls, reports: list["LossReport"]) -> "LossReport":
        if not reports:
            return cls()
        fields = reports[0].to_dict().keys()
        return cls.from_dict({k: float(np.mean([r.to_dict()[k] for r in reports])) for k in fields})
