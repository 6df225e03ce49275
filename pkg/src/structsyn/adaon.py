"""Organ-wise adaptive instance normalization and the local/fusion streams.

Each inconsistent organ (bladder ``B``, rectum ``R``, rectal gas ``G``) gets
its own decoder trained to render masked MR content with that organ's CT
style. Styles are per-layer first and second moments of a frozen random
encoder, averaged over masked CT exemplars.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .networks import StyleDecoder, StyleEncoder
from .phantom import BLADDER, GAS, RECTUM, ImageSlice, normalize_for_training
from .seeding import numpy_rng

log = logging.getLogger(__name__)

ORGANS = ("B", "R", "G")
ORGAN_CLASS = {"B": BLADDER, "R": RECTUM, "G": GAS}
STAT_EPS = 1e-6


class EmptyMaskError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


def _safe_sqrt(var: torch.Tensor) -> torch.Tensor:
    # d sqrt(x)/dx is infinite at 0; clamp keeps gradients finite for constant channels
    return torch.where(var > 0, var.clamp_min(1e-30).sqrt(), torch.zeros_like(var))


def channel_stats(feats: torch.Tensor):
    """Per-channel mean and population std over the spatial axes."""
    mean = feats.mean(dim=(-2, -1), keepdim=True)
    std = _safe_sqrt(((feats - mean) ** 2).mean(dim=(-2, -1), keepdim=True))
    return mean, std


def mask_to(mask, size) -> torch.Tensor:
    """Bring a pixel mask to feature resolution by nearest-neighbour sampling."""
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    m = m.to(torch.float64)
    while m.dim() < 4:
        m = m[None]
    if tuple(m.shape[-2:]) != tuple(size):
        m = F.interpolate(m, size=tuple(size), mode="nearest")
    return (m > 0.5)


def masked_statistics(feats: torch.Tensor, mask, allow_degenerate: bool = False):
    """Per-channel mean and std of ``feats`` restricted to ``mask``.

    ``feats`` is ``(C, h, w)`` or ``(1, C, h, w)``. Returned tensors are shaped
    ``(..., C, 1, 1)`` to broadcast against ``feats``. Needs at least two mask
    pixels at feature resolution unless ``allow_degenerate``.
    """
    m = mask_to(mask, feats.shape[-2:])
    m = m.reshape(m.shape[-2:]).to(feats.dtype)
    n = m.sum()
    if n == 0:
        raise EmptyMaskError("mask has no positive pixels at feature resolution")
    if n < 2 and not allow_degenerate:
        raise DegenerateMaskError("mask has a single positive pixel at feature resolution")
    mean = (feats * m).sum(dim=(-2, -1), keepdim=True) / n
    var = (((feats - mean) ** 2) * m).sum(dim=(-2, -1), keepdim=True) / n
    return mean, _safe_sqrt(var)


def adain_with_stats(content, c_mean, c_std, s_mean, s_std, eps: float = STAT_EPS):
    return s_std * (content - c_mean) / c_std.clamp_min(eps) + s_mean


def adain(content: torch.Tensor, style: torch.Tensor, eps: float = STAT_EPS, with_flags: bool = False):
    """Re-normalize each content channel to the style channel's mean and std.

    With ``with_flags`` also return a boolean per channel marking content
    channels whose std fell below ``eps`` and was clamped.
    """
    if content.shape[-3] != style.shape[-3]:
        raise ValueError("content and style must have the same channel count")
    c_mean, c_std = channel_stats(content)
    s_mean, s_std = channel_stats(style)
    out = adain_with_stats(content, c_mean, c_std, s_mean, s_std, eps)
    if with_flags:
        return out, (c_std < eps).reshape(c_std.shape[:-2])
    return out


@dataclass
class StyleStats:
    """Per-layer (mean, std) pairs, each shaped ``(C, 1, 1)``."""

    means: list[torch.Tensor]
    stds: list[torch.Tensor]
    n_exemplars: int = 1


@dataclass
class OrganStyleBank:
    styles: dict[str, StyleStats] = field(default_factory=dict)

    def __getitem__(self, organ: str) -> StyleStats:
        return self.styles[organ]

    def __contains__(self, organ: str) -> bool:
        return organ in self.styles

    def state(self) -> dict:
        return {o: {"means": [m.clone() for m in s.means], "stds": [d.clone() for d in s.stds],
                    "n": s.n_exemplars} for o, s in self.styles.items()}

    @classmethod
    def from_state(cls, state: dict) -> "OrganStyleBank":
        return cls({o: StyleStats(list(v["means"]), list(v["stds"]), int(v["n"])) for o, v in state.items()})


def _squeeze(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[-3], 1, 1)


def style_statistics(encoder: StyleEncoder, image: torch.Tensor, mask) -> StyleStats:
    """Masked per-layer statistics of ``encoder(image * mask)``; ``image`` is ``(1, H, W)``."""
    m = torch.as_tensor(np.asarray(mask), dtype=image.dtype)
    feats = encoder((image * m)[None])
    means, stds = [], []
    for f in feats:
        mu, sd = masked_statistics(f[0], mask, allow_degenerate=True)
        means.append(_squeeze(mu))
        stds.append(_squeeze(sd))
    return StyleStats(means, stds)


def build_style_bank(encoder: StyleEncoder, exemplars: dict[str, list]) -> OrganStyleBank:
    """Average masked CT statistics per organ.

    ``exemplars[organ]`` is a list of ``(ct_norm, mask)`` pairs with
    ``ct_norm`` shaped ``(1, H, W)``.
    """
    bank = OrganStyleBank()
    with torch.no_grad():
        for organ, items in exemplars.items():
            items = [(img, m) for img, m in items if np.asarray(m).sum() > 0]
            if not items:
                raise ValueError(f"no style exemplar for organ {organ}")
            stats = [style_statistics(encoder, img, m) for img, m in items]
            n_layers = len(stats[0].means)
            means = [torch.stack([s.means[i] for s in stats]).mean(0) for i in range(n_layers)]
            stds = [torch.stack([s.stds[i] for s in stats]).mean(0).clamp_min(STAT_EPS) for i in range(n_layers)]
            bank.styles[organ] = StyleStats(means, stds, len(stats))
    return bank


def stylize(encoder, decoder, content: torch.Tensor, mask, style: StyleStats):
    """Render masked content with ``style``; returns ``(output, t, content_features)``.

    ``content`` is ``(1, H, W)``; ``output`` is ``(1, H, W)`` and zero outside
    ``mask``.
    """
    m = torch.as_tensor(np.asarray(mask), dtype=content.dtype)
    feats = encoder((content * m)[None])
    c_mean, c_std = masked_statistics(feats[-1][0], mask, allow_degenerate=True)
    t = adain_with_stats(feats[-1][0], c_mean, c_std, style.means[-1], style.stds[-1])
    out = decoder(t[None])[0] * m
    return out, t, feats


def content_loss(encoder, output: torch.Tensor, t: torch.Tensor, mask) -> torch.Tensor:
    feats = encoder(output[None])[-1][0]
    m = mask_to(mask, feats.shape[-2:]).reshape(feats.shape[-2:]).to(feats.dtype)
    return (((feats - t) ** 2) * m).sum() / (m.sum() * feats.shape[0])


def style_loss(encoder, output: torch.Tensor, mask, style: StyleStats) -> torch.Tensor:
    """Sum over encoder layers of squared mean and std mismatches on the mask."""
    total = output.new_zeros(())
    for i, f in enumerate(encoder(output[None])):
        mu, sd = masked_statistics(f[0], mask, allow_degenerate=True)
        total = total + ((_squeeze(mu) - style.means[i]) ** 2).sum() + ((_squeeze(sd) - style.stds[i]) ** 2).sum()
    return total


@dataclass
class AdaONConfig:
    steps: int = 300
    lr: float = 1e-3
    style_weight: float = 1.0
    seed: int = 0


def train_adaon(organ: str, content_exemplars: list, style_exemplars: list, config: AdaONConfig,
                encoder: StyleEncoder, decoder: StyleDecoder | None = None,
                style: StyleStats | None = None):
    """Fit one organ decoder; returns ``(decoder, style, curve)``.

    ``content_exemplars`` are ``(mr_norm, mask)`` and ``style_exemplars``
    ``(ct_norm, mask)`` pairs. ``curve`` holds per-step content/style losses.
    A non-finite loss stops training and restores the last finite state.
    """
    if organ not in ORGANS:
        raise ValueError(f"unknown organ {organ!r}")
    content_exemplars = [(c, m) for c, m in content_exemplars if np.asarray(m).sum() > 0]
    if not content_exemplars or not style_exemplars:
        raise ValueError(f"organ {organ}: need at least one content and one style exemplar")
    if style is None:
        style = build_style_bank(encoder, {organ: style_exemplars})[organ]
    if decoder is None:
        from .networks import init_params
        decoder = init_params(StyleDecoder(), seed=config.seed)

    rng = numpy_rng(config.seed, ORGANS.index(organ), 0xADA)
    opt = torch.optim.Adam(decoder.parameters(), lr=config.lr)
    curve = []
    good = {k: v.clone() for k, v in decoder.state_dict().items()}
    for step in range(config.steps):
        content, mask = content_exemplars[int(rng.integers(len(content_exemplars)))]
        with torch.no_grad():
            m = torch.as_tensor(np.asarray(mask), dtype=content.dtype)
            feats = encoder((content * m)[None])
            c_mean, c_std = masked_statistics(feats[-1][0], mask, allow_degenerate=True)
            t = adain_with_stats(feats[-1][0], c_mean, c_std, style.means[-1], style.stds[-1])
        out = decoder(t[None])[0] * m
        lc = content_loss(encoder, out, t, mask)
        ls = style_loss(encoder, out, mask, style)
        loss = lc + config.style_weight * ls
        if not math.isfinite(loss.item()):
            log.warning("organ %s: non-finite loss at step %d, restoring last good state", organ, step)
            decoder.load_state_dict(good)
            break
        good = {k: v.detach().clone() for k, v in decoder.state_dict().items()}
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append({"step": step, "content": lc.item(), "style": ls.item()})
    return decoder, style, curve


@dataclass
class LocalStreamOutput:
    per_organ: dict[str, torch.Tensor]
    combined: torch.Tensor
    masks: dict[str, np.ndarray]

    @property
    def union(self) -> np.ndarray:
        u = np.zeros(self.combined.shape[-2:], dtype=bool)
        for m in self.masks.values():
            u |= np.asarray(m, dtype=bool)
        return u


def local_stream(mr, organ_masks: dict, bank: OrganStyleBank | None, encoder=None, decoders=None,
                 passthrough: bool = False) -> LocalStreamOutput:
    """Restyle each segmented organ and add the per-organ results.

    ``mr`` is an :class:`ImageSlice` or a normalized ``(1, H, W)`` tensor.
    With ``passthrough`` the organ regions keep their normalized MR values.
    """
    x = normalize_for_training(mr) if isinstance(mr, ImageSlice) else mr
    masks = {o: np.asarray(m, dtype=bool) for o, m in organ_masks.items()}
    names = list(masks)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if np.any(masks[a] & masks[b]):
                raise ValueError(f"organ masks {a} and {b} overlap")

    combined = torch.zeros_like(x)
    per_organ = {}
    for organ, m in masks.items():
        if not m.any():
            continue
        mt = torch.as_tensor(m, dtype=x.dtype)
        if passthrough:
            out = x * mt
        else:
            out, _, _ = stylize(encoder, decoders[organ], x, m, bank[organ])
        per_organ[organ] = out
        combined = combined + out
    return LocalStreamOutput(per_organ, combined, masks)


def fuse(global_out: torch.Tensor, local: LocalStreamOutput, organ_union_mask=None) -> torch.Tensor:
    """Global output outside the organ union, local output inside it."""
    union = local.union if organ_union_mask is None else np.asarray(organ_union_mask, dtype=bool)
    if global_out.shape[-2:] != local.combined.shape[-2:] or union.shape != tuple(global_out.shape[-2:]):
        raise ValueError("global output, local output and mask must share spatial dims")
    keep = torch.as_tensor(~union, dtype=global_out.dtype)
    return global_out * keep + local.combined.to(global_out.dtype)
