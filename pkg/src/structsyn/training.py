"""End-to-end training of the two-stream translator and its ablations.

Variants:

``full``       segmenter + organ restyling, masked reconstruction loss
``cgan``       generator/discriminator only, plain L1 reconstruction
``wo_seg``     no local stream; masked L1 plus whole-image style/content losses
``wo_adaon``   segmenter present, organ regions pass MR intensities through
``wo_lexc``    like ``full`` but with plain L1 reconstruction
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import adaon as ada
from .losses import (LossReport, exclusion_mask, l1_loss, lsgan_d_loss, lsgan_g_loss, masked_l1_loss,
                     weighted_seg_ce)
from .networks import Discriminator, Generator, Segmenter, StyleDecoder, StyleEncoder, init_encoder, init_params
from .phantom import (ImageSlice, LabelMap, Modality, augment_flip, denormalize_ct,
                      normalize_for_training)
from .seeding import derive_seed, numpy_rng

log = logging.getLogger(__name__)

VARIANTS = ("full", "cgan", "wo_seg", "wo_adaon", "wo_lexc")
CHECKPOINT_FORMAT = "structsyn-checkpoint/1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 1
    lam: float = 10.0
    seed: int = 0
    variant: str = "full"
    base_channels: int = 8
    dropout: float = 0.5
    checkpoint_every: int = 10
    augment: bool = True
    exc_mean_over_unmasked: bool = False
    style_weight: float = 1.0
    adaon_steps: int = 300
    adaon_lr: float = 1e-3
    folds: int = 5
    fold: int | None = None
    data_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def has_segmenter(self) -> bool:
        return self.variant in ("full", "wo_adaon", "wo_lexc")

    @property
    def uses_adaon(self) -> bool:
        return self.variant in ("full", "wo_lexc")

    @property
    def masks_reconstruction(self) -> bool:
        return self.variant in ("full", "wo_seg", "wo_adaon")


def load_config(path) -> TrainConfig:
    """Read a JSON (or, with ``tomli`` installed, TOML) config file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        import tomli
        return TrainConfig.from_dict(tomli.loads(text))
    return TrainConfig.from_dict(json.loads(text) if text.strip() else {})


@dataclass
class TrainLogEntry:
    epoch: int
    losses: LossReport
    seconds: float
    rng_digest: str

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "losses": self.losses.to_dict(), "seconds": self.seconds,
                "rng_digest": self.rng_digest}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainLogEntry":
        return cls(int(d["epoch"]), LossReport.from_dict(d["losses"]), float(d["seconds"]), d["rng_digest"])


class ModelBundle:
    """Networks, style bank and optimizer state for one training run."""

    def __init__(self, config: TrainConfig):
        self.config = config
        c = config.base_channels
        self.G = Generator(c, dropout=config.dropout)
        self.D = Discriminator(c)
        self.S = Segmenter(c) if config.has_segmenter else None
        self.encoder = StyleEncoder()
        self.decoders = nn.ModuleDict({o: StyleDecoder() for o in ada.ORGANS}) if config.uses_adaon else None
        self.bank: ada.OrganStyleBank | None = None
        self.adaon_curves: dict[str, list] = {}
        self.epoch = 0
        self.seed = config.seed
        self._make_optimizers()

    def _make_optimizers(self):
        cfg = self.config
        self.opt_G = torch.optim.Adam(self.G.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.opt_D = torch.optim.Adam(self.D.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.opt_S = torch.optim.Adam(self.S.parameters(), lr=cfg.lr, betas=cfg.betas) if self.S else None

    def initialize(self, seed: int | None = None) -> "ModelBundle":
        seed = self.seed if seed is None else seed
        init_params(self.G, derive_seed(seed, 1))
        init_params(self.D, derive_seed(seed, 2))
        if self.S is not None:
            init_params(self.S, derive_seed(seed, 3))
        init_encoder(self.encoder, derive_seed(seed, 4))
        if self.decoders is not None:
            for i, o in enumerate(ada.ORGANS):
                init_params(self.decoders[o], derive_seed(seed, 5, i))
        self._make_optimizers()
        return self

    def modules(self) -> dict[str, nn.Module]:
        mods = {"G": self.G, "D": self.D, "style_encoder": self.encoder}
        if self.S is not None:
            mods["S"] = self.S
        if self.decoders is not None:
            for o in ada.ORGANS:
                mods[f"adaon.{o}"] = self.decoders[o]
        return mods

    def arch_hash(self) -> str:
        desc = {"variant": self.config.variant, "base_channels": self.config.base_channels,
                "dropout": self.config.dropout,
                "params": {name: [[k, list(v.shape)] for k, v in m.state_dict().items()]
                           for name, m in sorted(self.modules().items())}}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()

    def param_digest(self, name: str) -> str:
        h = hashlib.sha256()
        for p in self.modules()[name].parameters():
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def train_mode(self, on: bool = True):
        for m in self.modules().values():
            m.train(on)
        self.encoder.eval()

    def organ_masks(self, pred: np.ndarray) -> dict[str, np.ndarray]:
        masks = {o: pred == cls for o, cls in ada.ORGAN_CLASS.items()}
        if self.config.uses_adaon and self.bank is not None:
            masks = {o: m for o, m in masks.items() if o in self.bank}
        return masks

    def local(self, x: torch.Tensor, pred: np.ndarray) -> ada.LocalStreamOutput:
        masks = self.organ_masks(pred)
        if self.config.uses_adaon and self.bank is None:
            raise TrainingError("organ restyling needs a style bank; run pretrain_adaon first")
        if self.config.variant == "wo_adaon":
            return ada.local_stream(x, masks, None, passthrough=True)
        return ada.local_stream(x, masks, self.bank, self.encoder, self.decoders)

    # checkpoints

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "arch_hash": self.arch_hash(),
            "config": self.config.to_dict(),
            "params": {name: m.state_dict() for name, m in self.modules().items()},
            "style_bank": self.bank.state() if self.bank is not None else None,
            "adaon_curves": self.adaon_curves,
            "optimizer": {"G": self.opt_G.state_dict(), "D": self.opt_D.state_dict(),
                          "S": self.opt_S.state_dict() if self.opt_S else None},
            "epoch": self.epoch,
            "seed": self.seed,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        torch.save(self.state(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path, expect_config: TrainConfig | None = None) -> "ModelBundle":
        state = torch.load(Path(path), map_location="cpu", weights_only=False)
        if state.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        config = TrainConfig.from_dict(state["config"])
        bundle = cls(config)
        if state["arch_hash"] != bundle.arch_hash():
            raise CheckpointError(f"{path}: stored architecture hash does not match its config")
        if expect_config is not None and cls(expect_config).arch_hash() != state["arch_hash"]:
            raise CheckpointError(f"{path}: architecture differs from the requested configuration")
        for name, m in bundle.modules().items():
            m.load_state_dict(state["params"][name])
        for p in bundle.encoder.parameters():
            p.requires_grad_(False)
        if state["style_bank"] is not None:
            bundle.bank = ada.OrganStyleBank.from_state(state["style_bank"])
        bundle.adaon_curves = state.get("adaon_curves", {})
        bundle.opt_G.load_state_dict(state["optimizer"]["G"])
        bundle.opt_D.load_state_dict(state["optimizer"]["D"])
        if bundle.opt_S is not None:
            bundle.opt_S.load_state_dict(state["optimizer"]["S"])
        bundle.epoch = int(state["epoch"])
        bundle.seed = int(state["seed"])
        for name, m in bundle.modules().items():
            for k, v in m.state_dict().items():
                if v.is_floating_point() and not torch.all(torch.isfinite(v)):
                    raise CheckpointError(f"{path}: non-finite values in {name}.{k}")
        return bundle


@dataclass
class Batch:
    """One normalized training pair plus its label maps."""

    mr: torch.Tensor       # 1 x 1 x H x W
    ct: torch.Tensor       # 1 x 1 x H x W
    label_mr: np.ndarray   # H x W
    label_ct: np.ndarray   # H x W

    @classmethod
    def from_pair(cls, pair) -> "Batch":
        mr, ct, lmr, lct = pair
        return cls(normalize_for_training(mr).float()[None], normalize_for_training(ct).float()[None],
                   lmr.classes.copy(), lct.classes.copy())


def _check_finite(**terms):
    for name, value in terms.items():
        value = value.item() if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {name} loss ({value})")


def _whole_image_style_content(bundle: ModelBundle, fake: torch.Tensor, batch: Batch):
    ones = np.ones(batch.ct.shape[-2:], dtype=bool)
    with torch.no_grad():
        style = ada.style_statistics(bundle.encoder, batch.ct[0], ones)
        c_feat = bundle.encoder(batch.mr)[-1][0]
        t = ada.adain_with_stats(c_feat, *ada.channel_stats(c_feat), style.means[-1], style.stds[-1])
    ls = ada.style_loss(bundle.encoder, fake[0], ones, style)
    lc = ada.content_loss(bundle.encoder, fake[0], t, ones)
    return ls, lc


def train_step(bundle: ModelBundle, batch: Batch, step_index: int) -> LossReport:
    """One discriminator, one generator and (if present) one segmenter update."""
    cfg = bundle.config
    torch.manual_seed(derive_seed(bundle.seed, 0x57E9, step_index))
    bundle.train_mode(True)

    if cfg.masks_reconstruction:
        u = torch.as_tensor(exclusion_mask(batch.label_mr, batch.label_ct), dtype=batch.ct.dtype)
    else:
        u = torch.ones(batch.ct.shape[-2:], dtype=batch.ct.dtype)

    probs = None
    local = None
    if bundle.S is not None:
        probs = bundle.S(batch.mr)
        pred = probs.detach()[0].argmax(0).numpy()
        with torch.no_grad():
            local = bundle.local(batch.mr[0], pred)

    fake = bundle.G(batch.mr)
    fused = ada.fuse(fake, local) if local is not None else fake

    # discriminator
    d_loss = lsgan_d_loss(bundle.D(batch.ct), bundle.D(fused.detach()))
    _check_finite(gan_d=d_loss)
    bundle.opt_D.zero_grad()
    d_loss.backward()
    bundle.opt_D.step()

    # generator
    for p in bundle.D.parameters():
        p.requires_grad_(False)
    g_adv = lsgan_g_loss(bundle.D(fused))
    for p in bundle.D.parameters():
        p.requires_grad_(True)
    rec = masked_l1_loss(fake, batch.ct, u, mean_over_unmasked=cfg.exc_mean_over_unmasked)
    total = g_adv + cfg.lam * rec
    style = content = torch.zeros(())
    if cfg.variant == "wo_seg":
        style, content = _whole_image_style_content(bundle, fake, batch)
        total = total + cfg.style_weight * (style + content)
    _check_finite(gan_g=g_adv, l_exc=rec, style=style, content=content)
    bundle.opt_G.zero_grad()
    total.backward()
    bundle.opt_G.step()

    seg = torch.zeros(())
    if bundle.S is not None:
        seg = weighted_seg_ce(probs, batch.label_mr)
        _check_finite(seg_ce=seg)
        bundle.opt_S.zero_grad()
        seg.backward()
        bundle.opt_S.step()

    with torch.no_grad():
        plain = l1_loss(fake, batch.ct)
    return LossReport(gan_d=d_loss.item(), gan_g=g_adv.item(), l1=plain.item(), l_exc=rec.item(),
                      seg_ce=seg.item(), style=style.item(), content=content.item(),
                      total=total.item(), lam=cfg.lam)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return numpy_rng(seed, 0xE90C, epoch).permutation(n)


def prepare_pairs(pairs, augment: bool) -> list[Batch]:
    out = []
    for pair in pairs:
        for p in (augment_flip(pair) if augment else [pair]):
            out.append(Batch.from_pair(p))
    return out


def pretrain_adaon(bundle: ModelBundle, batches: list[Batch]) -> None:
    """Fit one decoder per organ on ground-truth MR content and CT style regions."""
    cfg = bundle.config
    content = {o: [] for o in ada.ORGANS}
    style = {o: [] for o in ada.ORGANS}
    for b in batches:
        for o, cls in ada.ORGAN_CLASS.items():
            if np.any(b.label_mr == cls):
                content[o].append((b.mr[0], b.label_mr == cls))
            if np.any(b.label_ct == cls):
                style[o].append((b.ct[0], b.label_ct == cls))
    bank = ada.OrganStyleBank()
    for i, o in enumerate(ada.ORGANS):
        if not style[o] or not content[o]:
            log.warning("organ %s: no %s exemplars, organ left to the global stream",
                        o, "CT style" if not style[o] else "MR content")
            continue
        acfg = ada.AdaONConfig(steps=cfg.adaon_steps, lr=cfg.adaon_lr, seed=derive_seed(bundle.seed, 6, i))
        dec, st, curve = ada.train_adaon(o, content[o], style[o], acfg, bundle.encoder, bundle.decoders[o])
        bank.styles[o] = st
        bundle.adaon_curves[o] = curve
    bundle.bank = bank


def _rng_digest() -> str:
    return hashlib.sha256(torch.get_rng_state().numpy().tobytes()).hexdigest()[:16]


def read_log(path) -> list[TrainLogEntry]:
    path = Path(path)
    if not path.exists():
        return []
    return [TrainLogEntry.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


def train(config: TrainConfig, pairs, out_dir=None, resume_from=None, stop_after: int | None = None):
    """Run the full schedule; returns ``(bundle, log_entries)``.

    ``pairs`` are ``(mr, ct, label_mr, label_ct)`` tuples from the training
    split. With ``out_dir``, ``train_log.jsonl`` is appended each epoch and
    checkpoints ``epoch_XXXX.pt``/``last.pt`` are written every
    ``checkpoint_every`` epochs and at the end. ``stop_after`` ends the run
    early after that many total epochs (used to test resumption).
    """
    batches = prepare_pairs(pairs, config.augment)
    if not batches:
        raise TrainingError("training split is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = out_dir / "train_log.jsonl" if out_dir is not None else None

    if resume_from is not None:
        bundle = ModelBundle.load(resume_from, expect_config=config)
        bundle.config = config
        entries = [e for e in read_log(log_path) if e.epoch <= bundle.epoch] if log_path else []
        if log_path is not None:
            log_path.write_text("".join(json.dumps(e.to_dict()) + "\n" for e in entries))
    else:
        bundle = ModelBundle(config).initialize(config.seed)
        entries = []
        if config.uses_adaon:
            pretrain_adaon(bundle, batches)
        if log_path is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            log_path.write_text("")

    last = config.epochs if stop_after is None else min(stop_after, config.epochs)
    n = len(batches)
    for epoch in range(bundle.epoch, last):
        t0 = time.perf_counter()
        reports = []
        for k, i in enumerate(epoch_order(bundle.seed, epoch, n)):
            reports.append(train_step(bundle, batches[i], epoch * n + k))
        bundle.epoch = epoch + 1
        entry = TrainLogEntry(bundle.epoch, LossReport.mean(reports), time.perf_counter() - t0, _rng_digest())
        entries.append(entry)
        log.info("epoch %d: lambda*l_exc=%.4f gan_d=%.4f seg=%.4f", bundle.epoch,
                 entry.losses.lam * entry.losses.l_exc, entry.losses.gan_d, entry.losses.seg_ce)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(entry.to_dict()) + "\n")
        if out_dir is not None and config.checkpoint_every and bundle.epoch % config.checkpoint_every == 0:
            bundle.save(out_dir / f"epoch_{bundle.epoch:04d}.pt")

    if out_dir is not None:
        bundle.save(out_dir / "last.pt")
    bundle.train_mode(False)
    return bundle, entries


@torch.no_grad()
def infer(bundle: ModelBundle, mr: ImageSlice) -> tuple[ImageSlice, LabelMap]:
    """Translate one MR slice; organ masks come only from the segmenter."""
    bundle.train_mode(False)
    x = normalize_for_training(mr).float()[None]
    fake = bundle.G(x)
    if bundle.S is None:
        pred = np.zeros(mr.shape, dtype=np.uint8)
        out = fake
    else:
        pred = bundle.S(x)[0].argmax(0).numpy().astype(np.uint8)
        out = ada.fuse(fake, bundle.local(x[0], pred))
    return denormalize_ct(out[0]), LabelMap(pred, Modality.MR)
