"""Desk-scale ablation runs on procedurally generated phantoms.

Training pairs carry bladder and gas inconsistencies. Two held-out sets are
scored: ``consistent`` pairs (MR and CT agree, so the real CT is the correct
answer everywhere) and ``mr_gas`` pairs whose rectal gas appears only in MR.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .evaluation import MetricsReport, body_mask, evaluate
from .phantom import GAS, generate_phantom, random_config
from .seeding import derive_seed
from .training import ModelBundle, TrainConfig, TrainLogEntry, infer, train

log = logging.getLogger(__name__)

DARK_GAS_HU = -900.0


@dataclass
class PhantomSplits:
    train: list
    consistent: list
    mr_gas: list


def make_splits(seed: int, n_train: int = 16, n_test: int = 8, size: int = 64,
                train_inconsistency: str = "both") -> PhantomSplits:
    def cfg(kind, i, mode, **kw):
        return random_config(derive_seed(seed, kind, i), size, mode, **kw)

    train_pairs = [generate_phantom(cfg(1, i, train_inconsistency)) for i in range(n_train)]
    consistent = [generate_phantom(cfg(2, i, "none")) for i in range(n_test)]
    mr_gas = [generate_phantom(cfg(3, i, "gas", gas_in="mr")) for i in range(n_test)]
    return PhantomSplits(train_pairs, consistent, mr_gas)


def gas_structure_scores(bundle_or_predict, pairs) -> dict:
    """Dark-region IoU against MR gas and mean synCT HU inside MR gas, per pair."""
    predict = bundle_or_predict if callable(bundle_or_predict) and not hasattr(bundle_or_predict, "G") \
        else (lambda pair: infer(bundle_or_predict, pair[0]))
    ious, means = [], []
    for pair in pairs:
        mr, ct, lmr, _ = pair
        synct, _ = predict(pair)
        gt = lmr.classes == GAS
        dark = (synct.pixels <= DARK_GAS_HU) & body_mask(ct)
        union = (dark | gt).sum()
        ious.append(float((dark & gt).sum() / union) if union else 1.0)
        means.append(float(synct.pixels[gt].mean()) if gt.any() else float("nan"))
    return {"iou": ious, "gas_mean_hu": means,
            "mean_iou": float(np.mean(ious)), "mean_gas_hu": float(np.nanmean(means))}


@dataclass
class VariantResult:
    variant: str
    seed: int
    log: list[TrainLogEntry]
    consistent: MetricsReport
    mr_gas: MetricsReport
    gas: dict
    bundle: ModelBundle | None = field(default=None, repr=False)

    def summary(self) -> dict:
        first, last = self.log[0].losses, self.log[-1].losses
        return {
            "variant": self.variant, "seed": self.seed,
            "lexc_first": first.lam * first.l_exc, "lexc_last": last.lam * last.l_exc,
            "mae_consistent": self.consistent.mean("mae_entire"),
            "mae_gas_consistent": self.consistent.mean("mae_gas"),
            "mae_mr_gas": self.mr_gas.mean("mae_entire"),
            "psnr": self.consistent.mean("psnr"), "ssim": self.consistent.mean("ssim"),
            "gas_iou": self.gas["mean_iou"], "gas_mean_hu": self.gas["mean_gas_hu"],
            "dsc": {k: float(np.mean([self._dsc(k)])) for k in ("bladder", "gas", "rectum")},
        }

    def _dsc(self, organ):
        rows = self.consistent.subjects + self.mr_gas.subjects
        return float(np.mean([r["dsc"][organ] for r in rows]))


def run_variant(variant: str, seed: int, splits: PhantomSplits, epochs: int = 30, base_channels: int = 8,
                keep_bundle: bool = False, **overrides) -> VariantResult:
    config = TrainConfig(epochs=epochs, variant=variant, seed=seed, base_channels=base_channels,
                         checkpoint_every=0, **overrides)
    bundle, entries = train(config, splits.train)
    res = VariantResult(variant, seed, entries,
                        evaluate(bundle, splits.consistent, label=variant),
                        evaluate(bundle, splits.mr_gas, label=variant),
                        gas_structure_scores(bundle, splits.mr_gas))
    if keep_bundle:
        res.bundle = bundle
    log.info("%s seed %d: %s", variant, seed, res.summary())
    return res


def run_ablation(variants, seeds, epochs: int = 30, n_train: int = 16, n_test: int = 8, size: int = 64,
                 base_channels: int = 8, **overrides) -> dict[tuple[str, int], VariantResult]:
    results = {}
    for seed in seeds:
        splits = make_splits(seed, n_train, n_test, size)
        for v in variants:
            results[(v, seed)] = run_variant(v, seed, splits, epochs, base_channels, **overrides)
    return results


def summary_table(results: dict[tuple[str, int], VariantResult]) -> str:
    """Mean over seeds of consistent-set MAE/PSNR/SSIM per variant."""
    variants = list(dict.fromkeys(v for v, _ in results))
    lines = [f"{'Method':<10}  {'MAE (HU)':>16}  {'PSNR (dB)':>9}  {'SSIM':>6}  {'gas IoU':>7}  seeds"]
    for v in variants:
        rs = [r.summary() for (vv, _), r in results.items() if vv == v]
        maes = [r["mae_consistent"] for r in rs]
        lines.append(f"{v:<10}  {np.mean(maes):>8.1f} ± {np.std(maes):<5.1f}  {np.mean([r['psnr'] for r in rs]):>9.2f}"
                     f"  {np.mean([r['ssim'] for r in rs]):>6.3f}  {np.mean([r['gas_iou'] for r in rs]):>7.3f}  {len(rs)}")
    return "\n".join(lines) + "\n"
