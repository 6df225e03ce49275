"""Procedural paired MR/CT pelvic phantoms with controllable inconsistencies.

Geometry is expressed in fractions of the image side: a center ``(x, y)`` in
``[0, 1]`` and radii in ``(0, 0.5)``. The y axis points down the image, so the
bladder (anterior) sits above the rectum (posterior).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from .seeding import numpy_rng

HU_MIN, HU_MAX = -1000.0, 2000.0

BACKGROUND, BLADDER, RECTUM, GAS = 0, 1, 2, 3
NUM_CLASSES = 4
CLASS_NAMES = {BACKGROUND: "background", BLADDER: "bladder", RECTUM: "rectum", GAS: "gas"}

# tissue intensities per modality
CT_VALUES = {"air": -1000.0, "tissue": 0.0, "bone": 700.0, "bladder": 10.0, "rectum": 40.0, "gas": -1000.0}
MR_VALUES = {"air": 0.0, "tissue": 0.45, "bone": 0.1, "bladder": 0.9, "rectum": 0.3, "gas": 0.03}

INCONSISTENCY_MODES = ("none", "bladder", "gas", "both", "random")


class Modality(str, enum.Enum):
    MR = "MR"
    CT = "CT"


class PhantomError(ValueError):
    pass


def _check_side(h: int, w: int) -> None:
    if h != w:
        raise ValueError(f"image must be square, got {h}x{w}")
    if h < 32 or h & (h - 1):
        raise ValueError(f"image side must be a power of two >= 32, got {h}")


@dataclass
class ImageSlice:
    pixels: np.ndarray
    modality: Modality

    def __post_init__(self):
        self.modality = Modality(self.modality)
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be a 2D array")
        _check_side(*self.pixels.shape)
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("pixels contain NaN or Inf")
        lo, hi = self.value_range
        if self.pixels.min() < lo or self.pixels.max() > hi:
            raise ValueError(f"{self.modality.value} pixels outside [{lo}, {hi}]")

    @property
    def value_range(self) -> tuple[float, float]:
        return (HU_MIN, HU_MAX) if self.modality is Modality.CT else (0.0, 1.0)

    @property
    def units(self) -> str:
        return "HU" if self.modality is Modality.CT else "a.u."

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class LabelMap:
    classes: np.ndarray
    source_modality: Modality

    def __post_init__(self):
        self.source_modality = Modality(self.source_modality)
        classes = np.asarray(self.classes)
        if classes.ndim != 2:
            raise ValueError("label map must be 2D")
        if classes.size and (classes.min() < 0 or classes.max() >= NUM_CLASSES):
            raise ValueError(f"unknown class id in label map: {sorted(set(np.unique(classes)) - set(range(NUM_CLASSES)))}")
        self.classes = classes.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    def mask(self, cls: int) -> np.ndarray:
        return self.classes == cls


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry, inconsistency and noise settings for one phantom pair.

    ``rectum_shift_ct`` displaces the CT rectum (and its gas) relative to the
    MR one, mimicking rectal motion between acquisitions. Noise is additive
    Gaussian: ``noise_sigma`` in MR units and ``1000 * noise_sigma`` in HU.
    """

    size: int = 64
    body_center: tuple[float, float] = (0.5, 0.5)
    body_radii: tuple[float, float] = (0.45, 0.35)
    femur_offset: float = 0.3
    femur_y: float = 0.525
    femur_radius: float = 0.07
    sacrum_center: tuple[float, float] = (0.5, 0.8)
    sacrum_radius: float = 0.04
    bladder_center: tuple[float, float] = (0.5, 0.34)
    bladder_radii: tuple[float, float] = (0.13, 0.095)
    rectum_center: tuple[float, float] = (0.5, 0.61)
    rectum_radii: tuple[float, float] = (0.1, 0.08)
    gas_fraction: float = 0.6
    rectum_shift_ct: tuple[float, float] = (0.0, 0.0)
    bladder_scale_mr: float = 1.0
    bladder_scale_ct: float = 1.0
    gas_present_mr: bool = False
    gas_present_ct: bool = False
    noise_sigma: float = 0.0
    mr_bias_field_amplitude: float = 0.0
    seed: int = 0

    def radii(self) -> list[float]:
        return [*self.body_radii, self.femur_radius, self.sacrum_radius, *self.bladder_radii, *self.rectum_radii]


@dataclass
class _Geometry:
    body: np.ndarray
    bone: np.ndarray
    bladder: np.ndarray
    rectum: np.ndarray
    gas: np.ndarray

    def labels(self) -> np.ndarray:
        lab = np.zeros(self.body.shape, dtype=np.uint8)
        lab[self.bladder] = BLADDER
        lab[self.rectum] = RECTUM
        lab[self.gas] = GAS
        return lab


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="xy")


def _ellipse(xx, yy, center, radii) -> np.ndarray:
    return ((xx - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 <= 1.0


def _geometry(cfg: PhantomConfig, modality: Modality) -> _Geometry:
    xx, yy = _grid(cfg.size)
    body = _ellipse(xx, yy, cfg.body_center, cfg.body_radii)
    bone = np.zeros_like(body)
    for sx in (-1.0, 1.0):
        c = (cfg.body_center[0] + sx * cfg.femur_offset, cfg.femur_y)
        bone |= _ellipse(xx, yy, c, (cfg.femur_radius, cfg.femur_radius))
    bone |= _ellipse(xx, yy, cfg.sacrum_center, (cfg.sacrum_radius, cfg.sacrum_radius))

    if modality is Modality.MR:
        scale, gas_on, shift = cfg.bladder_scale_mr, cfg.gas_present_mr, (0.0, 0.0)
    else:
        scale, gas_on, shift = cfg.bladder_scale_ct, cfg.gas_present_ct, cfg.rectum_shift_ct
    bladder = _ellipse(xx, yy, cfg.bladder_center, (cfg.bladder_radii[0] * scale, cfg.bladder_radii[1] * scale))
    rc = (cfg.rectum_center[0] + shift[0], cfg.rectum_center[1] + shift[1])
    rectum = _ellipse(xx, yy, rc, cfg.rectum_radii)
    if gas_on:
        gr = (cfg.rectum_radii[0] * cfg.gas_fraction, cfg.rectum_radii[1] * cfg.gas_fraction)
        gas = _ellipse(xx, yy, rc, gr)
    else:
        gas = np.zeros_like(body)
    return _Geometry(body, bone, bladder, rectum & ~gas, gas)


def validate_config(cfg: PhantomConfig) -> None:
    if cfg.size < 32 or cfg.size & (cfg.size - 1):
        raise PhantomError(f"size must be a power of two >= 32, got {cfg.size}")
    if not all(0.0 < r < 0.5 for r in cfg.radii()):
        raise PhantomError("all radii must lie in (0, 0.5)")
    if not 0.0 < cfg.gas_fraction < 1.0:
        raise PhantomError("gas_fraction must lie in (0, 1)")
    if cfg.bladder_scale_mr <= 0 or cfg.bladder_scale_ct <= 0:
        raise PhantomError("bladder scales must be positive")
    if cfg.noise_sigma < 0 or cfg.mr_bias_field_amplitude < 0:
        raise PhantomError("noise_sigma and mr_bias_field_amplitude must be >= 0")
    if cfg.mr_bias_field_amplitude >= 1:
        raise PhantomError("mr_bias_field_amplitude must be < 1")

    inner = _erode(_geometry(cfg, Modality.MR).body)
    for modality in Modality:
        geo = _geometry(cfg, modality)
        organs = geo.bladder | geo.rectum | geo.gas
        if np.any(organs & ~inner):
            raise PhantomError(f"{modality.value} organs exit the body ellipse")
        if np.any(organs & geo.bone):
            raise PhantomError(f"{modality.value} organs overlap bone")
        if np.any(geo.bladder & (geo.rectum | geo.gas)):
            raise PhantomError(f"{modality.value} bladder touches rectum")


def _erode(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] &= mask[:-1, :]
    out[:-1, :] &= mask[1:, :]
    out[:, 1:] &= mask[:, :-1]
    out[:, :-1] &= mask[:, 1:]
    out[0, :] = out[-1, :] = out[:, 0] = out[:, -1] = False
    return out


def _bias_field(size: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    xx, yy = _grid(size)
    coef = rng.uniform(-1.0, 1.0, size=5)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    f = (coef[0] * (xx - 0.5) + coef[1] * (yy - 0.5) + coef[2] * (xx - 0.5) * (yy - 0.5)
         + coef[3] * np.sin(np.pi * xx + phase[0]) + coef[4] * np.cos(np.pi * yy + phase[1]))
    f = f / max(np.abs(f).max(), 1e-12)
    return 1.0 + amplitude * f


def generate_phantom(cfg: PhantomConfig) -> tuple[ImageSlice, ImageSlice, LabelMap, LabelMap]:
    """Render ``(mr, ct, label_mr, label_ct)`` for ``cfg``; deterministic in ``cfg.seed``."""
    validate_config(cfg)
    rng = numpy_rng(cfg.seed, 0x5EED)
    out = {}
    for modality, values in ((Modality.CT, CT_VALUES), (Modality.MR, MR_VALUES)):
        geo = _geometry(cfg, modality)
        img = np.full((cfg.size, cfg.size), values["air"], dtype=np.float64)
        img[geo.body] = values["tissue"]
        img[geo.bone] = values["bone"]
        img[geo.bladder] = values["bladder"]
        img[geo.rectum] = values["rectum"]
        img[geo.gas] = values["gas"]
        out[modality] = (img, geo.labels())

    ct, lab_ct = out[Modality.CT]
    mr, lab_mr = out[Modality.MR]
    if cfg.mr_bias_field_amplitude > 0:
        mr = mr * _bias_field(cfg.size, cfg.mr_bias_field_amplitude, rng)
    if cfg.noise_sigma > 0:
        mr = mr + rng.normal(0.0, cfg.noise_sigma, mr.shape)
        ct = ct + rng.normal(0.0, 1000.0 * cfg.noise_sigma, ct.shape)
    mr = np.clip(mr, 0.0, 1.0)
    ct = np.clip(ct, HU_MIN, HU_MAX)
    return (
        ImageSlice(mr, Modality.MR),
        ImageSlice(ct, Modality.CT),
        LabelMap(lab_mr, Modality.MR),
        LabelMap(lab_ct, Modality.CT),
    )


def ground_truth_bone(cfg: PhantomConfig) -> np.ndarray:
    return _geometry(cfg, Modality.CT).bone


def random_config(seed: int, size: int = 64, inconsistency: str = "random",
                  noise_sigma: float = 0.01, mr_bias_field_amplitude: float = 0.1,
                  gas_in: str | None = None) -> PhantomConfig:
    """Sample a jittered anatomy with the requested kind of MR/CT mismatch.

    ``bladder`` rescales one modality's bladder. ``gas`` puts rectal gas in
    exactly one modality (``gas_in`` picks which; default random) and moves
    the CT rectum. ``both`` does
    both, ``none`` keeps the pair consistent and ``random`` draws each
    mismatch with p=0.5. Draws that violate the anatomy constraints are
    rejected and redrawn from the same stream.
    """
    if inconsistency not in INCONSISTENCY_MODES:
        raise PhantomError(f"unknown inconsistency mode {inconsistency!r}")
    if gas_in not in (None, "mr", "ct"):
        raise PhantomError(f"gas_in must be 'mr', 'ct' or None, got {gas_in!r}")
    rng = numpy_rng(seed, 0xC0F)
    for _ in range(1000):
        cfg = _draw_config(rng, seed, size, inconsistency, noise_sigma, mr_bias_field_amplitude, gas_in)
        try:
            validate_config(cfg)
        except PhantomError:
            continue
        return cfg
    raise PhantomError(f"could not sample a valid {inconsistency!r} phantom of size {size}")


def _draw_config(rng, seed, size, inconsistency, noise_sigma, mr_bias_field_amplitude, gas_in) -> PhantomConfig:
    j = lambda s: float(rng.uniform(-s, s))  # noqa: E731

    if inconsistency == "random":
        bladder_inc, gas_inc = bool(rng.random() < 0.5), bool(rng.random() < 0.5)
    else:
        bladder_inc = inconsistency in ("bladder", "both")
        gas_inc = inconsistency in ("gas", "both")

    scale = float(rng.uniform(0.9, 1.1))
    scale_mr = scale_ct = scale
    if bladder_inc:
        ratio = float(rng.uniform(1.2, 1.35))
        if rng.random() < 0.5:
            scale_mr = min(scale * ratio, 1.25)
        else:
            scale_ct = min(scale * ratio, 1.25)

    shift = (0.0, 0.0)
    if gas_inc:
        gas_mr = bool(rng.random() < 0.5) if gas_in is None else gas_in == "mr"
        gas_ct = not gas_mr
        angle = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0.02, 0.04)
        shift = (float(mag * np.cos(angle)), float(0.5 * mag * np.sin(angle)))
    else:
        gas_mr = gas_ct = bool(rng.random() < 0.5)

    rs = float(rng.uniform(0.92, 1.08))
    return PhantomConfig(
        size=size,
        body_center=(0.5 + j(0.01), 0.5 + j(0.01)),
        body_radii=(0.45 + j(0.01), 0.35 + j(0.01)),
        femur_offset=0.3 + j(0.015),
        femur_y=0.525 + j(0.02),
        femur_radius=0.07 * float(rng.uniform(0.9, 1.1)),
        sacrum_center=(0.5 + j(0.015), 0.8 + j(0.01)),
        sacrum_radius=0.04 * float(rng.uniform(0.9, 1.1)),
        bladder_center=(0.5 + j(0.02), 0.34 + j(0.015)),
        bladder_radii=(0.13 * rs, 0.095 * rs),
        rectum_center=(0.5 + j(0.02), 0.61 + j(0.01)),
        rectum_radii=(0.1 * float(rng.uniform(0.92, 1.08)), 0.08 * float(rng.uniform(0.92, 1.08))),
        gas_fraction=float(rng.uniform(0.55, 0.65)),
        rectum_shift_ct=shift,
        bladder_scale_mr=scale_mr,
        bladder_scale_ct=scale_ct,
        gas_present_mr=gas_mr,
        gas_present_ct=gas_ct,
        noise_sigma=noise_sigma,
        mr_bias_field_amplitude=mr_bias_field_amplitude,
        seed=int(seed),
    )


def augment_flip(pair):
    """Return identity, horizontal, vertical and double flips of a paired record."""
    flips = [lambda a: a, np.fliplr, np.flipud, lambda a: np.flipud(np.fliplr(a))]
    out = []
    for f in flips:
        flipped = []
        for item in pair:
            if isinstance(item, ImageSlice):
                flipped.append(ImageSlice(np.ascontiguousarray(f(item.pixels)), item.modality))
            else:
                flipped.append(LabelMap(np.ascontiguousarray(f(item.classes)), item.source_modality))
        out.append(tuple(flipped))
    return out


def normalize_for_training(img: ImageSlice) -> torch.Tensor:
    """Map an image affinely onto [-1, 1] as a float64 ``1 x H x W`` tensor."""
    lo, hi = img.value_range
    px = img.pixels.astype(np.float64)
    if px.min() < lo or px.max() > hi:
        raise ValueError(f"{img.modality.value} pixels outside [{lo}, {hi}]")
    x = (px - lo) / (hi - lo) * 2.0 - 1.0
    return torch.from_numpy(x)[None]


def denormalize_ct(fm: torch.Tensor) -> ImageSlice:
    x = fm.detach().to(torch.float64).cpu().numpy()
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise ValueError("expected a single-channel feature map")
        x = x[0]
    if x.min() < -1.0 - 1e-6 or x.max() > 1.0 + 1e-6:
        raise ValueError("normalized CT outside [-1, 1]")
    hu = (np.clip(x, -1.0, 1.0) + 1.0) / 2.0 * (HU_MAX - HU_MIN) + HU_MIN
    return ImageSlice(hu, Modality.CT)

