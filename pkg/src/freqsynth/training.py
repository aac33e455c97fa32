"""Training loop: augmentation, cropping, the two-term L1 objective, Adam.

One epoch visits every training pair once (fixed order), drawing a random
z-rotation and a random crop for each. The CT high band is computed once per
whole volume before any augmentation, and rotated together with MR and CT.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .adversarial import Discriminator, ragan_d_loss, ragan_g_loss, require_high_frequency
from .errors import ArgumentError, DivergenceError, ShapeError
from .frequency import GaussianSpec, decompose
from .network import ModelConfig, SynthesisModel, save_checkpoint
from .tensor import AdamState, Tensor, adam_step
from .volume import Volume, normalize_ct, normalize_mr

CONFIG_KEYS = ("epochs", "lr", "beta1", "beta2", "crop", "rotation_deg", "sigma", "seed",
               "adversarial", "adv_weight", "base_kind", "channels", "refine_k")


def _triple(value):
    if isinstance(value, str):
        value = [int(v) for v in value.replace("x", ",").split(",") if v.strip()]
    if isinstance(value, int):
        value = [value]
    value = tuple(int(v) for v in value)
    if len(value) == 1:
        value = value * 3
    if len(value) != 3 or min(value) < 1:
        raise ArgumentError(f"expected one or three positive extents, got {value}")
    return value


def _bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ArgumentError(f"not a boolean: {value!r}")


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    crop: tuple = (16, 16, 16)
    rotation_deg: float = 10.0
    sigma: float = 2.0
    seed: int = 0
    adversarial: bool = False
    adv_weight: float = 0.01
    base_kind: str = "UNET"
    channels: int = 32
    refine_k: int = 13
    # not part of the config file format; set through the API or CLI flags
    frequency: bool = True
    depth: int = 2
    disc_channels: int = 8
    checkpoint_every: int = 0

    def __post_init__(self):
        self.crop = _triple(self.crop)
        self.adversarial = _bool(self.adversarial)
        self.frequency = _bool(self.frequency)
        if abs(self.rotation_deg) > 180.0:
            raise ArgumentError(f"rotation_deg must lie in [-180, 180], got {self.rotation_deg}")
        if self.epochs < 0:
            raise ArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.adversarial and not self.frequency:
            raise ArgumentError("adversarial training needs the frequency-supervised model")

    def model_config(self):
        return ModelConfig(base_kind=self.base_kind, channels=self.channels, depth=self.depth,
                           refine_k=self.refine_k, frequency=self.frequency)

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "crop":
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}\n")
        return "".join(lines)

    @classmethod
    def from_mapping(cls, mapping):
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, raw in mapping.items():
            if key not in kinds:
                raise ArgumentError(f"unknown config key {key!r}")
            kind = kinds[key]
            if kind == "int":
                values[key] = int(raw)
            elif kind == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
        return cls(**values)


def parse_config_text(text, allowed=CONFIG_KEYS):
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict of strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if allowed is not None and key not in allowed:
            raise ArgumentError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path):
    return TrainConfig.from_mapping(parse_config_text(Path(path).read_text()))


# ----------------------------------------------------------------- the loss
def loss_terms(y_low, y_high, y, y_h):
    """(high-band term, overall term) of the two-term L1 objective."""
    if y_low.shape != y.shape or y_high.shape != y_h.shape or y_low.shape != y_high.shape:
        raise ShapeError(f"loss shape mismatch: {y_low.shape}, {y_high.shape}, {y.shape}, {y_h.shape}")
    return T.l1_mean(y_high, y_h), T.l1_mean(y_low + y_high, y)


def total_loss(y_low, y_high, y, y_h):
    """mean|y_high - y_h| + mean|(y_low + y_high) - y|."""
    high, overall = loss_terms(y_low, y_high, y, y_h)
    return high + overall


# ------------------------------------------------------------- augmentation
def rotate_z(volume, angle):
    """Rotate every axial (H, W) slice by ``angle`` degrees about its centre.

    Bilinear interpolation; samples falling outside the slice take the volume
    minimum.
    """
    if abs(angle) > 180:
        raise ArgumentError(f"angle must lie in [-180, 180], got {angle}")
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if angle == 0:
        out = data.copy()
    else:
        out = _rotate_slices(data, angle)
    return volume.like(out) if isinstance(volume, Volume) else out


def _rotate_slices(data, angle):
    _, h, w = data.shape
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h) - ci, np.arange(w) - cj, indexing="ij")
    # snap to the grid so exact multiples of 90 degrees land on voxel centres
    src_i = np.round(ci + cos * ii + sin * jj, 9)
    src_j = np.round(cj - sin * ii + cos * jj, 9)
    inside = (src_i >= 0) & (src_i <= h - 1) & (src_j >= 0) & (src_j <= w - 1)
    i0 = np.clip(np.floor(src_i).astype(int), 0, h - 1)
    j0 = np.clip(np.floor(src_j).astype(int), 0, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    fi = np.where(inside, src_i - i0, 0.0)
    fj = np.where(inside, src_j - j0, 0.0)
    src = data.astype(np.float64)
    out = ((1 - fi) * (1 - fj) * src[:, i0, j0] + (1 - fi) * fj * src[:, i0, j1]
           + fi * (1 - fj) * src[:, i1, j0] + fi * fj * src[:, i1, j1])
    out = np.where(inside, out, src.min())
    return out.astype(data.dtype)


@dataclass
class TrainSample:
    mr_crop: np.ndarray
    ct_crop: np.ndarray
    ct_high_crop: np.ndarray
    origin: tuple = field(default=(0, 0, 0))


def _data(v):
    return v.data if isinstance(v, Volume) else np.asarray(v)


def sample_crop(mr, ct, ct_high, size, rng):
    """Crop all three volumes at one uniformly drawn origin; arrays come back as (1, d, h, w)."""
    size = _triple(size)
    dims = _data(mr).shape
    if _data(ct).shape != dims or _data(ct_high).shape != dims:
        raise ShapeError("mr, ct and ct_high must share dims")
    if any(s > n for s, n in zip(size, dims)):
        raise ArgumentError(f"crop {size} does not fit in volume dims {dims}")
    origin = tuple(int(rng.integers(0, n - s + 1)) for s, n in zip(size, dims))
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return TrainSample(_data(mr)[sl][None], _data(ct)[sl][None], _data(ct_high)[sl][None], origin)


# ---------------------------------------------------------------- the loop
@dataclass
class PreparedPair:
    mr: Volume
    ct: Volume
    ct_high: Volume


def prepare_pair(mr, ct, sigma):
    """Normalize MR/CT and split the normalized CT into bands (whole volume)."""
    if mr.dims != ct.dims:
        raise ShapeError(f"MR dims {mr.dims} differ from CT dims {ct.dims}")
    mr_n = normalize_mr(mr)
    ct_n = normalize_ct(ct)
    pair = decompose(ct_n, GaussianSpec(sigma))
    return PreparedPair(mr_n, ct_n, require_high_frequency(pair.high))


@dataclass
class LossRecord:
    epoch: int
    loss_total: float
    loss_high: float
    loss_overall: float
    loss_adv: float


@dataclass
class TrainResult:
    model: SynthesisModel
    curve: list
    discriminator: Discriminator | None = None


def train(model, dataset, config, checkpoint_dir=None):
    """Train ``model`` in place on (mr, ct) volume pairs; returns the loss curve.

    Deterministic for a given ``config.seed``.
    """
    if not dataset:
        raise ArgumentError("dataset is empty")
    if config.frequency != model.config.frequency:
        raise ArgumentError("config.frequency does not match the model")
    prepared = [prepare_pair(mr, ct, config.sigma) for mr, ct in dataset]
    for p in prepared:
        if any(c > n for c, n in zip(config.crop, p.mr.dims)):
            raise ArgumentError(f"crop {config.crop} does not fit in volume dims {p.mr.dims}")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = AdamState.for_params(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    disc = opt_d = None
    if config.adversarial:
        disc = Discriminator(config.disc_channels, model.config.depth, seed=config.seed + 1,
                             dtype=model.dtype)
        opt_d = AdamState.for_params(disc.parameters(), lr=config.lr, beta1=config.beta1,
                                     beta2=config.beta2)
    dtype = model.dtype
    curve = []
    for epoch in range(config.epochs):
        sums = np.zeros(4)
        for index, p in enumerate(prepared):
            angle = float(rng.uniform(-config.rotation_deg, config.rotation_deg)) \
                if config.rotation_deg else 0.0
            s = sample_crop(rotate_z(p.mr, angle), rotate_z(p.ct, angle),
                            rotate_z(p.ct_high, angle), config.crop, rng)
            x = Tensor(s.mr_crop.astype(dtype))
            target = Tensor(s.ct_crop.astype(dtype))
            target_high = Tensor(s.ct_high_crop.astype(dtype))
            y_low, y_high, y = model(x)
            if config.frequency:
                high, overall = loss_terms(y_low, y_high, target, target_high)
                loss = high + overall
                high_value = high.item()
            else:
                overall = T.l1_mean(y, target)
                loss = overall
                high_value = math.nan
            adv_value = 0.0
            if disc is not None:
                d_loss = ragan_d_loss([disc(target_high)], [disc(y_high.detach())])
                d_loss.backward()
                adam_step(disc.parameters(), opt_d)
                g_loss = ragan_g_loss([disc(target_high)], [disc(y_high)])
                adv_value = g_loss.item()
                loss = loss + config.adv_weight * g_loss
            total = loss.item()
            if not math.isfinite(total):
                raise DivergenceError(epoch, index, {"total": total, "high": high_value,
                                                     "overall": overall.item(), "adv": adv_value})
            loss.backward()
            if disc is not None:
                disc.zero_grad()
            adam_step(params, opt)
            sums += (total, high_value, overall.item(), adv_value)
        means = sums / len(prepared)
        curve.append(LossRecord(epoch, *(float(m) for m in means)))
        if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch{epoch + 1:05d}.ckpt")
    return TrainResult(model, curve, disc)


def build_and_train(dataset, config, checkpoint_dir=None, dtype=np.float32):
    model = SynthesisModel(config.model_config(), seed=config.seed, dtype=dtype)
    return train(model, dataset, config, checkpoint_dir)


def initial_loss(model, dataset, config):
    """Mean objective over whole un-augmented volumes (no parameter update)."""
    values = []
    for mr, ct in dataset:
        p = prepare_pair(mr, ct, config.sigma)
        y_low, y_high, y = model.predict(p.mr.data[None])
        if config.frequency:
            v = np.abs(y_high - p.ct_high.data[None]).mean() + np.abs(y - p.ct.data[None]).mean()
        else:
            v = np.abs(y - p.ct.data[None]).mean()
        values.append(float(v))
    return float(np.mean(values))


def write_loss_curve(curve, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_total", "loss_high", "loss_overall", "loss_adv"])
        for r in curve:
            writer.writerow([r.epoch, repr(r.loss_total), repr(r.loss_high),
                             repr(r.loss_overall), repr(r.loss_adv)])


def read_loss_curve(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossRecord(int(r["epoch"]), float(r["loss_total"]), float(r["loss_high"]),
                       float(r["loss_overall"]), float(r["loss_adv"])) for r in rows]


def split_pairs(pairs, test_fraction=0.25, seed=0):
    """Deterministic train/test split of a list of pairs."""
    n = len(pairs)
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    test = [pairs[i] for i in sorted(order[:n_test])]
    train_ = [pairs[i] for i in sorted(order[n_test:])]
    return train_, test
