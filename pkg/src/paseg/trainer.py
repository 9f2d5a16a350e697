"""Losses, geometric augmentation and the training loops for both architectures."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import nncore as nn
from .core import N_CLASSES, ConfigurationError, DatasetSplit, Sample, TissueClass
from .metrics import mean_dice
from .models import (
    FcnnSpec,
    Model,
    UNetSpec,
    build_fcnn,
    build_unet,
    check_combination,
    input_channels,
    predict_labels,
    sample_input,
    save_model,
)
from .nncore import Tensor, op_result

DICE_EPS = 1e-6


# --- losses -------------------------------------------------------------------

def _check_codes(target: np.ndarray, n_classes: int):
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise ValueError(f"target contains class codes outside 0..{n_classes - 1}")


def cross_entropy_loss(logits: Tensor, target) -> Tensor:
    """Mean over pixels of -log softmax(logits)[true class]; ``target`` is (B, H, W) integer codes."""
    target = np.asarray(target)
    n_classes = logits.shape[1]
    _check_codes(target, n_classes)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - log_norm
    picked = np.take_along_axis(logp, target[:, None].astype(np.int64), axis=1)
    n = target.size
    loss = -picked.sum() / n

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, target[:, None].astype(np.int64),
                          np.take_along_axis(grad, target[:, None].astype(np.int64), axis=1) - 1, axis=1)
        logits._accumulate(grad * (g / n))

    return op_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def one_hot(target, n_classes: int = N_CLASSES) -> np.ndarray:
    """(B, H, W) codes -> (B, n_classes, H, W) float one-hot."""
    target = np.asarray(target)
    _check_codes(target, n_classes)
    return (target[:, None] == np.arange(n_classes)[None, :, None, None]).astype(np.float64)


def soft_dice_loss(probs: Tensor, target_onehot) -> Tensor:
    """1 - mean over classes of (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps).

    Sums run over the batch and all pixels.
    """
    g = np.asarray(target_onehot, dtype=probs.dtype)
    if g.shape != probs.shape:
        raise ValueError(f"probabilities {probs.shape} and one-hot target {g.shape} differ")
    p = probs.data
    axes = (0,) + tuple(range(2, p.ndim))
    inter = (p * g).sum(axis=axes)
    denom = (p * p).sum(axis=axes) + (g * g).sum(axis=axes) + DICE_EPS
    num = 2 * inter + DICE_EPS
    n_classes = p.shape[1]
    loss = 1.0 - (num / denom).mean()

    def backward(go):
        shape = (1, n_classes) + (1,) * (p.ndim - 2)
        d = (2 * g * denom.reshape(shape) - num.reshape(shape) * 2 * p) / (denom ** 2).reshape(shape)
        probs._accumulate(-go * d / n_classes)

    return op_result(np.asarray(loss, dtype=probs.dtype), (probs,), backward)


def soft_margin_loss(logits: Tensor, target) -> Tensor:
    """Mean of log(1 + exp(-y x)) with y in {-1, +1}."""
    y = np.asarray(target, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"targets {y.shape} and logits {logits.shape} differ")
    if not np.all(np.abs(y) == 1):
        raise ValueError("soft margin targets must be -1 or +1")
    z = -y * logits.data
    n = z.size
    loss = np.logaddexp(0.0, z).sum() / n

    def backward(g):
        # d/dx log(1 + e^{-yx}) = -y * sigmoid(-yx)
        sig = np.exp(-np.logaddexp(0.0, -z))
        logits._accumulate(g * (-y * sig) / n)

    return op_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def one_vs_rest(codes, n_classes: int = N_CLASSES) -> np.ndarray:
    codes = np.asarray(codes)
    return np.where(codes[:, None] == np.arange(n_classes)[None, :], 1.0, -1.0)


# --- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    flip_probability: float = 0.5
    max_rotation_deg: float = 5.0
    max_shear_deg: float = 5.0

    def __post_init__(self):
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip probability must be in [0, 1]")
        if not (0 <= self.max_rotation_deg <= 5 and 0 <= self.max_shear_deg <= 5):
            raise ValueError("rotation and shear limits must lie within 5 degrees")


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    rotation_deg: float = 0.0
    shear_deg: float = 0.0

    @classmethod
    def draw(cls, spec: AugmentSpec, rng: np.random.Generator) -> "AugmentParams":
        return cls(bool(rng.random() < spec.flip_probability),
                   float(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg)),
                   float(rng.uniform(-spec.max_shear_deg, spec.max_shear_deg)))

    def matrix(self) -> np.ndarray:
        """Forward map on centred (row, col) coordinates: flip after rotation after shear."""
        shear = np.array([[1.0, 0.0], [math.tan(math.radians(self.shear_deg)), 1.0]])
        a = math.radians(self.rotation_deg)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        flip = np.diag([1.0, -1.0]) if self.flip else np.eye(2)
        return flip @ rot @ shear


def apply_affine(image: np.ndarray, labels: np.ndarray, params: AugmentParams,
                 label_fill: int = TissueClass.OTHER_TISSUE) -> tuple[np.ndarray, np.ndarray]:
    """Warp a (C, H, W) stack bilinearly and an (H, W) label map by nearest neighbour."""
    h, w = labels.shape
    fwd = params.matrix()
    inv = np.linalg.inv(fwd) if params.rotation_deg or params.shear_deg else fwd.T
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - inv @ centre
    inv3 = np.eye(3)
    inv3[1:, 1:] = inv
    out_img = ndimage.affine_transform(image, inv3, offset=np.r_[0.0, offset], order=1,
                                       mode="constant", cval=0.0)
    out_lab = ndimage.affine_transform(labels, inv, offset=offset, order=0,
                                       mode="constant", cval=int(label_fill))
    return out_img.astype(image.dtype), out_lab.astype(labels.dtype)


def augment(image: np.ndarray, labels: np.ndarray, spec: AugmentSpec,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return apply_affine(image, labels, AugmentParams.draw(spec, rng))


# --- configuration --------------------------------------------------------------

ARCH_DEFAULTS = {
    "unet": dict(learning_rate=1e-3, batch_size=25, batches_per_epoch=11, epochs=1000),
    "fcnn": dict(learning_rate=1e-4, batch_size=1024, batches_per_epoch=1000, epochs=200),
}


@dataclass
class TrainConfig:
    """Training hyperparameters; unset values take the per-architecture defaults."""

    architecture: str = "unet"
    input_mode: str = "PAUS"
    learning_rate: float | None = None
    batch_size: int | None = None
    batches_per_epoch: int | None = None
    epochs: int | None = None
    augmentation: bool = True
    dice_weight: float = 1.0
    base_channels: int = 16
    dropout: float | None = None
    leak: float = 0.01
    seed: int = 0

    def __post_init__(self):
        check_combination(self.architecture, self.input_mode)
        for k, v in ARCH_DEFAULTS[self.architecture].items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        if self.dropout is None:
            self.dropout = 0.25 if self.architecture == "unet" else 0.2
        for k in ("learning_rate", "batch_size", "batches_per_epoch", "epochs", "base_channels"):
            if not getattr(self, k) > 0:
                raise ConfigurationError(f"{k} must be positive, got {getattr(self, k)}")

    def as_dict(self) -> dict:
        return asdict(self)


TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass
class TrainResult:
    model: Model
    config: TrainConfig
    best_epoch: int
    best_metric: float | None
    log: list[tuple[int, float, float | None]] = field(default_factory=list)
    batch_log: list[tuple[int, int, tuple[str, ...]]] = field(default_factory=list)

    def save(self, checkpoint_path, log_path=None, batch_log_path=None) -> None:
        save_model(checkpoint_path, self.model, self.config.input_mode,
                   seed=self.config.seed, epoch=self.best_epoch)
        if log_path is not None:
            write_training_log(log_path, self.log)
        if batch_log_path is not None:
            with open(batch_log_path, "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["epoch", "batch", "sample_ids"])
                for epoch, batch, ids in self.batch_log:
                    wr.writerow([epoch, batch, " ".join(sorted(set(ids)))])


def _fmt(v) -> str:
    return "NA" if v is None else repr(float(v))


def write_training_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "train_loss", "val_metric"])
        for epoch, loss, metric in log:
            wr.writerow([epoch, _fmt(loss), _fmt(metric)])


def _streams(seed: int):
    init, draw, aug, drop = np.random.SeedSequence(seed).spawn(4)
    return (int(init.generate_state(1)[0]), np.random.default_rng(draw),
            np.random.default_rng(aug), np.random.default_rng(drop))


def _lookup(samples: Mapping[str, Sample], ids) -> list[Sample]:
    try:
        return [samples[i] for i in ids]
    except KeyError as exc:
        raise ConfigurationError(f"split references unknown sample {exc}") from None


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def evaluate_mean_dice(model: Model, samples: Sequence[Sample], input_mode: str) -> float | None:
    scores = [mean_dice(s.labels, predict_labels(model, s, input_mode)) for s in samples]
    scores = [s for s in scores if s is not None]
    return float(np.mean(scores)) if scores else None


def pixel_accuracy(model: Model, samples: Sequence[Sample], input_mode: str) -> float:
    hits = total = 0
    for s in samples:
        pred = predict_labels(model, s, input_mode).values
        hits += int((pred == s.labels.values).sum())
        total += pred.size
    return hits / total


# --- training loops -------------------------------------------------------------

def train_unet(samples: Mapping[str, Sample], split: DatasetSplit, cfg: TrainConfig,
               aug_spec: AugmentSpec = AugmentSpec(), progress=None) -> TrainResult:
    """Full-image batches drawn with replacement; loss = CE + dice_weight * soft Dice.

    The returned model carries the parameters of the epoch with the best
    validation mean Dice (the last epoch when there is no validation set).
    """
    if cfg.architecture != "unet":
        raise ConfigurationError("train_unet needs architecture 'unet'")
    train = _lookup(samples, split.train)
    val = _lookup(samples, split.validation)
    if not train:
        raise ConfigurationError("empty training set")
    shapes = {s.labels.values.shape for s in train}
    if len(shapes) != 1:
        raise ConfigurationError(f"training images differ in size: {sorted(shapes)}")
    init_seed, draw_rng, aug_rng, drop_rng = _streams(cfg.seed)
    n_wl = train[0].pa.axis.count
    spec = UNetSpec(input_channels(cfg.input_mode, n_wl), base_channels=cfg.base_channels,
                    dropout=cfg.dropout, leak=cfg.leak)
    model = build_unet(spec, init_seed)
    opt = nn.Adam(model.parameters(), cfg.learning_rate)
    inputs = [sample_input(s, cfg.input_mode) for s in train]
    result = TrainResult(model, cfg, best_epoch=-1, best_metric=None)
    best_state = None
    for epoch in range(cfg.epochs):
        losses = []
        for b in range(cfg.batches_per_epoch):
            idx = draw_rng.integers(len(train), size=cfg.batch_size)
            result.batch_log.append((epoch, b, tuple(train[i].id for i in idx)))
            xs, ys = [], []
            for i in idx:
                img, lab = inputs[i], train[i].labels.values
                if cfg.augmentation:
                    img, lab = augment(img, lab, aug_spec, aug_rng)
                xs.append(img)
                ys.append(lab)
            x = Tensor(np.stack(xs))
            y = np.stack(ys).astype(np.int64)
            opt.zero_grad()
            logits = model(x, training=True, rng=drop_rng)
            loss = cross_entropy_loss(logits, y)
            if cfg.dice_weight:
                loss = loss + cfg.dice_weight * soft_dice_loss(nn.softmax_channels(logits), one_hot(y))
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        metric = evaluate_mean_dice(model, val, cfg.input_mode) if val else None
        result.log.append((epoch, float(np.mean(losses)), metric))
        if not val or (metric is not None and (result.best_metric is None or metric > result.best_metric)):
            result.best_epoch, result.best_metric, best_state = epoch, metric, _snapshot(model)
        if progress:
            progress(epoch, result.log[-1])
    model.load_state_dict(best_state)
    return result


def pixel_table(samples: Sequence[Sample], input_mode: str) -> tuple[np.ndarray, np.ndarray]:
    """All pixels of ``samples`` as (N, C) spectra and (N,) class codes."""
    xs, ys = [], []
    for s in samples:
        img = sample_input(s, input_mode)
        xs.append(img.reshape(img.shape[0], -1).T)
        ys.append(s.labels.values.ravel())
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.int64)


def train_fcnn(samples: Mapping[str, Sample], split: DatasetSplit, cfg: TrainConfig,
               progress=None) -> TrainResult:
    """Random-pixel batches across all training images, soft margin loss on one-vs-rest targets.

    Validation is scored by pixel accuracy. The batch log stores the source
    image of every drawn pixel.
    """
    if cfg.architecture != "fcnn":
        raise ConfigurationError("train_fcnn needs architecture 'fcnn'")
    check_combination("fcnn", cfg.input_mode)
    train = _lookup(samples, split.train)
    val = _lookup(samples, split.validation)
    if not train:
        raise ConfigurationError("empty training set")
    init_seed, draw_rng, _, drop_rng = _streams(cfg.seed)
    x_all, y_all = pixel_table(train, cfg.input_mode)
    owner = np.repeat(np.arange(len(train)), [s.labels.values.size for s in train])
    spec = FcnnSpec(x_all.shape[1], dropout=cfg.dropout, leak=cfg.leak)
    model = build_fcnn(spec, init_seed)
    opt = nn.Adam(model.parameters(), cfg.learning_rate)
    result = TrainResult(model, cfg, best_epoch=-1, best_metric=None)
    best_state = None
    for epoch in range(cfg.epochs):
        losses = []
        for b in range(cfg.batches_per_epoch):
            idx = draw_rng.integers(len(x_all), size=cfg.batch_size)
            result.batch_log.append((epoch, b, tuple(train[i].id for i in np.unique(owner[idx]))))
            opt.zero_grad()
            logits = model(Tensor(x_all[idx]), training=True, rng=drop_rng)
            loss = soft_margin_loss(logits, one_vs_rest(y_all[idx]))
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        metric = pixel_accuracy(model, val, cfg.input_mode) if val else None
        result.log.append((epoch, float(np.mean(losses)), metric))
        if not val or (metric is not None and (result.best_metric is None or metric > result.best_metric)):
            result.best_epoch, result.best_metric, best_state = epoch, metric, _snapshot(model)
        if progress:
            progress(epoch, result.log[-1])
    model.load_state_dict(best_state)
    return result


def train(samples: Mapping[str, Sample], split: DatasetSplit, cfg: TrainConfig, **kw) -> TrainResult:
    if cfg.architecture == "unet":
        return train_unet(samples, split, cfg, **kw)
    return train_fcnn(samples, split, cfg, **kw)
