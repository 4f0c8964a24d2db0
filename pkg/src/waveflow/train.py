"""Maximum-likelihood training with affine augmentation and early stopping.

Pyramid models train one component at a time (residue model plus each
level's flow); every component owns a seeded random stream, so runs are
bit-identical given the same data, config, and seed.  The monitored
quantity is the mean train-set NLL on clean (un-augmented, un-dequantized)
data; training stops after ``patience`` epochs without strict improvement
and the best epoch's parameters are restored.  A non-finite loss aborts
the component, retaining the best parameters seen so far.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .flows import FlowModel, FlowNumericsError
from .haar import build_pyramid
from .waveletflow import WaveletFlowModel

__all__ = [
    "AugmentConfig",
    "TrainConfig",
    "EpochRecord",
    "TrainHistory",
    "EarlyStopper",
    "sample_augment_params",
    "augment",
    "dequantize",
    "train",
]

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class AugmentConfig:
    """Uniform sampling ranges for the per-image affine warp."""

    rotation: tuple[float, float] = (-180.0, 180.0)  # degrees
    translation: tuple[float, float] = (-0.1, 0.1)  # fraction of the image size
    scaling: tuple[float, float] = (0.9, 1.1)
    shear: tuple[float, float] = (-10.0, 10.0)  # degrees, x and y independently

    def validate(self) -> None:
        for name in ("rotation", "translation", "scaling", "shear"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"augment range {name}={lo, hi} is invalid")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    dequantize: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must all be >= 1")
        if self.augment is not None:
            self.augment.validate()


@dataclass(frozen=True)
class EpochRecord:
    epoch: int  # 0 is the pre-training evaluation
    nll: float  # mean clean train-set NLL, nats
    bpd: float
    seconds: float  # wall time since this component started


@dataclass
class TrainHistory:
    records: list[EpochRecord]
    best_epoch: int = 0
    aborted: bool = False


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, nll: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        if nll < self.best:
            self.best = nll
            self.best_epoch = epoch
            self.bad = 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


def sample_augment_params(rng: np.random.Generator, config: AugmentConfig) -> dict[str, float]:
    return {
        "rotation_deg": float(rng.uniform(*config.rotation)),
        "translate_x": float(rng.uniform(*config.translation)),
        "translate_y": float(rng.uniform(*config.translation)),
        "scale": float(rng.uniform(*config.scaling)),
        "shear_x_deg": float(rng.uniform(*config.shear)),
        "shear_y_deg": float(rng.uniform(*config.shear)),
    }


def _affine_matrix(params: dict[str, float]) -> np.ndarray:
    theta = math.radians(params["rotation_deg"])
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    shear_x = np.array([[1.0, math.tan(math.radians(params["shear_x_deg"]))], [0.0, 1.0]])
    shear_y = np.array([[1.0, 0.0], [math.tan(math.radians(params["shear_y_deg"])), 1.0]])
    return rot @ shear_x @ shear_y * params["scale"]


def _warp(plane: np.ndarray, matrix: np.ndarray, tx: float, ty: float) -> np.ndarray:
    """Inverse-mapped affine warp with bilinear sampling and edge replication."""
    H, W = plane.shape
    det = matrix[0, 0] * matrix[1, 1] - matrix[0, 1] * matrix[1, 0]
    if abs(det) < 1e-12:
        raise ValueError("augmentation transform is singular")
    inv = np.array([[matrix[1, 1], -matrix[0, 1]], [-matrix[1, 0], matrix[0, 0]]]) / det
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    dx = xs - cx - tx * W
    dy = ys - cy - ty * H
    src_x = np.clip(inv[0, 0] * dx + inv[0, 1] * dy + cx, 0.0, W - 1.0)
    src_y = np.clip(inv[1, 0] * dx + inv[1, 1] * dy + cy, 0.0, H - 1.0)
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = src_x - x0
    fy = src_y - y0
    top = plane[y0, x0] * (1.0 - fx) + plane[y0, x1] * fx
    bottom = plane[y1, x0] * (1.0 - fx) + plane[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def augment(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig) -> np.ndarray:
    """One uniformly-sampled affine warp composed of rotation, translation,
    scaling, and shear, applied with bilinear interpolation."""
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    planes = image[None] if squeeze else image
    params = sample_augment_params(rng, config)
    matrix = _affine_matrix(params)
    out = np.stack(
        [_warp(p, matrix, params["translate_x"], params["translate_y"]) for p in planes]
    )
    out = np.clip(out, 0.0, 1.0)
    return out[0] if squeeze else out


def dequantize(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Spread 8-bit pixel levels over continuous bins: each k/255 value
    becomes uniform on [k/256, (k+1)/256), keeping the result inside [0, 1)."""
    image = np.asarray(image, dtype=np.float64)
    noise = rng.random(image.shape) / 256.0
    return image * (255.0 / 256.0) + noise


def _snapshot(params: list[ad.Parameter]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: list[ad.Parameter], snap: list[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p.data[...] = s


def _prepare_images(batch: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    if config.augment is None and not config.dequantize:
        return batch
    out = []
    for img in batch:
        if config.augment is not None:
            img = augment(img, rng, config.augment)
        if config.dequantize:
            img = dequantize(img, rng)
        out.append(img)
    return np.stack(out)


def _train_component(
    parameters: list[ad.Parameter],
    log_prob,
    init_hook,
    extract,
    images: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    dims: int,
) -> TrainHistory:
    """Shared loop: minimize mean NLL of ``log_prob(*extract(images))``."""
    start = time.perf_counter()

    def clean_nll() -> float:
        x, cond = extract(images)
        lp = log_prob(x, cond)
        return -float(np.mean(lp.data))

    def record(epoch: int, nll: float) -> EpochRecord:
        return EpochRecord(epoch, nll, nll / (dims * _LN2), time.perf_counter() - start)

    nll0 = clean_nll()
    history = TrainHistory(records=[record(0, nll0)])
    best_snap = _snapshot(parameters)
    stopper = EarlyStopper(config.patience)
    stopper.update(0, nll0)
    optimizer = ad.Adam(parameters, learning_rate=config.learning_rate)
    initialized = False
    n = len(images)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            batch = _prepare_images(images[order[lo : lo + config.batch_size]], rng, config)
            x, cond = extract(batch)
            if not initialized:
                init_hook(x, cond)
                initialized = True
            try:
                lp = log_prob(x, cond)
            except FlowNumericsError:
                _restore(parameters, best_snap)
                history.aborted = True
                history.best_epoch = stopper.best_epoch
                return history
            loss = ad.affine(ad.reduce_sum(lp), -1.0 / len(x))
            if not np.isfinite(loss.data):
                _restore(parameters, best_snap)
                history.aborted = True
                history.best_epoch = stopper.best_epoch
                return history
            loss.backward()
            optimizer.step()
        nll = clean_nll()
        history.records.append(record(epoch, nll))
        if not np.isfinite(nll):
            _restore(parameters, best_snap)
            history.aborted = True
            history.best_epoch = stopper.best_epoch
            return history
        improved, stop = stopper.update(epoch, nll)
        if improved:
            best_snap = _snapshot(parameters)
        if stop:
            break
    _restore(parameters, best_snap)
    history.best_epoch = stopper.best_epoch
    return history


def _component_rng(seed: int, component: int) -> np.random.Generator:
    return np.random.default_rng([seed, component])


def _pyramid_batch(images: np.ndarray, level: int | None):
    """Stack per-image pyramid pieces: a level's (details, lows) or the residues."""
    details, lows, bases = [], [], []
    for img in images:
        pyramid = build_pyramid(img)
        if level is None:
            bases.append(pyramid.base)
        else:
            piece = next(l for l in pyramid.levels if l.level_index == level)
            details.append(piece.detail)
            lows.append(piece.low)
    if level is None:
        return np.stack(bases), None
    return np.stack(details), np.stack(lows)


def train(
    model: FlowModel | WaveletFlowModel,
    images: np.ndarray,
    config: TrainConfig,
    levels: list[int] | None = None,
) -> dict[str, TrainHistory]:
    """Fit a pixel flow or a pyramid model on a stack of (1,S,S) images.

    For pyramid models each component trains independently; ``levels``
    restricts training to a subset (0 means the base residue model).
    Returns one history per component, keyed 'flow', 'base', 'level<i>'.
    """
    config.validate()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != 1:
        raise ValueError(f"expected images of shape (N,1,S,S), got {images.shape}")
    if len(images) == 0:
        raise ValueError("training set is empty")

    if isinstance(model, FlowModel):
        history = _train_component(
            parameters=model.parameters(),
            log_prob=lambda x, cond: model.log_prob_graph(x, cond),
            init_hook=lambda x, cond: model.initialize_actnorm(x, cond),
            extract=lambda imgs: (imgs, None),
            images=images,
            config=config,
            rng=_component_rng(config.seed, 1000),
            dims=int(np.prod(model.input_shape)),
        )
        return {"flow": history}

    if not isinstance(model, WaveletFlowModel):
        raise TypeError(f"cannot train a {type(model).__name__}")
    if images.shape[-1] != model.image_size:
        raise ValueError(f"images are {images.shape[-1]} px but the model expects {model.image_size}")
    wanted = set(range(0, model.depth + 1)) if levels is None else set(levels)
    unknown = wanted - set(range(0, model.depth + 1))
    if unknown:
        raise ValueError(f"unknown levels {sorted(unknown)}; model has 0..{model.depth}")
    histories: dict[str, TrainHistory] = {}
    if 0 in wanted:
        histories["base"] = _train_component(
            parameters=model.base.parameters(),
            log_prob=lambda x, cond: model.base.log_prob_graph(x),
            init_hook=lambda x, cond: None,
            extract=lambda imgs: _pyramid_batch(imgs, None),
            images=images,
            config=config,
            rng=_component_rng(config.seed, 0),
            dims=1,
        )
    for level in sorted(model.level_flows):
        if level not in wanted:
            continue
        flow = model.level_flows[level]
        histories[f"level{level}"] = _train_component(
            parameters=flow.parameters(),
            log_prob=flow.log_prob_graph,
            init_hook=flow.initialize_actnorm,
            extract=lambda imgs, lvl=level: _pyramid_batch(imgs, lvl),
            images=images,
            config=config,
            rng=_component_rng(config.seed, level),
            dims=int(np.prod(flow.input_shape)),
        )
    return histories
