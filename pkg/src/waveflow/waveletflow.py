"""Per-scale conditional flows over a Haar pyramid.

The joint density of an image factorizes as the base-residue density
times, per level, the density of that level's detail coefficients
conditioned on its low-pass.  Each factor is a single-scale coupling
flow (no squeeze/split inside a level); the 1x1 residue gets a Gaussian
with learned mean and variance.  The OOD score of an image is the mean
bits-per-dimension over the levels whose detail grids are at least 4x4:
coarser levels stay in the report for diagnostics but are too small to
score reliably.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .flows import FlowModel, LogDensity, build_glow, _as_log_density
from .haar import HaarLevel, HaarPyramid, build_pyramid, haar_inverse

__all__ = [
    "MIN_SCORING_SIZE",
    "GaussianBase",
    "LikelihoodReport",
    "WaveletFlowModel",
    "build_waveletflow",
    "level_log_density",
    "score_image",
    "wf_sample",
]

_LOG_2PI = math.log(2.0 * math.pi)

# Detail grids smaller than this are excluded from the averaged score.
MIN_SCORING_SIZE = 4


class GaussianBase:
    """Gaussian with learned mean and log-std for the 1x1 pyramid residue."""

    def __init__(self, name: str = "base"):
        self.shape = (1, 1, 1)
        self.mean = ad.Parameter(f"{name}.mean", np.zeros(self.shape))
        self.log_std = ad.Parameter(f"{name}.log_std", np.zeros(self.shape))

    def parameters(self) -> list[ad.Parameter]:
        return [self.mean, self.log_std]

    def log_prob_graph(self, x: np.ndarray) -> ad.Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-3:] != self.shape:
            raise ad.ShapeError(f"base expects trailing shape {self.shape}, got {x.shape}")
        # The single-element parameters broadcast as scalars over a batch.
        z = ad.mul(ad.sub(ad.Tensor(x), self.mean), ad.exp(ad.neg(self.log_std)))
        axes = (1, 2, 3) if x.ndim == 4 else (0, 1, 2)
        sq = ad.reduce_sum(ad.mul(z, z), axes=axes)
        return ad.sub(ad.affine(sq, -0.5, -0.5 * _LOG_2PI), ad.reduce_sum(self.log_std))

    def log_density(self, x: np.ndarray) -> LogDensity:
        lp = self.log_prob_graph(x)
        return _as_log_density(lp.item(), 1)

    def sample(self, rng: np.random.Generator, temperature: float = 1.0) -> np.ndarray:
        if temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        std = float(np.exp(self.log_std.data.reshape(())))
        return self.mean.data + temperature * std * rng.standard_normal(self.shape)


@dataclass(frozen=True)
class LikelihoodReport:
    """Per-level bits/dim (key 0 is the base residue) and the averaged score."""

    per_level_bpd: dict[int, float]
    scoring_levels: tuple[int, ...]
    score: float


class WaveletFlowModel:
    """One conditional coupling flow per pyramid level plus the residue model."""

    def __init__(
        self,
        image_size: int,
        level_flows: dict[int, FlowModel],
        base: GaussianBase,
        mask_strategy: str,
        hidden: int,
        steps_per_level: dict[int, int],
    ):
        self.image_size = image_size
        self.depth = int(math.log2(image_size))
        self.level_flows = level_flows
        self.base = base
        self.mask_strategy = mask_strategy
        self.hidden = hidden
        self.steps_per_level = dict(steps_per_level)

    def parameters(self) -> list[ad.Parameter]:
        params = list(self.base.parameters())
        for level in sorted(self.level_flows):
            params.extend(self.level_flows[level].parameters())
        return params

    def level_size(self, level: int) -> int:
        """Detail grid size of a level (coarsest level is 1)."""
        return self.image_size >> (self.depth - level + 1)

    def scoring_levels(self) -> tuple[int, ...]:
        return tuple(
            level for level in sorted(self.level_flows) if self.level_size(level) >= MIN_SCORING_SIZE
        )

    def level_inputs(self, image: np.ndarray) -> tuple[dict[int, tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Decompose an image into per-level (detail, low-pass) pairs.

        This is the exact pyramid the scorer consumes, exposed so callers
        can verify the coefficients against the wavelet module directly.
        """
        pyramid = build_pyramid(np.asarray(image, dtype=np.float64))
        pairs = {lvl.level_index: (lvl.detail, lvl.low) for lvl in pyramid.levels}
        return pairs, pyramid.base

    def score(self, image: np.ndarray) -> LikelihoodReport:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (1, self.image_size, self.image_size):
            raise ValueError(
                f"expected image of shape (1, {self.image_size}, {self.image_size}), got {image.shape}"
            )
        if image.min() < 0.0 or image.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        pairs, base_value = self.level_inputs(image)
        per_level: dict[int, float] = {0: self.base.log_density(base_value).bits_per_dim}
        for level, (detail, low) in pairs.items():
            per_level[level] = self.level_flows[level].log_density(detail, low).bits_per_dim
        scoring = self.scoring_levels()
        if not scoring:
            raise ValueError(
                f"no level of size >= {MIN_SCORING_SIZE} to score; image size {self.image_size} is too small"
            )
        score = float(np.mean([per_level[level] for level in scoring]))
        return LikelihoodReport(per_level_bpd=per_level, scoring_levels=scoring, score=score)

    def sample(self, rng: np.random.Generator, temperature: float = 1.0) -> np.ndarray:
        """Coarse-to-fine generation; the result is clipped to the image range."""
        if temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        low = self.base.sample(rng, temperature)
        for level in sorted(self.level_flows):
            detail = self.level_flows[level].sample(rng, temperature, cond=low)
            low = haar_inverse(HaarLevel(low=low, detail=detail, level_index=level))
        return np.clip(low, 0.0, 1.0)


def build_waveletflow(
    image_size: int,
    steps_per_level: int | dict[int, int] = 2,
    mask_strategy: str = "channel-half",
    hidden: int = 256,
    seed: int = 0,
) -> WaveletFlowModel:
    """Full-depth pyramid model for a square power-of-two image size."""
    if image_size < 4 or (image_size & (image_size - 1)) != 0:
        raise ValueError(f"image size must be a power of two >= 4, got {image_size}")
    depth = int(math.log2(image_size))
    if isinstance(steps_per_level, int):
        steps = {level: steps_per_level for level in range(1, depth + 1)}
    else:
        steps = dict(steps_per_level)
        missing = set(range(1, depth + 1)) - set(steps)
        if missing:
            raise ValueError(f"steps_per_level missing levels {sorted(missing)}")
    level_flows: dict[int, FlowModel] = {}
    for level in range(1, depth + 1):
        size = image_size >> (depth - level + 1)
        level_flows[level] = build_glow(
            K=steps[level],
            L=1,
            in_channels=3,
            image_size=size,
            cond_channels=1,
            mask_strategy=mask_strategy,
            hidden=hidden,
            seed=seed + level,
        )
    return WaveletFlowModel(
        image_size=image_size,
        level_flows=level_flows,
        base=GaussianBase(),
        mask_strategy=mask_strategy,
        hidden=hidden,
        steps_per_level=steps,
    )


def level_log_density(model: WaveletFlowModel, level: int, detail: np.ndarray, low: np.ndarray) -> LogDensity:
    """Exact conditional likelihood of one level's detail coefficients."""
    if level not in model.level_flows:
        raise ValueError(f"unknown level {level}; model has levels {sorted(model.level_flows)}")
    return model.level_flows[level].log_density(detail, low)


def score_image(model: WaveletFlowModel, image: np.ndarray) -> LikelihoodReport:
    return model.score(image)


def wf_sample(model: WaveletFlowModel, rng: np.random.Generator, temperature: float = 1.0) -> np.ndarray:
    return model.sample(rng, temperature)
