"""Affine coupling flows with exact log-determinants.

The normalizing direction maps data x to latents z.  Each coupling step
leaves the pass-through partition untouched, feeds it (plus any
conditioning channels) to a three-layer 3x3 conv network, and applies
z = (x + t) * exp(s) on the transformed partition; the layer's
log-determinant is the sum of s over that partition.  Scales are bounded
to [-2, 2] with a tanh so exp can never overflow.  A model is a stack of
(activation-normalization, channel-reversal, coupling) steps, optionally
wrapped in squeeze/split scales; factored-out halves are scored against
a standard normal immediately.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .masks import Mask, make_mask

__all__ = [
    "LogDensity",
    "FlowNumericsError",
    "ActNorm",
    "ChannelReverse",
    "AffineCoupling",
    "Squeeze",
    "Split",
    "FlowModel",
    "build_glow",
    "flow_log_likelihood",
    "flow_sample",
    "coupling_parameter_count",
]

_LOG_2PI = math.log(2.0 * math.pi)
_SCALE_BOUND = 2.0


class FlowNumericsError(ArithmeticError):
    """A forward pass produced a non-finite value; carries the layer index."""

    def __init__(self, layer_index: int, message: str = ""):
        self.layer_index = layer_index
        super().__init__(message or f"non-finite values after flow layer {layer_index}")


@dataclass(frozen=True)
class LogDensity:
    """Exact log-likelihood in nats plus its bits-per-dimension form."""

    log_likelihood: float
    bits_per_dim: float
    dims: int


def _as_log_density(log_likelihood: float, dims: int) -> LogDensity:
    bpd = -float(log_likelihood) / (dims * math.log(2.0))
    return LogDensity(log_likelihood=float(log_likelihood), bits_per_dim=bpd, dims=dims)


def _sample_axes(data: np.ndarray) -> tuple[int, ...]:
    """Axes to reduce so one value remains per sample: all of (C,H,W)."""
    if data.ndim == 4:
        return (1, 2, 3)
    if data.ndim == 3:
        return (0, 1, 2)
    raise ad.ShapeError(f"expected (C,H,W) or (N,C,H,W), got {data.shape}")


def _standard_normal_logp(t: ad.Tensor) -> ad.Tensor:
    axes = _sample_axes(t.data)
    dims = int(np.prod([t.data.shape[a] for a in axes]))
    sq = ad.reduce_sum(ad.mul(t, t), axes=axes)
    return ad.affine(sq, -0.5, -0.5 * _LOG_2PI * dims)


class ActNorm:
    """Per-channel affine with data-dependent initialization.

    Starts as the identity; ``initialize`` sets offset/scale so the init
    batch has per-channel zero mean and unit variance.  A zero-variance
    channel keeps scale 1 and leaves a note in ``warnings``.
    """

    def __init__(self, channels: int, name: str = "actnorm"):
        self.channels = channels
        self.scale = ad.Parameter(f"{name}.scale", np.ones(channels))
        self.offset = ad.Parameter(f"{name}.offset", np.zeros(channels))
        self.initialized = False
        self.warnings: list[str] = []

    def parameters(self) -> list[ad.Parameter]:
        return [self.scale, self.offset]

    def initialize(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 3:
            batch = batch[None]
        axes = (0, 2, 3)
        mean = batch.mean(axis=axes)
        std = batch.std(axis=axes)
        scale = np.empty_like(std)
        for c in range(self.channels):
            if std[c] < 1e-12:
                scale[c] = 1.0
                self.warnings.append(
                    f"{self.scale.name}: channel {c} has zero variance at init; scale clamped to 1"
                )
            else:
                scale[c] = 1.0 / std[c]
        self.offset.data[...] = mean
        self.scale.data[...] = scale
        self.initialized = True

    def forward(self, t: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        z = ad.channel_affine(t, self.scale, self.offset)
        hw = t.data.shape[-2] * t.data.shape[-1]
        logdet = ad.affine(ad.reduce_sum(ad.log_abs(self.scale)), float(hw))
        return z, logdet

    def inverse(self, z: np.ndarray) -> tuple[np.ndarray, float]:
        view = (self.channels, 1, 1)
        x = z / self.scale.data.reshape(view) + self.offset.data.reshape(view)
        hw = z.shape[-2] * z.shape[-1]
        logdet_gen = -float(hw * np.sum(np.log(np.abs(self.scale.data))))
        return x, logdet_gen


class ChannelReverse:
    """Fixed channel-order reversal between coupling steps (volume free)."""

    def parameters(self) -> list[ad.Parameter]:
        return []

    def forward(self, t: ad.Tensor) -> ad.Tensor:
        return ad.reverse_channels(t)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.flip(z, axis=z.ndim - 3).copy()


class AffineCoupling:
    """Masked affine coupling driven by a three-layer 3x3 conv network."""

    def __init__(
        self,
        mask: Mask,
        cond_channels: int,
        hidden: int,
        rng: np.random.Generator,
        name: str = "coupling",
    ):
        self.mask = mask
        self.cond_channels = cond_channels
        self.hidden = hidden
        C = mask.values.shape[0]
        self.channels = C
        c_in = C + cond_channels
        he1 = math.sqrt(2.0 / (9.0 * c_in))
        he2 = math.sqrt(2.0 / (9.0 * hidden))
        self.w1 = ad.Parameter(f"{name}.w1", rng.normal(0.0, he1, size=(hidden, c_in, 3, 3)))
        self.b1 = ad.Parameter(f"{name}.b1", np.zeros(hidden))
        self.w2 = ad.Parameter(f"{name}.w2", rng.normal(0.0, he2, size=(hidden, hidden, 3, 3)))
        self.b2 = ad.Parameter(f"{name}.b2", np.zeros(hidden))
        # Zero-initialized head: the fresh layer is exactly the identity.
        self.w3 = ad.Parameter(f"{name}.w3", np.zeros((2 * C, hidden, 3, 3)))
        self.b3 = ad.Parameter(f"{name}.b3", np.zeros(2 * C))

    def parameters(self) -> list[ad.Parameter]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def _mask_tensors(self, shape: tuple[int, ...]) -> tuple[ad.Tensor, ad.Tensor]:
        m = np.broadcast_to(self.mask.values, shape)
        return ad.Tensor(m), ad.Tensor(1.0 - m)

    def _scale_translation(self, u: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        h = ad.relu(ad.conv2d(u, self.w1, self.b1))
        h = ad.relu(ad.conv2d(h, self.w2, self.b2))
        out = ad.conv2d(h, self.w3, self.b3)
        s_raw = ad.slice_channels(out, 0, self.channels)
        t = ad.slice_channels(out, self.channels, 2 * self.channels)
        s = ad.affine(ad.tanh(s_raw), _SCALE_BOUND)  # bounded before exp
        return s, t

    def _net_input(self, passthrough: ad.Tensor, cond: ad.Tensor | None) -> ad.Tensor:
        if self.cond_channels:
            if cond is None:
                raise ValueError("coupling layer built with conditioning but no condition given")
            return ad.concat_channels([passthrough, cond])
        return passthrough

    def forward(self, t: ad.Tensor, cond: ad.Tensor | None = None) -> tuple[ad.Tensor, ad.Tensor]:
        m, m_inv = self._mask_tensors(t.data.shape)
        passthrough = ad.mul(t, m)
        s, trans = self._scale_translation(self._net_input(passthrough, cond))
        moved = ad.mul(ad.mul(ad.add(t, trans), ad.exp(s)), m_inv)
        z = ad.add(passthrough, moved)
        logdet = ad.reduce_sum(ad.mul(s, m_inv), axes=_sample_axes(t.data))
        return z, logdet

    def inverse(self, z: np.ndarray, cond: np.ndarray | None = None) -> tuple[np.ndarray, float | np.ndarray]:
        m = np.broadcast_to(self.mask.values, z.shape)
        passthrough = z * m
        cond_t = ad.Tensor(cond) if cond is not None else None
        s, trans = self._scale_translation(self._net_input(ad.Tensor(passthrough), cond_t))
        sd, td = s.data, trans.data
        x = passthrough + (1.0 - m) * (z * np.exp(-sd) - td)
        logdet_gen = -np.sum(sd * (1.0 - m), axis=_sample_axes(z))
        return x, logdet_gen


class Squeeze:
    """Space-to-depth rearrangement: (C, 2h, 2w) -> (4C, h, w)."""

    def parameters(self) -> list[ad.Parameter]:
        return []

    def forward(self, t: ad.Tensor) -> ad.Tensor:
        return ad.squeeze2x2(t)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return ad.unsqueeze2x2_array(z)


class Split:
    """Halve the channels; the second half is scored against N(0, I) now."""

    def parameters(self) -> list[ad.Parameter]:
        return []

    def forward(self, t: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        C = t.data.shape[-3]
        half = C // 2
        return ad.slice_channels(t, 0, half), ad.slice_channels(t, half, C)

    def inverse(self, kept: np.ndarray, factored: np.ndarray) -> np.ndarray:
        return np.concatenate([kept, factored], axis=kept.ndim - 3)


class FlowModel:
    """A stack of bijectors mapping images to unit-normal latents.

    ``latent_shapes`` lists every factored-out latent in the order it is
    produced, with the final latent last; their dimensions always sum to
    the input dimension.
    """

    def __init__(
        self,
        input_shape: tuple[int, int, int],
        bijectors: list,
        latent_shapes: list[tuple[int, int, int]],
        cond_channels: int = 0,
        mask_strategy: str = "",
        K: int = 0,
        L: int = 1,
        hidden: int = 0,
    ):
        self.input_shape = tuple(input_shape)
        self.bijectors = bijectors
        self.latent_shapes = [tuple(s) for s in latent_shapes]
        self.cond_channels = cond_channels
        self.mask_strategy = mask_strategy
        self.K = K
        self.L = L
        self.hidden = hidden
        # Number of squeezes applied before each bijector runs; used to
        # bring conditioning inputs to the right resolution on both paths.
        self.squeeze_depth: list[int] = []
        depth = 0
        for b in bijectors:
            self.squeeze_depth.append(depth)
            if isinstance(b, Squeeze):
                depth += 1
        assert sum(int(np.prod(s)) for s in self.latent_shapes) == int(np.prod(self.input_shape))

    def parameters(self) -> list[ad.Parameter]:
        params: list[ad.Parameter] = []
        for b in self.bijectors:
            params.extend(b.parameters())
        return params

    def actnorm_layers(self) -> list[ActNorm]:
        return [b for b in self.bijectors if isinstance(b, ActNorm)]

    def initialize_actnorm(self, batch: np.ndarray, cond: np.ndarray | None = None) -> None:
        """Data-dependent init: run the batch through, initializing each
        activation-normalization layer on its own input."""
        t, cond_levels = self._prepare(batch, cond)
        for idx, b in enumerate(self.bijectors):
            if isinstance(b, ActNorm) and not b.initialized:
                b.initialize(t.data)
            t = self._apply_forward(idx, b, t, cond_levels)[0]

    def _prepare(self, x: np.ndarray, cond: np.ndarray | None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (3, 4):
            raise ad.ShapeError(f"flow input must be (C,H,W) or (N,C,H,W), got {x.shape}")
        if x.shape[-3:] != self.input_shape:
            raise ad.ShapeError(f"flow input shape {x.shape[-3:]} != model shape {self.input_shape}")
        cond_levels: dict[int, np.ndarray] | None = None
        if self.cond_channels:
            if cond is None:
                raise ValueError("model is conditional but no condition was given")
            cond = np.asarray(cond, dtype=np.float64)
            if x.ndim == 4 and cond.ndim == 3:
                cond = np.broadcast_to(cond, (x.shape[0],) + cond.shape)
            cur = cond
            cond_levels = {0: cur}
            for d in range(1, max(self.squeeze_depth, default=0) + 1):
                cur = ad.squeeze2x2_array(cur)
                cond_levels[d] = cur
        return ad.Tensor(x), cond_levels

    def _apply_forward(self, idx, bij, t, cond_levels):
        """Returns (next tensor, logdet or None, factored or None)."""
        if isinstance(bij, AffineCoupling):
            cond_t = None
            if cond_levels is not None:
                cond_t = ad.Tensor(cond_levels[self.squeeze_depth[idx]])
            z, ld = bij.forward(t, cond_t)
            return z, ld, None
        if isinstance(bij, ActNorm):
            z, ld = bij.forward(t)
            return z, ld, None
        if isinstance(bij, Split):
            kept, factored = bij.forward(t)
            return kept, None, factored
        return bij.forward(t), None, None

    def forward_latents(self, x: np.ndarray, cond: np.ndarray | None = None):
        """Normalizing pass: returns (latents, total logdet) as graph tensors."""
        t, cond_levels = self._prepare(x, cond)
        logdet: ad.Tensor = ad.Tensor(np.zeros(()))
        latents: list[ad.Tensor] = []
        for idx, bij in enumerate(self.bijectors):
            t, ld, factored = self._apply_forward(idx, bij, t, cond_levels)
            if ld is not None:
                logdet = ad.add(logdet, ld)
            if factored is not None:
                latents.append(factored)
            if not np.all(np.isfinite(t.data)):
                raise FlowNumericsError(idx)
        latents.append(t)
        return latents, logdet

    def log_prob_graph(self, x: np.ndarray, cond: np.ndarray | None = None) -> ad.Tensor:
        """Per-sample log p(x) as a differentiable tensor: () or (N,)."""
        latents, logdet = self.forward_latents(x, cond)
        total = logdet
        for z in latents:
            total = ad.add(total, _standard_normal_logp(z))
        return total

    def log_density(self, x: np.ndarray, cond: np.ndarray | None = None) -> LogDensity:
        lp = self.log_prob_graph(x, cond)
        if lp.data.ndim != 0:
            raise ad.ShapeError("log_density scores one image; use log_prob_graph for batches")
        return _as_log_density(lp.item(), int(np.prod(self.input_shape)))

    def inverse_from_latents(
        self, latents: list[np.ndarray], cond: np.ndarray | None = None
    ) -> tuple[np.ndarray, float | np.ndarray]:
        """Generative pass; also returns its own (generative) logdet."""
        if len(latents) != len(self.latent_shapes):
            raise ValueError(f"expected {len(self.latent_shapes)} latents, got {len(latents)}")
        for z, shape in zip(latents, self.latent_shapes):
            if tuple(np.asarray(z).shape[-3:]) != shape:
                raise ad.ShapeError(f"latent shape {np.asarray(z).shape} != expected {shape}")
        cond_levels = None
        if self.cond_channels:
            if cond is None:
                raise ValueError("model is conditional but no condition was given")
            cond = np.asarray(cond, dtype=np.float64)
            if np.asarray(latents[-1]).ndim == 4 and cond.ndim == 3:
                cond = np.broadcast_to(cond, (np.asarray(latents[-1]).shape[0],) + cond.shape)
            cur = cond
            cond_levels = {0: cur}
            for d in range(1, max(self.squeeze_depth, default=0) + 1):
                cur = ad.squeeze2x2_array(cur)
                cond_levels[d] = cur
        t = np.asarray(latents[-1], dtype=np.float64)
        pending = len(latents) - 2  # next factored latent to consume
        logdet_gen: float | np.ndarray = 0.0
        for idx in range(len(self.bijectors) - 1, -1, -1):
            bij = self.bijectors[idx]
            if isinstance(bij, Split):
                t = bij.inverse(t, np.asarray(latents[pending], dtype=np.float64))
                pending -= 1
            elif isinstance(bij, AffineCoupling):
                c = cond_levels[self.squeeze_depth[idx]] if cond_levels is not None else None
                t, ld = bij.inverse(t, c)
                logdet_gen = logdet_gen + ld
            elif isinstance(bij, ActNorm):
                t, ld = bij.inverse(t)
                logdet_gen = logdet_gen + ld
            else:
                t = bij.inverse(t)
        return t, logdet_gen

    def sample(
        self,
        rng: np.random.Generator,
        temperature: float = 1.0,
        cond: np.ndarray | None = None,
        return_latents: bool = False,
    ):
        if temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        latents = [temperature * rng.standard_normal(shape) for shape in self.latent_shapes]
        x, _ = self.inverse_from_latents(latents, cond)
        if return_latents:
            return x, latents
        return x


def build_glow(
    K: int,
    L: int,
    in_channels: int,
    image_size: int,
    cond_channels: int = 0,
    mask_strategy: str = "channel-half",
    hidden: int = 256,
    seed: int = 0,
) -> FlowModel:
    """Assemble L scales of K (actnorm, reversal, coupling) steps.

    With L > 1 every scale starts with a squeeze and all but the last end
    with a split; with L == 1 neither happens.  Coupling masks follow
    ``mask_strategy`` with a running step index so consecutive steps
    alternate.
    """
    if K < 1 or L < 1:
        raise ValueError(f"K and L must be >= 1, got K={K}, L={L}")
    rng = np.random.default_rng(seed)
    C, H, W = in_channels, image_size, image_size
    bijectors: list = []
    latent_shapes: list[tuple[int, int, int]] = []
    step = 0
    for scale in range(L):
        if L > 1:
            if H % 2 or W % 2 or H < 2 or W < 2:
                raise ValueError(
                    f"spatial size {H}x{W} too small to squeeze at scale {scale + 1} of {L}"
                )
            bijectors.append(Squeeze())
            C, H, W = 4 * C, H // 2, W // 2
        cond_here = cond_channels * (4 ** sum(isinstance(b, Squeeze) for b in bijectors))
        for _ in range(K):
            bijectors.append(ActNorm(C, name=f"scale{scale}.step{step}.actnorm"))
            bijectors.append(ChannelReverse())
            mask = make_mask(mask_strategy, step, (C, H, W))
            bijectors.append(
                AffineCoupling(mask, cond_here, hidden, rng, name=f"scale{scale}.step{step}.coupling")
            )
            step += 1
        if scale < L - 1:
            if C < 2:
                raise ValueError(f"cannot split {C} channels at scale {scale + 1}")
            bijectors.append(Split())
            half = C // 2
            latent_shapes.append((C - half, H, W))
            C = half
    latent_shapes.append((C, H, W))
    return FlowModel(
        input_shape=(in_channels, image_size, image_size),
        bijectors=bijectors,
        latent_shapes=latent_shapes,
        cond_channels=cond_channels,
        mask_strategy=mask_strategy,
        K=K,
        L=L,
        hidden=hidden,
    )


def flow_log_likelihood(model: FlowModel, x: np.ndarray, cond: np.ndarray | None = None) -> LogDensity:
    """Exact change-of-variables likelihood of one image."""
    return model.log_density(x, cond)


def flow_sample(
    model: FlowModel,
    rng: np.random.Generator,
    temperature: float = 1.0,
    cond: np.ndarray | None = None,
) -> np.ndarray:
    """Draw latents at the given temperature and run the generative pass."""
    return model.sample(rng, temperature, cond)


def coupling_parameter_count(model) -> int:
    """Total parameter entries across all coupling networks of a model."""
    total = 0
    for b in getattr(model, "bijectors", []):
        if isinstance(b, AffineCoupling):
            total += sum(p.data.size for p in b.parameters())
    for sub in getattr(model, "level_flows", {}).values():
        total += coupling_parameter_count(sub)
    return total
