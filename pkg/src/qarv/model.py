"""Hierarchical variable-rate VAE model.

The encoder extracts a feature pyramid (fine to coarse); the decode path
starts from a learned constant bias at the coarsest resolution and walks
coarse to fine through latent variable blocks and sub-pixel upsamplers.
Each latent block owns a posterior branch (three residual blocks, a fusion
with the top-down feature, two convolutions -> mu) and a lightweight prior
branch (a single convolution -> mu_hat, sigma_hat), so decoding only ever
touches the prior branch and the sampled/decoded z.

Rate conditioning: a positive trade-off weight lambda is log-scaled,
sinusoidally embedded and passed through a two-layer MLP; every residual
block consumes the embedding through an adaptive affine transform whose
projection is zero-initialized, which makes the whole network exactly
lambda-invariant at initialization.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Parameter, Tensor, check_finite, concat, no_grad
from .gaussian import BoxedGaussian, UniformPosterior, clamp_sigma
from .nn import (Conv2d, DepthwiseConv2d, Linear, Module, gelu, group_norm,
                 group_size_for, instance_norm, layer_norm, pixel_shuffle_up)

BLOCK_CONFIGS = ("A", "B", "C")
NORM_TYPES = ("layer", "group", "instance")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; serialized into checkpoints and hashed."""

    divisors: tuple[int, ...] = (16, 8, 4)          # coarse -> fine
    latent_channels: tuple[int, ...] = (8, 8, 8)
    block_repeats: tuple[int, ...] = (1, 1, 2)
    feature_channels: tuple[int, ...] = (48, 32, 24)
    enc_blocks: int = 2
    posterior_blocks: int = 3
    expansion: int = 2
    block_config: str = "C"
    norm_type: str = "layer"
    affine_position: int = 2
    conditional: bool = True
    lambda_low: float = 16.0
    lambda_high: float = 2048.0
    embed_freqs: int = 8
    embed_hidden: int = 64
    embed_dim: int = 64

    def __post_init__(self):
        n = len(self.divisors)
        if not (len(self.latent_channels) == len(self.block_repeats)
                == len(self.feature_channels) == n and n >= 1):
            raise ModelError("ladder field lengths disagree")
        for d in self.divisors:
            if d < 1 or (d & (d - 1)) != 0:
                raise ModelError(f"divisor {d} is not a power of two")
        # repeated blocks at one resolution belong in block_repeats, so the
        # divisor list itself must strictly descend from the maximum
        if any(nxt >= prev for prev, nxt in zip(self.divisors, self.divisors[1:])):
            raise ModelError("divisors must strictly decrease along the decode path")
        if self.block_config not in BLOCK_CONFIGS:
            raise ModelError(f"unknown block config {self.block_config!r}")
        if self.norm_type not in NORM_TYPES:
            raise ModelError(f"unknown norm type {self.norm_type!r}")
        if self.affine_position not in range(5):
            raise ModelError("affine position must be in 0..4")
        if not (0 < self.lambda_low < self.lambda_high):
            raise ModelError("need 0 < lambda_low < lambda_high")

    @property
    def max_downsample(self) -> int:
        return self.divisors[0]

    @property
    def num_latents(self) -> int:
        return int(sum(self.block_repeats))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        fields = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in raw.items():
            if key not in fields:
                raise ModelError(f"unknown config field {key!r}")
            kwargs[key] = tuple(val) if isinstance(val, list) else val
        return cls(**kwargs)

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.to_json().encode("utf-8")).digest()[:8]


PRESETS: dict[str, ModelConfig] = {
    # CPU-friendly default, minutes-scale training on small crops
    "qarv-tiny": ModelConfig(),
    # ladder shaped like the full-scale model (9 latents, 64x max
    # downsampling); channel widths here are not tuned for quality
    "qarv-wide": ModelConfig(
        divisors=(64, 32, 16, 8),
        latent_channels=(16, 16, 16, 16),
        block_repeats=(1, 2, 3, 3),
        feature_channels=(128, 96, 72, 48),
        enc_blocks=3,
        embed_freqs=32,
        embed_hidden=256,
        embed_dim=256,
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ModelError(f"unknown preset {name!r}; have {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# conditioning


class LambdaEmbedding(Module):
    """ln(lambda) -> sinusoidal features -> 2-layer MLP -> embedding vector."""

    def __init__(self, cfg: ModelConfig, *, rng, dtype):
        k = cfg.embed_freqs
        # geometric frequency ladder from 1 to 1e4
        self.omegas = np.power(10.0, np.linspace(0.0, 4.0, k)).astype(np.float64)
        self.fc1 = Linear(2 * k, cfg.embed_hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(cfg.embed_hidden, cfg.embed_dim, rng=rng, dtype=dtype)
        self._dtype = dtype

    def features(self, lam) -> np.ndarray:
        lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
        if np.any(lam <= 0):
            raise ModelError("lambda must be positive")
        t = np.log(lam)[:, None] / self.omegas[None, :]
        return np.concatenate([np.sin(t), np.cos(t)], axis=1).astype(self._dtype)

    def __call__(self, lam) -> Tensor:
        h = gelu(self.fc1(Tensor(self.features(lam))))
        return self.fc2(h)


class AdaptiveAffine(Module):
    """Channelwise y = x * (1 + s(e)) + b(e); projection is zero-initialized."""

    def __init__(self, channels: int, embed_dim: int, *, rng, dtype):
        self.channels = channels
        self.proj = Linear(embed_dim, 2 * channels, zero_init=True, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, e: Tensor) -> Tensor:
        c = self.channels
        sb = self.proj(e)
        s = sb[:, :c].reshape(sb.shape[0], c, 1, 1)
        b = sb[:, c:].reshape(sb.shape[0], c, 1, 1)
        return x * (1.0 + s) + b


def _bare_norm(x: Tensor, kind: str, channels: int) -> Tensor:
    if kind == "layer":
        return layer_norm(x)
    if kind == "instance":
        return instance_norm(x)
    if kind == "group":
        return group_norm(x, channels // group_size_for(channels))
    raise ModelError(f"unknown norm type {kind!r}")


class PlainNorm(Module):
    """Normalization with its own learned channelwise affine."""

    def __init__(self, channels: int, kind: str, *, dtype):
        self.kind = kind
        self.channels = channels
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        h = _bare_norm(x, self.kind, self.channels)
        c = self.channels
        return h * self.weight.reshape(1, c, 1, 1) + self.bias.reshape(1, c, 1, 1)


class AdaLN(Module):
    """Normalization whose affine scale/shift come from the rate embedding."""

    def __init__(self, channels: int, embed_dim: int, kind: str = "layer", *, rng, dtype):
        self.kind = kind
        self.channels = channels
        self.affine = AdaptiveAffine(channels, embed_dim, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, e: Tensor) -> Tensor:
        return self.affine(_bare_norm(x, self.kind, self.channels), e)


class ResidualBlock(Module):
    """Depthwise 7x7 -> norm -> pointwise MLP, with a skip connection.

    The adaptive affine sits at one of five sites: 0 block input, 1 after
    the depthwise convolution, 2 replacing the norm's affine, 3 after the
    activation, 4 after the final pointwise layer.  The last pointwise is
    zero-initialized so the block is the identity at init.
    """

    def __init__(self, channels: int, cfg: ModelConfig, *, rng, dtype):
        self.position = cfg.affine_position if cfg.conditional else -1
        mid = channels * cfg.expansion
        self.dw = DepthwiseConv2d(channels, 7, padding=3, rng=rng, dtype=dtype)
        if self.position == 2:
            self.norm = AdaLN(channels, cfg.embed_dim, cfg.norm_type, rng=rng, dtype=dtype)
        else:
            self.norm = PlainNorm(channels, cfg.norm_type, dtype=dtype)
            if cfg.conditional:
                width = mid if self.position == 3 else channels
                self.site_affine = AdaptiveAffine(width, cfg.embed_dim, rng=rng, dtype=dtype)
        self.pw1 = Conv2d(channels, mid, 1, rng=rng, dtype=dtype)
        self.pw2 = Conv2d(mid, channels, 1, zero_init=True, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, e: Optional[Tensor]) -> Tensor:
        pos = self.position
        h = x
        if pos == 0:
            h = self.site_affine(h, e)
        h = self.dw(h)
        if pos == 1:
            h = self.site_affine(h, e)
        h = self.norm(h, e) if pos == 2 else self.norm(h)
        h = gelu(self.pw1(h))
        if pos == 3:
            h = self.site_affine(h, e)
        h = self.pw2(h)
        if pos == 4:
            h = self.site_affine(h, e)
        return x + h


# ---------------------------------------------------------------------------
# encoder / decode-path components


class Downsample(Module):
    """Residual block followed by a patch-embedding (stride = kernel) conv."""

    def __init__(self, cin: int, cout: int, factor: int, cfg: ModelConfig, *, rng, dtype):
        self.res = ResidualBlock(cin, cfg, rng=rng, dtype=dtype)
        self.embed = Conv2d(cin, cout, factor, stride=factor, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, e) -> Tensor:
        return self.embed(self.res(x, e))


class Upsample(Module):
    """1x1 conv + pixel shuffle, sandwiched between residual blocks."""

    def __init__(self, cin: int, cout: int, factor: int, cfg: ModelConfig, *, rng, dtype):
        self.factor = factor
        self.res_in = ResidualBlock(cin, cfg, rng=rng, dtype=dtype)
        self.conv = Conv2d(cin, cout * factor * factor, 1, rng=rng, dtype=dtype)
        self.res_out = ResidualBlock(cout, cfg, rng=rng, dtype=dtype)

    def __call__(self, f: Tensor, e) -> Tensor:
        h = pixel_shuffle_up(self.conv(self.res_in(f, e)), self.factor)
        return self.res_out(h, e)


class Encoder(Module):
    """Patch-embed stem plus per-resolution residual stages, fine to coarse."""

    def __init__(self, cfg: ModelConfig, *, rng, dtype):
        self.cfg = cfg
        fine_to_coarse = list(reversed(range(len(cfg.divisors))))
        self.order = fine_to_coarse
        finest = cfg.divisors[-1]
        self.stem = Conv2d(3, cfg.feature_channels[-1], finest, stride=finest,
                           rng=rng, dtype=dtype)
        self.stages = []
        self.downs = []
        for pos, idx in enumerate(fine_to_coarse):
            ch = cfg.feature_channels[idx]
            self.stages.append([ResidualBlock(ch, cfg, rng=rng, dtype=dtype)
                                for _ in range(cfg.enc_blocks)])
            if pos + 1 < len(fine_to_coarse):
                nxt = fine_to_coarse[pos + 1]
                factor = cfg.divisors[nxt] // cfg.divisors[idx]
                self.downs.append(Downsample(ch, cfg.feature_channels[nxt], factor,
                                             cfg, rng=rng, dtype=dtype))

    def __call__(self, x: Tensor, e) -> dict[int, Tensor]:
        cfg = self.cfg
        n, c, h, w = x.shape
        d = cfg.max_downsample
        if h % d or w % d:
            raise ModelError(f"input {h}x{w} not divisible by {d}; pad first")
        feats: dict[int, Tensor] = {}
        f = self.stem(x)
        for pos, idx in enumerate(self.order):
            for block in self.stages[pos]:
                f = block(f, e)
            feats[cfg.divisors[idx]] = f
            if pos < len(self.downs):
                f = self.downs[pos](f, e)
        return feats


class LatentBlock(Module):
    """One stochastic layer: posterior mu, prior (mu_hat, sigma_hat), and the
    aggregation of z into the top-down feature."""

    def __init__(self, index: int, divisor: int, feat_ch: int, zdim: int,
                 cfg: ModelConfig, *, rng, dtype):
        self.index = index
        self.divisor = divisor
        self.zdim = zdim
        self.block_config = cfg.block_config
        self.post_res = [ResidualBlock(feat_ch, cfg, rng=rng, dtype=dtype)
                         for _ in range(cfg.posterior_blocks)]
        post_in = feat_ch if cfg.block_config == "A" else 2 * feat_ch
        self.post_conv1 = Conv2d(post_in, feat_ch, 3, padding=1, rng=rng, dtype=dtype)
        self.post_conv2 = Conv2d(feat_ch, zdim, 3, padding=1, rng=rng, dtype=dtype)
        # zero-init keeps the initial prior at mu_hat = 0, sigma_hat = 1
        self.prior_conv = Conv2d(feat_ch, 2 * zdim, 3, padding=1, zero_init=True,
                                 rng=rng, dtype=dtype)
        self.z_proj = Conv2d(zdim, feat_ch, 1, rng=rng, dtype=dtype)
        if cfg.block_config in ("A", "B"):
            self.merge = Conv2d(2 * feat_ch, feat_ch, 1, rng=rng, dtype=dtype)
        self.out_res = ResidualBlock(feat_ch, cfg, rng=rng, dtype=dtype)

    def posterior_mu(self, enc_feat: Tensor, f: Tensor, e) -> Tensor:
        h = enc_feat
        for block in self.post_res:
            h = block(h, e)
        if self.block_config != "A":
            if h.shape[2:] != f.shape[2:]:
                raise ModelError(f"latent block {self.index}: encoder feature "
                                 f"{h.shape} vs decoder state {f.shape}")
            h = concat([h, f], axis=1)
        return self.post_conv2(gelu(self.post_conv1(h)))

    def prior_params(self, f: Tensor, e) -> tuple[Tensor, Tensor]:
        out = self.prior_conv(f)
        mu_hat = out[:, :self.zdim]
        sigma = clamp_sigma(out[:, self.zdim:])
        return mu_hat, sigma

    def aggregate(self, f: Tensor, z: Tensor, e) -> Tensor:
        zp = self.z_proj(z)
        if self.block_config == "C":
            f = f + zp
        else:
            f = self.merge(concat([f, zp], axis=1))
        return self.out_res(f, e)


class DecodeHead(Module):
    def __init__(self, cin: int, factor: int, cfg: ModelConfig, *, rng, dtype):
        self.factor = factor
        self.res = ResidualBlock(cin, cfg, rng=rng, dtype=dtype)
        self.conv = Conv2d(cin, 3 * factor * factor, 1, rng=rng, dtype=dtype)

    def __call__(self, f: Tensor, e) -> Tensor:
        return pixel_shuffle_up(self.conv(self.res(f, e)), self.factor)


# ---------------------------------------------------------------------------
# the full model

# latent_fn(index, block, mu_hat, sigma_hat) -> z tensor to aggregate
LatentFn = Callable[[int, LatentBlock, Tensor, Tensor], Tensor]


@dataclass
class ForwardResult:
    x_hat: Tensor                  # unclamped reconstruction
    rates: list[Tensor]            # per latent, per batch item, in nats
    latents: list[np.ndarray]      # sampled z_i (plain arrays)
    mus: list[np.ndarray]          # posterior centers

    def total_rate(self) -> Tensor:
        total = self.rates[0]
        for r in self.rates[1:]:
            total = total + r
        return total


class QarvModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.dtype = dtype
        if config.conditional:
            self.embedding = LambdaEmbedding(config, rng=rng, dtype=dtype)
        self.encoder = Encoder(config, rng=rng, dtype=dtype)
        c0 = config.feature_channels[0]
        # constant bias for one max_downsample x max_downsample reference
        # tile; broadcast-tiled over space for larger inputs
        bound = 1.0 / math.sqrt(c0)
        self.bias = Parameter(rng.uniform(-bound, bound, size=(1, c0, 1, 1)).astype(dtype))
        self.steps: list[Module] = []
        index = 0
        for i, (div, zdim, reps) in enumerate(zip(config.divisors,
                                                  config.latent_channels,
                                                  config.block_repeats)):
            if i > 0:
                prev = i - 1
                factor = config.divisors[prev] // div
                self.steps.append(Upsample(config.feature_channels[prev],
                                           config.feature_channels[i], factor,
                                           config, rng=rng, dtype=dtype))
            for _ in range(reps):
                self.steps.append(LatentBlock(index, div, config.feature_channels[i],
                                              zdim, config, rng=rng, dtype=dtype))
                index += 1
        self.head = DecodeHead(config.feature_channels[-1], config.divisors[-1],
                               config, rng=rng, dtype=dtype)
        self.assign_parameter_names()

    # -- conditioning -------------------------------------------------

    def embed_lambda(self, lam) -> Optional[Tensor]:
        """Deterministic embedding of the rate parameter (None if fixed-rate)."""
        if not self.config.conditional:
            return None
        return self.embedding(lam)

    @property
    def config_hash(self) -> bytes:
        return self.config.config_hash()

    def latent_blocks(self) -> list[LatentBlock]:
        return [s for s in self.steps if isinstance(s, LatentBlock)]

    # -- core walks ---------------------------------------------------

    def encode_features(self, x: Tensor, e) -> dict[int, Tensor]:
        return self.encoder(x, e)

    def initial_state(self, batch: int, h: int, w: int) -> Tensor:
        d = self.config.max_downsample
        ones = Tensor(np.ones((batch, 1, h // d, w // d), dtype=self.dtype))
        return self.bias * ones

    def top_down(self, e, batch: int, h: int, w: int, latent_fn: LatentFn) -> Tensor:
        """Run the decode path, asking latent_fn for every z_i."""
        f = self.initial_state(batch, h, w)
        for step in self.steps:
            if isinstance(step, Upsample):
                f = step(f, e)
            else:
                mu_hat, sigma = step.prior_params(f, e)
                z = latent_fn(step.index, step, mu_hat, sigma)
                f = step.aggregate(f, z, e)
        return self.head(f, e)

    def forward_train(self, x: Tensor, lam, rng: np.random.Generator) -> ForwardResult:
        """Additive-noise training pass; x must be padded and in [0, 1]."""
        data = x.data
        if data.min() < -1e-6 or data.max() > 1.0 + 1e-6:
            raise ModelError("input pixels must lie in [0, 1]")
        n, _, h, w = x.shape
        e = self.embed_lambda(lam)
        feats = self.encode_features(x, e)
        rates: list[Tensor] = []
        latents: list[np.ndarray] = []
        mus: list[np.ndarray] = []
        f = self.initial_state(n, h, w)
        for step in self.steps:
            if isinstance(step, Upsample):
                f = step(f, e)
                continue
            i = step.index
            mu_hat, sigma = step.prior_params(f, e)
            mu = step.posterior_mu(feats[step.divisor], f, e)
            check_finite(mu, f"latent block {i}: posterior mu")
            check_finite(mu_hat, f"latent block {i}: prior mu_hat")
            prior = BoxedGaussian(mu_hat, sigma)
            z = UniformPosterior(mu).sample(rng)
            rates.append(prior.rate_nats(z).sum(axis=(1, 2, 3)))
            latents.append(z.data.copy())
            mus.append(mu.data.copy())
            f = step.aggregate(f, z, e)
        x_hat = self.head(f, e)
        check_finite(x_hat, "reconstruction")
        return ForwardResult(x_hat=x_hat, rates=rates, latents=latents, mus=mus)

    def reconstruct_from_latents(self, latents: list[np.ndarray], lam,
                                 batch: int, h: int, w: int) -> Tensor:
        """Pure decode-path reconstruction from given z values."""
        e = self.embed_lambda(lam)

        def replay(i, block, mu_hat, sigma):
            return Tensor(latents[i].astype(self.dtype))

        with no_grad():
            return self.top_down(e, batch, h, w, replay)


# ---------------------------------------------------------------------------
# model (de)serialization


def save_checkpoint(model: QarvModel, path: str, optimizer=None, ema=None) -> None:
    """Write parameters plus optional EMA shadows and optimizer state."""
    from . import checkpoint as ckpt

    arrays: dict[str, np.ndarray] = {
        "__config__": np.frombuffer(model.config.to_json().encode("utf-8"), dtype=np.uint8),
    }
    named = list(model.named_parameters())
    for name, p in named:
        arrays[name] = p.data
    if ema is not None:
        for (name, _), shadow in zip(named, ema.shadow):
            arrays[name + "/ema"] = shadow
    if optimizer is not None:
        for (name, _), m, v in zip(named, optimizer.m, optimizer.v):
            arrays[name + "/adam_m"] = m
            arrays[name + "/adam_v"] = v
        arrays["__step__"] = np.asarray(optimizer.step_count, dtype=np.int64)
    ckpt.save_arrays(path, arrays)


def load_checkpoint(path: str, dtype=np.float32, seed: int = 0
                    ) -> tuple[QarvModel, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, extra records)."""
    from . import checkpoint as ckpt

    arrays = ckpt.load_arrays(path)
    if "__config__" not in arrays:
        raise ModelError("checkpoint has no model config record")
    config = ModelConfig.from_json(bytes(arrays["__config__"]).decode("utf-8"))
    model = QarvModel(config, seed=seed, dtype=dtype)
    extras: dict[str, np.ndarray] = {}
    named = dict(model.named_parameters())
    for name, arr in arrays.items():
        if name in named:
            if named[name].shape != arr.shape:
                raise ModelError(f"shape mismatch for {name!r}")
            named[name].data = arr.astype(dtype)
        elif name != "__config__":
            extras[name] = arr
    missing = set(named) - set(arrays)
    if missing:
        raise ModelError(f"checkpoint is missing parameters: {sorted(missing)[:3]} ...")
    return model, extras


def apply_ema_weights(model: QarvModel, extras: dict[str, np.ndarray]) -> None:
    """Overwrite live parameters with stored EMA shadows."""
    for name, p in model.named_parameters():
        key = name + "/ema"
        if key not in extras:
            raise ModelError(f"checkpoint has no EMA shadow for {name!r}")
        p.data = extras[key].astype(model.dtype)
