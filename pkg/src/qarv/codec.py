"""Practical compression: quantization, per-latent entropy coding, container.

Compression replicate-pads the image to a multiple of the model's maximum
downsampling factor, runs the encoder plus the top-down path, and at every
latent block quantizes the posterior mean against the prior mean,

    n_i = clamp(round_half_away_from_zero(mu_i - mu_hat_i), n_min, n_max)
    z_i = mu_hat_i + n_i

range-codes n_i (raster order, channel-major) with the per-element PMFs
derived from sigma_hat_i, and aggregates the quantized z_i so both channel
sides evolve the identical decoder state.  Each latent owns a separate
byte stream, which is what makes progressive / partial decoding possible.

Container layout (integers little-endian):

    magic "QARV" | version u16 | model-config hash (8 bytes) |
    lambda float32 | width u32 | height u32 | stream count u8 |
    per stream: byte length u32 + payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, no_grad
from .gaussian import N_MAX, N_MIN, PMF_TOTAL, pmf_table_for_sigmas
from .model import QarvModel, Upsample
from .rangecoder import decode_with_tables, encode_with_tables

MAGIC = b"QARV"
CONTAINER_VERSION = 1
_FIXED_HEADER = struct.Struct("<4sH8sfIIB")


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class CompressedImage:
    config_hash: bytes
    lam: float                       # exactly representable as float32
    width: int
    height: int
    streams: tuple[bytes, ...]
    version: int = CONTAINER_VERSION

    def __post_init__(self):
        if len(self.config_hash) != 8:
            raise CodecError("config hash must be 8 bytes")
        if float(np.float32(self.lam)) != self.lam:
            raise CodecError("lambda must round-trip through float32")

    @property
    def header_bytes(self) -> int:
        return _FIXED_HEADER.size + 4 * len(self.streams)

    @property
    def total_bytes(self) -> int:
        return self.header_bytes + sum(len(s) for s in self.streams)

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += _FIXED_HEADER.pack(MAGIC, self.version, self.config_hash,
                                  self.lam, self.width, self.height,
                                  len(self.streams))
        for s in self.streams:
            out += struct.pack("<I", len(s))
            out += s
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedImage":
        if len(blob) < _FIXED_HEADER.size:
            raise CodecError("container shorter than its fixed header")
        magic, version, chash, lam, width, height, n = _FIXED_HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise CodecError(f"bad container magic {magic!r}")
        if version != CONTAINER_VERSION:
            raise CodecError(f"unsupported container version {version}")
        off = _FIXED_HEADER.size
        streams = []
        for _ in range(n):
            if off + 4 > len(blob):
                raise CodecError("truncated container (stream length)")
            (length,) = struct.unpack_from("<I", blob, off)
            off += 4
            if off + length > len(blob):
                raise CodecError("truncated container (stream payload)")
            streams.append(blob[off:off + length])
            off += length
        if off != len(blob):
            raise CodecError("trailing bytes after the last stream")
        return cls(config_hash=chash, lam=float(lam), width=int(width),
                   height=int(height), streams=tuple(streams), version=version)

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path: str) -> "CompressedImage":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


# ---------------------------------------------------------------------------
# decode modes


@dataclass(frozen=True)
class DecodeMode:
    """Full, Progressive(i), LeaveOneOut(i) or Disjoint(i); i is 1-based.

    Entropy decoding always follows the true ancestral chain (a stream's
    PMFs depend on every earlier z), so leave-one-out and disjoint modes
    still parse all bitstreams; the mode selects which recovered latents
    feed the reconstruction, with skipped ones replaced by the prior means
    of the substituted decode path.  Progressive(i) never touches streams
    beyond i.
    """

    kind: str = "full"
    index: Optional[int] = None

    KINDS = ("full", "progressive", "loo", "disjoint")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise CodecError(f"unknown decode mode {self.kind!r}")
        if (self.kind != "full") != (self.index is not None):
            raise CodecError("exactly the partial modes take an index")

    @classmethod
    def parse(cls, text: str) -> "DecodeMode":
        if text == "full":
            return cls("full")
        kind, sep, idx = text.partition(":")
        if not sep or kind not in ("progressive", "loo", "disjoint"):
            raise CodecError(f"cannot parse decode mode {text!r}")
        return cls(kind, int(idx))

    def validate(self, n_latents: int) -> None:
        if self.index is not None and not 1 <= self.index <= n_latents:
            raise CodecError(f"latent index {self.index} outside 1..{n_latents}")

    def includes(self, i: int) -> bool:
        """Whether 1-based latent i contributes to the reconstruction."""
        if self.kind == "full":
            return True
        if self.kind == "progressive":
            return i <= self.index
        if self.kind == "loo":
            return i != self.index
        return i == self.index

    def last_needed_stream(self, n_latents: int) -> int:
        """How many leading streams must be entropy-decoded."""
        if self.kind == "progressive":
            return self.index
        return n_latents


# ---------------------------------------------------------------------------
# quantization and padding


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_latent(mu: np.ndarray, mu_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(z, n): n = clamp(round(mu - mu_hat)); z = mu_hat + n.

    The clamped n is used both for coding and reconstruction, so outliers
    cost distortion instead of breaking the entropy coder.
    """
    if mu.shape != mu_hat.shape:
        raise CodecError("mu and mu_hat shapes differ")
    n = np.clip(round_half_away(mu - mu_hat), N_MIN, N_MAX)
    z = mu_hat + n.astype(mu_hat.dtype)
    return z, n.astype(np.int64)


def pad_to_multiple(img: np.ndarray, d: int) -> np.ndarray:
    """Replicate-pad (C, H, W) on the bottom/right to multiples of d."""
    _, h, w = img.shape
    ph = (-h) % d
    pw = (-w) % d
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")


# ---------------------------------------------------------------------------
# compress / decompress


def _validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise CodecError(f"expected a (3, H, W) image, got {img.shape}")
    if img.min() < -1e-6 or img.max() > 1 + 1e-6:
        raise CodecError("pixel values must lie in [0, 1]")
    return img.astype(np.float32)


def compress_with_trace(model: QarvModel, img: np.ndarray, lam: float,
                        pad_fill: str = "edge") -> tuple[CompressedImage, dict]:
    """Compress and also return the encoder-side quantized state.

    The trace carries the quantized latents, the coded symbols and the
    encoder-side reconstruction; tests use it to assert the channel is
    lossless.  `pad_fill` exists only to probe pad-content sensitivity.
    """
    img = _validate_image(img)
    cfg = model.config
    if not cfg.lambda_low <= lam <= cfg.lambda_high:
        raise CodecError(f"lambda {lam} outside [{cfg.lambda_low}, {cfg.lambda_high}]")
    lam32 = float(np.float32(lam))  # conditioning must match the header bits
    _, height, width = img.shape
    d = cfg.max_downsample
    if pad_fill == "edge":
        padded = pad_to_multiple(img, d)
    else:
        _, h0, w0 = img.shape
        padded = np.pad(img, ((0, 0), (0, (-h0) % d), (0, (-w0) % d)),
                        mode="constant", constant_values=0.5)
    x = Tensor(padded[None].astype(model.dtype))
    streams: list[bytes] = []
    latents: list[np.ndarray] = []
    symbols: list[np.ndarray] = []
    sigmas: list[np.ndarray] = []
    mus: list[np.ndarray] = []
    with no_grad():
        e = model.embed_lambda(lam32)
        feats = model.encode_features(x, e)
        f = model.initial_state(1, padded.shape[1], padded.shape[2])
        for step in model.steps:
            if isinstance(step, Upsample):
                f = step(f, e)
                continue
            mu_hat, sigma = step.prior_params(f, e)
            mu = step.posterior_mu(feats[step.divisor], f, e)
            z, n = quantize_latent(mu.data, mu_hat.data)
            freqs, cum = pmf_table_for_sigmas(sigma.data.ravel())
            streams.append(encode_with_tables(n.ravel(), cum, freqs, N_MIN, PMF_TOTAL))
            latents.append(z)
            symbols.append(n)
            sigmas.append(sigma.data.copy())
            mus.append(mu.data.copy())
            f = step.aggregate(f, Tensor(z.astype(model.dtype)), e)
        recon = model.head(f, e).data[0]
    container = CompressedImage(config_hash=model.config_hash, lam=lam32,
                                width=width, height=height, streams=tuple(streams))
    trace = {
        "latents": latents,
        "symbols": symbols,
        "sigmas": sigmas,
        "mus": mus,
        "recon": np.clip(recon[:, :height, :width], 0.0, 1.0),
    }
    return container, trace


def compress(model: QarvModel, img: np.ndarray, lam: float) -> CompressedImage:
    """Encode an image in [0, 1] into a container at trade-off lam."""
    container, _ = compress_with_trace(model, img, lam)
    return container


def decompress_with_trace(model: QarvModel, container: CompressedImage,
                          mode: DecodeMode = DecodeMode()) -> tuple[np.ndarray, dict]:
    if container.config_hash != model.config_hash:
        raise CodecError("container was produced by a different model config")
    n_latents = model.config.num_latents
    if len(container.streams) != n_latents:
        raise CodecError(f"expected {n_latents} streams, found {len(container.streams)}")
    mode.validate(n_latents)
    cfg = model.config
    if not cfg.lambda_low <= container.lam <= cfg.lambda_high:
        raise CodecError(f"header lambda {container.lam} outside the model's range")
    d = cfg.max_downsample
    hp = container.height + (-container.height) % d
    wp = container.width + (-container.width) % d
    needed = mode.last_needed_stream(n_latents)
    latents: list[np.ndarray] = []
    symbols: dict[int, np.ndarray] = {}
    with no_grad():
        e = model.embed_lambda(container.lam)

        # phase 1: entropy-decode along the true ancestral chain; stop once
        # no further stream is needed and finish with substituted priors
        f = model.initial_state(1, hp, wp)
        recon = None
        for step in model.steps:
            if isinstance(step, Upsample):
                f = step(f, e)
                continue
            mu_hat, sigma = step.prior_params(f, e)
            i = step.index
            if i < needed:
                freqs, cum = pmf_table_for_sigmas(sigma.data.ravel())
                n = decode_with_tables(container.streams[i], cum, freqs,
                                       N_MIN, PMF_TOTAL).reshape(mu_hat.shape)
                z = mu_hat.data + n.astype(mu_hat.data.dtype)
                symbols[i] = n
            else:
                z = mu_hat.data  # progressive tail: prior means
            latents.append(z)
            f = step.aggregate(f, Tensor(z.astype(model.dtype)), e)
        if mode.kind in ("full", "progressive"):
            recon = model.head(f, e).data[0]

        # phase 2: reconstruction-only walk with the mode's latent subset;
        # skipped latents fall back to this substituted path's prior means
        if recon is None:
            def select(i, step, mu_hat, sigma):
                if mode.includes(i + 1):
                    return Tensor(latents[i].astype(model.dtype))
                return Tensor(mu_hat.data)

            recon = model.top_down(e, 1, hp, wp, select).data[0]
    x_hat = np.clip(recon[:, :container.height, :container.width], 0.0, 1.0)
    return x_hat, {"latents": latents, "symbols": symbols}


def decompress(model: QarvModel, container: CompressedImage,
               mode: DecodeMode = DecodeMode()) -> np.ndarray:
    """Decode a container to a (3, H, W) image in [0, 1] at the original size."""
    x_hat, _ = decompress_with_trace(model, container, mode)
    return x_hat


def rate_breakdown(container: CompressedImage) -> tuple[list[tuple[int, float]], int]:
    """Per-latent (bits, fraction of payload bits); header bits separately."""
    bits = [8 * len(s) for s in container.streams]
    total = sum(bits)
    if total == 0:
        raise CodecError("container has no payload")
    return [(b, b / total) for b in bits], 8 * container.header_bytes
