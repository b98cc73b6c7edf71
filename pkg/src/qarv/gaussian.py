"""Uniform posteriors, box-convolved Gaussian priors, and their discretization.

The coding prior for a latent element is a Gaussian N(mu_hat, sigma_hat^2)
convolved with a unit-width uniform, so its density is the Gaussian mass
inside a width-1 window:

    density(z) = Phi((z - mu_hat + 1/2) / sigma_hat)
               - Phi((z - mu_hat - 1/2) / sigma_hat)

Evaluating that density at the unit-spaced points mu_hat + n (n integer)
yields the PMF used for entropy coding; it depends on sigma_hat only.
The PMF is quantized to exact 16-bit integer frequencies with a fully
deterministic rule so encoder and decoder always build identical tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .autodiff import Tensor, unary_op

SIGMA_MIN = 1e-2
SIGMA_MAX = 1e2
DENSITY_FLOOR = 1e-9

PMF_PRECISION = 16
PMF_TOTAL = 1 << PMF_PRECISION
N_MIN = -32
N_MAX = 32
ALPHABET = N_MAX - N_MIN + 1

_INV_SQRT_2PI = 0.3989422804014327


def std_normal_cdf(x):
    """Standard normal CDF.  Accepts floats/ndarrays or Tensors.

    Absolute error is far below the 1e-7 contract (scipy's ndtr evaluates
    the error function to machine precision).
    """
    if isinstance(x, Tensor):
        return unary_op(
            x,
            lambda d: ndtr(d).astype(d.dtype),
            lambda d, out: (np.exp(-0.5 * d * d)
                            * np.asarray(_INV_SQRT_2PI, dtype=d.dtype)),
        )
    return ndtr(x)


def _density_data(z: np.ndarray, mu_hat: np.ndarray, sigma_hat: np.ndarray) -> np.ndarray:
    """Plain-array prior density (left-tail form for conditioning)."""
    v = np.abs(z - mu_hat)
    upper = ndtr((0.5 - v) / sigma_hat)
    lower = ndtr((-0.5 - v) / sigma_hat)
    return np.maximum(upper - lower, DENSITY_FLOOR)


def prior_density(z, mu_hat, sigma_hat):
    """Elementwise prior density, floored at 1e-9 ahead of any log.

    Tensor inputs keep the graph differentiable in z, mu_hat and sigma_hat;
    plain arrays take a fast numpy path.  sigma_hat must already be inside
    [SIGMA_MIN, SIGMA_MAX].
    """
    if not isinstance(z, Tensor):
        return _density_data(np.asarray(z, dtype=np.float64),
                             np.asarray(mu_hat, dtype=np.float64),
                             np.asarray(sigma_hat, dtype=np.float64))
    # |z - mu| keeps both CDF arguments in the well-resolved left tail
    v = (z - mu_hat).abs()
    upper = std_normal_cdf((0.5 - v) / sigma_hat)
    lower = std_normal_cdf((-0.5 - v) / sigma_hat)
    return (upper - lower).clip(lo=DENSITY_FLOOR)


def rate_nats(z, mu_hat, sigma_hat):
    """-ln(prior density); the differentiable code-length surrogate."""
    p = prior_density(z, mu_hat, sigma_hat)
    if isinstance(p, Tensor):
        return -p.log()
    return -np.log(p)


def clamp_sigma(sigma_logit: Tensor) -> Tensor:
    """Map a raw network output s to sigma = exp(s) in [SIGMA_MIN, SIGMA_MAX].

    Bounds are plain floats; numpy scalars would silently promote a
    float32 graph to float64.
    """
    return sigma_logit.clip(math.log(SIGMA_MIN), math.log(SIGMA_MAX)).exp()


@dataclass(frozen=True)
class UniformPosterior:
    """Unit-width uniform centered on the inferred latent mean."""

    center: Tensor

    def sample(self, rng: np.random.Generator) -> Tensor:
        u = rng.uniform(-0.5, 0.5, size=self.center.shape)
        return self.center + Tensor(u.astype(self.center.data.dtype))

    def contains(self, z) -> np.ndarray:
        z = z.data if isinstance(z, Tensor) else np.asarray(z)
        return np.abs(z - self.center.data) <= 0.5


@dataclass(frozen=True)
class BoxedGaussian:
    """Gaussian convolved with a unit uniform; the coding prior."""

    mean: Tensor
    std: Tensor

    def density(self, z):
        return prior_density(z, self.mean, self.std)

    def rate_nats(self, z):
        return rate_nats(z, self.mean, self.std)


# ---------------------------------------------------------------------------
# quantized PMFs


@dataclass(frozen=True)
class QuantizedPmf:
    """Integer-frequency PMF over n in [n_min, n_max]; sum(freqs) == 2^16."""

    freqs: np.ndarray
    n_min: int = N_MIN
    total: int = PMF_TOTAL
    cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        freqs = np.asarray(self.freqs, dtype=np.int64)
        if freqs.min() < 1:
            raise ValueError("every frequency must be >= 1")
        if int(freqs.sum()) != self.total:
            raise ValueError(f"frequencies sum to {int(freqs.sum())}, expected {self.total}")
        object.__setattr__(self, "freqs", freqs)
        cum = np.zeros(len(freqs) + 1, dtype=np.int64)
        np.cumsum(freqs, out=cum[1:])
        object.__setattr__(self, "cum", cum)

    @property
    def n_max(self) -> int:
        return self.n_min + len(self.freqs) - 1

    def start(self, n: int) -> int:
        return int(self.cum[n - self.n_min])

    def freq(self, n: int) -> int:
        return int(self.freqs[n - self.n_min])


def real_pmf_for_sigmas(sigmas: np.ndarray) -> np.ndarray:
    """Real-valued PMFs (rows) over [N_MIN, N_MAX] with folded tails.

    Built on the nonnegative half and mirrored, so symmetry is exact and
    each row sums to 1 up to a handful of float64 roundings.
    """
    s = np.asarray(sigmas, dtype=np.float64).reshape(-1, 1)
    # float32 clamping can land a rounding step outside the float64 bounds
    if np.any(s < SIGMA_MIN * (1 - 1e-4)) or np.any(s > SIGMA_MAX * (1 + 1e-4)):
        raise ValueError("sigma outside the clamp range")
    s = np.clip(s, SIGMA_MIN, SIGMA_MAX)
    m = s.shape[0]
    j = np.arange(1, N_MAX, dtype=np.float64)  # interior 1..31
    interior = ndtr(-(j - 0.5) / s) - ndtr(-(j + 0.5) / s)
    edge = ndtr(-(N_MAX - 0.5) / s)  # all mass beyond +/-(N_MAX - 1/2)
    center = 1.0 - 2.0 * ndtr(-0.5 / s)
    pmf = np.empty((m, ALPHABET), dtype=np.float64)
    pmf[:, -N_MIN] = center[:, 0]
    pmf[:, -N_MIN + 1:-1] = interior
    pmf[:, 1:-N_MIN] = interior[:, ::-1]
    pmf[:, 0] = edge[:, 0]
    pmf[:, -1] = edge[:, 0]
    return pmf


def quantize_pmf(real: np.ndarray) -> np.ndarray:
    """Deterministically quantize real PMF rows to integer frequencies.

    Scale to 2^16 and floor; hand the leftover units to the largest-mass
    symbols (ties broken by lowest index); raise any zero to 1, taking the
    deficit from the single largest bin (ties again by lowest index).  The
    largest bin holds at least 2^16 / 65 units, so a deficit of at most 64
    never endangers it.
    """
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    m, k = real.shape
    if k > PMF_TOTAL:
        raise AssertionError("alphabet larger than the frequency total")
    freqs = np.floor(real * PMF_TOTAL).astype(np.int64)
    remainder = PMF_TOTAL - freqs.sum(axis=1)
    order = np.argsort(-real, axis=1, kind="stable")
    rank = np.argsort(order, axis=1)
    freqs += rank < remainder[:, None]
    zeros = freqs == 0
    deficit = zeros.sum(axis=1)
    freqs[zeros] = 1
    rows = np.nonzero(deficit)[0]
    if rows.size:
        largest = np.argmax(freqs[rows], axis=1)
        freqs[rows, largest] -= deficit[rows]
    return freqs


def pmf_table_for_sigmas(sigmas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch path: integer frequency rows and their cumulative tables."""
    freqs = quantize_pmf(real_pmf_for_sigmas(sigmas))
    cum = np.zeros((freqs.shape[0], freqs.shape[1] + 1), dtype=np.int64)
    np.cumsum(freqs, axis=1, out=cum[:, 1:])
    return freqs, cum


def pmf_for_sigma(sigma: float) -> QuantizedPmf:
    """Quantized coding PMF for one sigma value (pure function of sigma)."""
    freqs = quantize_pmf(real_pmf_for_sigmas(np.asarray([sigma])))
    return QuantizedPmf(freqs[0])
