"""Rate-distortion objectives, the lambda sampling schedule, and the train loop.

The variable-rate sampler draws the trade-off weight as the cube of a
uniform variable, Delta ~ U(lambda_low^(1/3), lambda_high^(1/3)) and
lambda = Delta^3, whose density has the closed form

    p(lam) = (1/3) lam^(-2/3) / (lambda_high^(1/3) - lambda_low^(1/3))

on [lambda_low, lambda_high].  Uniform coverage of the cube-root space
spreads training roughly evenly over the achievable rate range.  A
log-uniform alternative is exposed for comparison.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .autodiff import Tensor
from .data import ImageDataset
from .model import QarvModel, save_checkpoint
from .optim import Adam, EmaTracker, NumericsError, clip_global_norm

LN2 = math.log(2.0)

SCHEDULE_KINDS = ("cube-root", "log-uniform")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# lambda schedule


@dataclass(frozen=True)
class LambdaSchedule:
    lambda_low: float = 16.0
    lambda_high: float = 2048.0
    kind: str = "cube-root"

    def __post_init__(self):
        if not (0 < self.lambda_low < self.lambda_high):
            raise ValueError("need 0 < lambda_low < lambda_high")
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def sample_lambda(schedule: LambdaSchedule, rng: np.random.Generator,
                  size: Optional[int] = None) -> Union[float, np.ndarray]:
    lo, hi = schedule.lambda_low, schedule.lambda_high
    if schedule.kind == "cube-root":
        delta = rng.uniform(lo ** (1.0 / 3.0), hi ** (1.0 / 3.0), size=size)
        lam = delta ** 3
    else:
        lam = np.exp(rng.uniform(math.log(lo), math.log(hi), size=size))
    return float(lam) if size is None else lam


def pdf_lambda(schedule: LambdaSchedule, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    lo, hi = schedule.lambda_low, schedule.lambda_high
    inside = (lam >= lo) & (lam <= hi)
    if schedule.kind == "cube-root":
        norm = hi ** (1.0 / 3.0) - lo ** (1.0 / 3.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            dens = np.where(inside, (1.0 / 3.0) * lam ** (-2.0 / 3.0) / norm, 0.0)
    else:
        dens = np.where(inside, 1.0 / (lam * (math.log(hi) - math.log(lo))), 0.0)
    return dens


def cdf_lambda(schedule: LambdaSchedule, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    lo, hi = schedule.lambda_low, schedule.lambda_high
    clipped = np.clip(lam, lo, hi)
    if schedule.kind == "cube-root":
        c = (clipped ** (1.0 / 3.0) - lo ** (1.0 / 3.0)) / (hi ** (1.0 / 3.0) - lo ** (1.0 / 3.0))
    else:
        c = (np.log(clipped) - math.log(lo)) / (math.log(hi) - math.log(lo))
    return np.where(lam < lo, 0.0, np.where(lam > hi, 1.0, c))


def equal_mass_bin_edges(schedule: LambdaSchedule, m: int) -> np.ndarray:
    """M+1 ascending edges; each bin carries probability mass exactly 1/M."""
    if m < 1:
        raise ValueError("need at least one bin")
    frac = np.arange(m + 1, dtype=np.float64) / m
    lo, hi = schedule.lambda_low, schedule.lambda_high
    if schedule.kind == "cube-root":
        delta = (1.0 - frac) * lo ** (1.0 / 3.0) + frac * hi ** (1.0 / 3.0)
        return delta ** 3
    return np.exp((1.0 - frac) * math.log(lo) + frac * math.log(hi))


# ---------------------------------------------------------------------------
# losses


def rd_loss(rates: list[Tensor], x: Tensor, x_hat: Tensor, lam) -> tuple[Tensor, dict]:
    """Assemble mean nats-per-pixel plus lam * MSE (per-image averages).

    `lam` is a scalar or a per-item array; MSE is taken over all RGB
    values, the rate normalizer is the pixel count H*W.
    """
    n, _, h, w = x.shape
    npix = h * w
    nats = rates[0]
    for r in rates[1:]:
        nats = nats + r
    rate_term = nats.mean() * (1.0 / npix)
    err = x - x_hat
    mse_items = (err * err).mean(axis=(1, 2, 3))
    lam_arr = np.asarray(lam, dtype=np.float64)
    if lam_arr.ndim == 0:
        dist_term = float(lam_arr) * mse_items.mean()
    else:
        if lam_arr.shape != (n,):
            raise ValueError("need one lambda per batch item")
        dist_term = (Tensor(lam_arr.astype(x.data.dtype)) * mse_items).mean()
    loss = rate_term + dist_term
    mse = float(mse_items.data.mean())
    stats = {
        "rate_bpp": float(nats.data.mean()) / LN2 / npix,
        "mse": mse,
        "psnr": math.inf if mse == 0 else -10.0 * math.log10(mse),
        "lambda": float(lam_arr.mean()),
    }
    return loss, stats


def loss_fixed(model: QarvModel, x: Tensor, lam: float,
               rng: np.random.Generator) -> tuple[Tensor, dict]:
    """One additive-noise forward pass weighted by a single lambda.

    lam = 0 is a rate-only debug mode and needs a fixed-rate (unconditional)
    model, since conditional models embed ln(lambda).
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if model.config.conditional and lam <= 0:
        raise ValueError("conditional models need lambda > 0")
    out = model.forward_train(x, lam if model.config.conditional else 1.0, rng)
    return rd_loss(out.rates, x, out.x_hat, lam)


def loss_variable(model: QarvModel, x: Tensor, schedule: LambdaSchedule,
                  rng: np.random.Generator) -> tuple[Tensor, dict]:
    """Per-item lambda draw, whole pass conditioned on it."""
    lam = sample_lambda(schedule, rng, size=x.shape[0])
    out = model.forward_train(x, lam, rng)
    return rd_loss(out.rates, x, out.x_hat, lam)


# ---------------------------------------------------------------------------
# train loop


@dataclass
class TrainConfig:
    iterations: int = 500_000
    batch_size: int = 16
    lr: float = 2e-4
    lr_schedule: str = "constant"          # or "constant-cosine"
    crop: int = 256
    flip_prob: float = 0.5
    grad_clip: float = 2.0
    ema_decay: float = 0.9999
    seed: int = 0
    loss_mode: str = "variable"            # or "fixed"
    fixed_lambda: float = 512.0
    lambda_low: float = 16.0
    lambda_high: float = 2048.0
    lambda_schedule: str = "cube-root"
    checkpoint_every: int = 1000
    log_every: int = 1

    def __post_init__(self):
        if self.loss_mode not in ("variable", "fixed"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.lr_schedule not in ("constant", "constant-cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def schedule(self) -> LambdaSchedule:
        return LambdaSchedule(self.lambda_low, self.lambda_high, self.lambda_schedule)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Constant, or constant for 90% then cosine decay to 2% of lr."""
    if config.lr_schedule == "constant":
        return config.lr
    knee = 0.9 * config.iterations
    if iteration < knee:
        return config.lr
    span = max(config.iterations - knee, 1.0)
    t = min((iteration - knee) / span, 1.0)
    return config.lr * (0.02 + 0.98 * 0.5 * (1.0 + math.cos(math.pi * t)))


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Stateless per-iteration stream; batches are a function of (seed, iter)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(iteration,)))


def _format_row(values) -> str:
    return ",".join(f"{v:.8g}" if isinstance(v, float) else str(v) for v in values)


LOG_HEADER = "iteration,loss,rate_bpp,mse,psnr,lambda,lr"


@dataclass
class TrainResult:
    final_checkpoint: str
    log_path: str
    iterations_run: int
    last_loss: float


def train(model: QarvModel, dataset: ImageDataset, config: TrainConfig,
          out_dir: str, resume_from: Optional[str] = None) -> TrainResult:
    """Run the optimization loop, logging a CSV row per iteration and
    writing periodic checkpoints (plus the last good one on a NaN abort)."""
    if config.crop % model.config.max_downsample != 0:
        raise TrainingError(f"crop {config.crop} not divisible by "
                            f"D={model.config.max_downsample}")
    os.makedirs(out_dir, exist_ok=True)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    ema = EmaTracker(params, decay=config.ema_decay)
    start_iter = 0
    if resume_from is not None:
        from .model import load_checkpoint
        restored, extras = load_checkpoint(resume_from, dtype=model.dtype)
        if restored.config != model.config:
            raise TrainingError("resume checkpoint was trained with a different config")
        for p, q in zip(params, restored.parameters()):
            p.data = q.data
        named = [n for n, _ in model.named_parameters()]
        for i, name in enumerate(named):
            if name + "/adam_m" in extras:
                opt.m[i] = extras[name + "/adam_m"].astype(model.dtype)
                opt.v[i] = extras[name + "/adam_v"].astype(model.dtype)
            if name + "/ema" in extras:
                ema.shadow[i] = extras[name + "/ema"].astype(model.dtype)
        if "__step__" in extras:
            opt.step_count = int(extras["__step__"].item())
            start_iter = opt.step_count

    schedule = config.schedule() if config.loss_mode == "variable" else None
    log_path = os.path.join(out_dir, "train_log.csv")
    mode = "a" if (resume_from is not None and os.path.exists(log_path)) else "w"
    final_path = os.path.join(out_dir, "ckpt_final.qarvckpt")
    last_good = os.path.join(out_dir, "ckpt_last_good.qarvckpt")
    last_loss = math.nan
    with open(log_path, mode) as log:
        if mode == "w":
            log.write(LOG_HEADER + "\n")
        for it in range(start_iter, config.iterations):
            rng = iteration_rng(config.seed, it)
            batch = dataset.sample_batch(rng, config.batch_size, config.crop,
                                         config.flip_prob)
            x = Tensor(batch.astype(model.dtype))
            opt.lr = lr_at(config, it)
            try:
                if schedule is not None:
                    loss, stats = loss_variable(model, x, schedule, rng)
                else:
                    loss, stats = loss_fixed(model, x, config.fixed_lambda, rng)
                if not np.isfinite(loss.data):
                    raise NumericsError("non-finite loss")
                model.zero_grad()
                loss.backward()
                clip_global_norm(params, config.grad_clip)
                opt.step()
                ema.update()
            except (NumericsError, FloatingPointError) as exc:
                save_checkpoint(model, last_good, optimizer=opt, ema=ema)
                raise TrainingError(f"aborted at iteration {it}: {exc}; "
                                    f"last good state in {last_good}") from exc
            last_loss = float(loss.data)
            if config.log_every and it % config.log_every == 0:
                row = (it, last_loss, stats["rate_bpp"], stats["mse"],
                       stats["psnr"], stats["lambda"], opt.lr)
                log.write(_format_row(row) + "\n")
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                path = os.path.join(out_dir, f"ckpt_{it + 1:08d}.qarvckpt")
                save_checkpoint(model, path, optimizer=opt, ema=ema)
    save_checkpoint(model, final_path, optimizer=opt, ema=ema)
    return TrainResult(final_checkpoint=final_path, log_path=log_path,
                       iterations_run=config.iterations - start_iter,
                       last_loss=last_loss)
