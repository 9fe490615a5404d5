"""Rate-distortion training: loss, Adam, clipping and a seeded loop.

The loop is deliberately plain. Each step samples a batch of patches, runs the
model with additive-noise quantization, evaluates ``L = R + lambda * D``,
back-propagates, clips the global gradient norm and applies Adam.

MSE is measured on pixels scaled to [0, 255], so the conventional lambda
values (0.0035 ... 0.1) keep their usual magnitude.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .entropy import gaussian_likelihood, quantize, rate_bits
from .metrics import ms_ssim_tensor, mse_tensor
from .model import (Model, analysis_transform, hyper_analysis, hyper_synthesis,
                    save_checkpoint, synthesis_transform)
from .tensor import NonFiniteError, ShapeError, Tape, Tensor

log = logging.getLogger(__name__)

LAMBDAS_MSE = (0.0035, 0.005, 0.0067, 0.0130, 0.0250, 0.050, 0.100)
LAMBDAS_MSSSIM = (5.0, 6.51, 8.73, 16.64, 31.73, 60.50, 140.0)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lmbda: float = 0.0130
    distortion: str = "mse"
    base_lr: float = 1e-4
    # (epoch, lr) milestones; applied once the epoch counter reaches them
    lr_milestones: tuple = ((40, 5e-5), (80, 1e-5))
    clip: float = 1.0
    batch_size: int = 16
    epochs: int = 100
    steps: int | None = None        # overrides epochs for desk runs
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    quantization: str = "noise"     # "ste" is reserved and not implemented
    log_csv: str | None = None
    checkpoint: str | None = None
    checkpoint_every: int = 100

    def __post_init__(self):
        if not self.lmbda >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lmbda}")
        if self.distortion not in ("mse", "ms_ssim"):
            raise ValueError(f"unknown distortion {self.distortion!r}")
        if self.quantization != "noise":
            raise NotImplementedError("only noise quantization is implemented")

    @classmethod
    def from_index(cls, index: int, distortion: str = "mse", **kw) -> "TrainConfig":
        if not 0 <= index <= 6:
            raise ValueError(f"lambda index must be in [0, 6], got {index}")
        table = LAMBDAS_MSE if distortion == "mse" else LAMBDAS_MSSSIM
        return cls(lmbda=table[index], distortion=distortion, **kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Single-patch overfitting recipe used for quick checks."""
        base = dict(base_lr=1e-3, batch_size=1, steps=500, checkpoint_every=0)
        base.update(kw)
        if "lr_milestones" not in kw:
            # same shape as the full schedule: halve at 40%, tenth at 80%
            n, lr = base["steps"], base["base_lr"]
            base["lr_milestones"] = ((int(0.4 * n), lr / 2), (int(0.8 * n), lr / 10))
        return cls(**base)

    def lr_at(self, epoch: int) -> float:
        lr = self.base_lr
        for e, v in self.lr_milestones:
            if epoch >= e:
                lr = v
        return lr


# ---------------------------------------------------------------------------
# loss


def distortion(x, x_hat, kind: str = "mse") -> Tensor:
    if kind == "mse":
        return mse_tensor(x, x_hat)
    if kind == "ms_ssim":
        return ops.add(ops.scale(ms_ssim_tensor(x, x_hat), -1.0), 1.0)
    raise ValueError(f"unknown distortion {kind!r}")


def rd_loss(x, x_hat, R, cfg: TrainConfig) -> Tensor:
    """``R + lambda * D``; R in bits per pixel (Tensor or float)."""
    if tuple(np.shape(getattr(x, "data", x))) != tuple(np.shape(getattr(x_hat, "data", x_hat))):
        raise ShapeError("x and x_hat differ in shape")
    R = R if isinstance(R, Tensor) else Tensor(np.asarray(R, dtype=np.float64))
    if cfg.lmbda == 0:
        return R
    return ops.add(R, ops.scale(distortion(x, x_hat, cfg.distortion), cfg.lmbda))


@dataclass
class RdOutput:
    x_hat: Tensor
    R: Tensor
    y_likelihood: Tensor
    z_likelihood: Tensor


def forward_rd(model: Model, x: Tensor, mode: str = "noise",
               rng: np.random.Generator | None = None) -> RdOutput:
    """Training (``noise``) or evaluation (``round``) forward pass with rate."""
    B, _, H, W = x.shape
    y = analysis_transform(x, model)
    z = hyper_analysis(y, model)
    z_q = quantize(z, mode, rng=rng)
    mu, sigma = hyper_synthesis(z_q, model)
    y_q = quantize(y, mode, offset=mu, rng=rng) if mode == "round" else quantize(y, mode, rng=rng)
    x_hat = synthesis_transform(y_q, model)
    p_y = gaussian_likelihood(y_q, mu, sigma)
    p_z = model.prior.likelihood(z_q)
    R = rate_bits([p_y, p_z], B * H * W)
    return RdOutput(x_hat, R, p_y, p_z)


def evaluate(model: Model, x: np.ndarray, cfg: TrainConfig | None = None) -> dict:
    """Rounded-latent rate estimate and distortion, no tape."""
    cfg = cfg or TrainConfig()
    xt = Tensor(np.asarray(x, dtype=np.float32))
    out = forward_rd(model, xt, "round")
    x_hat = Tensor(np.clip(out.x_hat.data, 0.0, 1.0))
    D = float(distortion(xt, x_hat, cfg.distortion).data)
    R = float(out.R.data)
    return {"R": R, "D": D, "L": R + cfg.lmbda * D}


# ---------------------------------------------------------------------------
# optimizer


def clip_grads(params, threshold: float = 1.0) -> float:
    """Rescale all grads so their global 2-norm is at most ``threshold``.

    Returns the scale factor applied (1.0 when no clipping was needed).
    """
    sq = sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)
    norm = math.sqrt(sq)
    if norm <= threshold or norm == 0.0:
        return 1.0
    s = threshold / norm
    for p in params:
        p.grad *= s
    return s


@dataclass
class AdamState:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float) -> AdamState:
    b1, b2 = state.betas
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name or id(p)}")
    state.t += 1
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g in zip(params, grads):
        k = id(p)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr:
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    history: list
    checkpoint: str | None

    @property
    def losses(self) -> list[float]:
        return [h["L"] for h in self.history]


def _as_patches(dataset) -> np.ndarray:
    arr = np.asarray(dataset, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"dataset must be (N,3,H,W) patches, got {arr.shape}")
    return arr


def train_loop(model: Model, dataset, cfg: TrainConfig) -> TrainResult:
    patches = _as_patches(dataset)
    n = patches.shape[0]
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.steps if cfg.steps is not None else cfg.epochs * steps_per_epoch
    params = model.parameters()
    state = AdamState(cfg.betas, cfg.eps)
    history = []
    ckpt = cfg.checkpoint
    writer = fh = None
    if cfg.log_csv:
        fh = open(cfg.log_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "L", "R", "D", "lr"])
    try:
        for step in range(total):
            lr = cfg.lr_at(step // steps_per_epoch)
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            x = Tensor(patches[idx])
            model.zero_grad()
            with Tape() as tape:
                try:
                    out = forward_rd(model, x, "noise", rng)
                    D = distortion(x, out.x_hat, cfg.distortion)
                    L = ops.add(out.R, ops.scale(D, cfg.lmbda)) if cfg.lmbda else out.R
                    finite = bool(np.isfinite(L.data))
                except NonFiniteError:
                    finite = False
                if not finite:
                    kept = ckpt if ckpt and os.path.exists(ckpt) else "none"
                    raise TrainingDiverged(f"non-finite loss at step {step}; last good checkpoint: {kept}")
                tape.backward(L)
            clip_grads(params, cfg.clip)
            adam_step(params, [p.grad for p in params], state, lr)
            row = {"step": step, "L": float(L.data), "R": float(out.R.data),
                   "D": float(D.data), "lr": lr}
            history.append(row)
            if writer:
                writer.writerow([step, f"{row['L']:.6f}", f"{row['R']:.6f}",
                                 f"{row['D']:.6f}", f"{lr:g}"])
            if ckpt and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _save_atomic(model, ckpt, cfg.seed)
            if step % 50 == 0:
                log.info("step %d L=%.4f R=%.4f D=%.4f", step, row["L"], row["R"], row["D"])
    finally:
        if fh:
            fh.close()
    if ckpt:
        _save_atomic(model, ckpt, cfg.seed)
    return TrainResult(history, ckpt)


def _save_atomic(model: Model, path: str, seed: int) -> None:
    tmp = Path(str(path) + ".tmp")
    save_checkpoint(model, tmp, seed=seed)
    os.replace(tmp, path)
