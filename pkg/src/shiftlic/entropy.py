"""Quantization, likelihood models and their integer CDF tables.

``z`` is modelled by a per-channel learned CDF (:class:`FactorizedPrior`), ``y``
by a Gaussian whose mean and scale come from the hyper decoder
(:class:`GaussianConditional`). Both expose float likelihoods for training and
16-bit quantized CDFs for the range coder.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from . import ops
from .nn import Module
from .rangecoder import TOTAL
from .tensor import Parameter, Tensor

LIKELIHOOD_FLOOR = 1e-9
SIGMA_MIN = 0.11
SIGMA_MAX = 256.0
N_SCALES = 64
# residuals outside a table's window are sent after an escape symbol as
# two uniform bytes holding ``value + ESCAPE_OFFSET``
ESCAPE_OFFSET = 1 << 15
UNIFORM_BYTE_CDF = [i * 256 for i in range(257)]


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x: Tensor, mode: str, offset: Tensor | None = None,
             rng: np.random.Generator | None = None) -> Tensor:
    """``noise``: add U(-0.5, 0.5). ``round``: ``offset + round(x - offset)``.

    Rounding is half away from zero. The rounded result is a constant (no
    gradient path).
    """
    if mode == "noise":
        rng = rng if rng is not None else np.random.default_rng()
        u = rng.uniform(-0.5, 0.5, size=x.shape).astype(x.dtype)
        return ops.add(x, Tensor(u))
    if mode == "round":
        if offset is None:
            return Tensor(round_half_away(x.data).astype(x.dtype))
        off = np.broadcast_to(offset.data, x.shape)
        return Tensor((off + round_half_away(x.data - off)).astype(x.dtype))
    raise ValueError(f"unknown quantization mode {mode!r}")


def quantize_pmf(pmf: np.ndarray) -> list[int]:
    """Integer CDF with every symbol owning at least one of 2**16 units."""
    pmf = np.clip(np.asarray(pmf, dtype=np.float64), 0, None)
    n = pmf.size
    if n > TOTAL:
        raise ValueError("too many symbols for 16-bit precision")
    total = pmf.sum()
    pmf = pmf / total if total > 0 else np.full(n, 1.0 / n)
    freq = 1 + np.floor(pmf * (TOTAL - n)).astype(np.int64)
    freq[int(np.argmax(freq))] += TOTAL - int(freq.sum())
    cdf = np.concatenate([[0], np.cumsum(freq)])
    return [int(v) for v in cdf]


# ---------------------------------------------------------------------------
# factorized prior for z


class FactorizedPrior(Module):
    """Per-channel monotone density network (widths 1-3-3-3-1) giving a CDF.

    ``cdf(v) = sigmoid(f(v))`` with ``f`` nondecreasing: every layer matrix
    passes through softplus and the tanh gates are bounded below by -1.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 filters=(3, 3, 3), init_scale: float = 10.0, tail_mass: float = 1e-9,
                 max_support: int = 2048):
        self.channels = channels
        self.tail_mass = tail_mass
        self.max_support = max_support
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(Parameter(np.full((channels, dims[i + 1], dims[i]), init, np.float32)))
            self.biases.append(Parameter(
                rng.uniform(-0.5, 0.5, (channels, dims[i + 1], 1)).astype(np.float32)))
            if i < len(filters):
                self.factors.append(Parameter(np.zeros((channels, dims[i + 1], 1), np.float32)))

    def logits(self, v: Tensor) -> Tensor:
        """``v`` has shape (C, 1, P)."""
        h = v
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            h = ops.add(ops.bmm(ops.softplus(m), h), b)
            if i < len(self.factors):
                h = ops.add(h, ops.mul(ops.tanh(self.factors[i]), ops.tanh(h)))
        return h

    def likelihood(self, z: Tensor) -> Tensor:
        B, C, H, W = z.shape
        v = ops.reshape(ops.transpose(z, (1, 0, 2, 3)), (C, 1, B * H * W))
        lower = self.logits(ops.add(v, Tensor(np.asarray(-0.5, dtype=z.dtype))))
        upper = self.logits(ops.add(v, Tensor(np.asarray(0.5, dtype=z.dtype))))
        sign = -np.sign(lower.data + upper.data)
        sign[sign == 0] = 1.0
        sgn = Tensor(sign.astype(z.dtype))
        p = ops.abs_(ops.sub(ops.sigmoid(ops.mul(sgn, upper)), ops.sigmoid(ops.mul(sgn, lower))))
        p = ops.transpose(ops.reshape(p, (C, B, H, W)), (1, 0, 2, 3))
        return ops.lower_bound(p, LIKELIHOOD_FLOOR)

    def _logits_np(self, v: np.ndarray) -> np.ndarray:
        h = v.astype(np.float64)
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            h = np.matmul(np.logaddexp(0, m.data.astype(np.float64)), h) + b.data
            if i < len(self.factors):
                h = h + np.tanh(self.factors[i].data.astype(np.float64)) * np.tanh(h)
        return h

    def coding_tables(self) -> tuple[np.ndarray, list[list[int]]]:
        """Per-channel lowest coded value and CDF (window symbols + escape).

        The window drops at most ``tail_mass`` of probability; that mass goes to
        the escape symbol.
        """
        R = self.max_support
        ks = np.arange(-R - 1, R + 1, dtype=np.float64)
        pts = np.broadcast_to((ks + 0.5)[None, None, :], (self.channels, 1, ks.size))
        logit = self._logits_np(np.ascontiguousarray(pts))[:, 0, :]
        lower_tail = special.expit(logit)     # P(Z < k + 0.5)
        upper_tail = special.expit(-logit)    # P(Z > k + 0.5)
        half = self.tail_mass / 2
        offsets, cdfs = [], []
        for c in range(self.channels):
            lo_i = max(int(np.searchsorted(lower_tail[c], half, side="right")) - 1, 0)
            lo_i = min(lo_i, ks.size - 2)
            hi_candidates = np.nonzero(upper_tail[c] <= half)[0]
            hi_i = int(hi_candidates[0]) if hi_candidates.size else ks.size - 1
            hi_i = max(hi_i, lo_i + 1)
            # coded symbols k in [ks[lo_i] + 1, ks[hi_i]]
            cdf_vals = lower_tail[c, lo_i:hi_i + 1]
            pmf = np.diff(cdf_vals)
            tail = lower_tail[c, lo_i] + upper_tail[c, hi_i]
            offsets.append(int(ks[lo_i]) + 1)
            cdfs.append(quantize_pmf(np.append(pmf, tail)))
        return np.asarray(offsets), cdfs


# ---------------------------------------------------------------------------
# conditional Gaussian for y


def gaussian_likelihood(y_hat: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Interval mass ``Phi((y-mu+.5)/s) - Phi((y-mu-.5)/s)``, floored at 1e-9."""
    return ops.lower_bound(ops.gaussian_interval_mass(ops.sub(y_hat, mu), sigma), LIKELIHOOD_FLOOR)


class GaussianConditional:
    """Scale table and quantized residual CDFs for coding y around its mean."""

    def __init__(self, scale_min: float = SIGMA_MIN, scale_max: float = SIGMA_MAX,
                 n_scales: int = N_SCALES):
        self.scale_table = np.exp(np.linspace(math.log(scale_min), math.log(scale_max), n_scales))
        self._log_lo = math.log(scale_min)
        self._log_step = (math.log(scale_max) - math.log(scale_min)) / (n_scales - 1)
        self.half_ranges = [int(math.ceil(4 * s)) + 2 for s in self.scale_table]
        self.cdfs = [self._table(s, k) for s, k in zip(self.scale_table, self.half_ranges)]

    @staticmethod
    def _table(s: float, k: int) -> list[int]:
        edges = (np.arange(-k, k + 2) - 0.5) / s
        cdf = special.ndtr(edges)
        pmf = np.diff(cdf)
        tail = 2 * special.ndtr(-(k + 0.5) / s)
        return quantize_pmf(np.append(pmf, tail))

    def index(self, sigma: np.ndarray) -> np.ndarray:
        """Nearest table entry in log-scale."""
        pos = (np.log(np.maximum(sigma, 1e-12)) - self._log_lo) / self._log_step
        return np.clip(np.floor(pos + 0.5), 0, len(self.scale_table) - 1).astype(np.int64)


def rate_bits(likelihoods, num_pixels: int) -> Tensor:
    """Bits per pixel: ``sum(-log2 p) / num_pixels`` over all given tensors."""
    total = None
    for p in likelihoods:
        s = ops.sum_(ops.log(p))
        total = s if total is None else ops.add(total, s)
    return ops.scale(total, -1.0 / (math.log(2.0) * num_pixels))
