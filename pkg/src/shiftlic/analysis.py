"""Complexity accounting, BD-rate and dataset evaluation.

Closed forms are evaluated in exact rational arithmetic. The empirical side
runs one forward pass of every transform under :func:`count_macs` and
attributes each weight multiply to the layer (scope) that performed it.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .codec import compress, decompress
from .cra import ChannelRecursiveAttention, cra_flops, cra_param_count
from .entropy import FactorizedPrior
from .imageio import ImageFormatError, list_images, read_ppm
from .metrics import ms_ssim, psnr, ssim_db
from .model import Model
from .nn import Conv1x1, DepthwiseConv3x3, Module, Sequential
from .shift import SpatialShiftBlock, ssb_flops, ssb_param_count
from .tensor import Tensor, count_macs

log = logging.getLogger(__name__)

ENTRIES = ("resblock", "ssb", "attention", "nonlocal", "cra")


def closed_form(entry: str, M: int, N: int, H: int, W: int) -> tuple[Fraction, Fraction]:
    """(params, flops) of a complexity-table row, multiplies only, no biases."""
    HW = H * W
    if min(M, N, H, W) <= 0:
        raise ValueError("dimensions must be positive")
    if entry == "resblock":
        p = Fraction(9 * M * M + 18 * M * N)
        return p, HW * p
    if entry == "ssb":
        return Fraction(ssb_param_count(M, N)), Fraction(ssb_flops(M, N, H, W))
    if entry == "attention":
        p = Fraction(41, 2) * N * N
        return p, HW * (p + N)
    if entry == "nonlocal":
        p = Fraction(45, 2) * N * N
        return p, HW * (p + N + HW * N)
    if entry == "cra":
        return cra_param_count(N), cra_flops(N, H, W)
    raise ValueError(f"unknown closed-form entry {entry!r}; expected one of {ENTRIES}")


# ---------------------------------------------------------------------------
# counting


@dataclass
class LayerRow:
    name: str
    kind: str
    closed_params: Fraction | None
    counted_params: int
    closed_macs: Fraction | None
    counted_macs: int

    @staticmethod
    def _dev(counted, closed):
        if closed is None or closed == 0:
            return None
        return float((Fraction(counted) - closed) / closed)

    @property
    def param_deviation(self) -> float | None:
        return self._dev(self.counted_params, self.closed_params)

    @property
    def mac_deviation(self) -> float | None:
        return self._dev(self.counted_macs, self.closed_macs)


@dataclass
class ComplexityReport:
    height: int
    width: int
    rows: list = field(default_factory=list)
    all_params: int = 0          # every parameter, biases and prior included
    other_multiplies: int = 0    # elementwise data-data products, informational

    @property
    def total_params(self) -> int:
        return sum(r.counted_params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.counted_macs for r in self.rows)

    @property
    def kmacs_per_pixel(self) -> float:
        return self.total_macs / (self.height * self.width * 1000.0)

    def by_kind(self, kind: str) -> list:
        return [r for r in self.rows if r.kind == kind]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "closed_params", "counted_params", "param_dev",
                    "closed_macs", "counted_macs", "mac_dev"])
        for r in self.rows:
            w.writerow([r.name, r.kind, _fmt(r.closed_params), r.counted_params,
                        _fmt_dev(r.param_deviation), _fmt(r.closed_macs), r.counted_macs,
                        _fmt_dev(r.mac_deviation)])
        w.writerow(["TOTAL", "", "", self.total_params, "", "", self.total_macs, ""])
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'layer':<34}{'kind':<9}{'params':>11}{'dev':>9}{'MACs':>15}{'dev':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.name:<34}{r.kind:<9}{r.counted_params:>11}{_fmt_dev(r.param_deviation):>9}"
                         f"{r.counted_macs:>15}{_fmt_dev(r.mac_deviation):>9}")
        lines.append("-" * len(head))
        lines.append(f"{'total':<43}{self.total_params:>11}{'':>9}{self.total_macs:>15}")
        lines.append(f"all parameters (with biases): {self.all_params}")
        lines.append(f"KMACs/pixel at {self.width}x{self.height}: {self.kmacs_per_pixel:.2f}")
        return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return ""
    return str(v.numerator) if v.denominator == 1 else f"{float(v):.3f}"


def _fmt_dev(v) -> str:
    return "" if v is None else f"{100 * v:+.2f}%"


def _rows(module: Module, path: str, shapes: dict, macs: dict, out: list) -> None:
    def macs_under(prefix):
        return sum(v for k, v in macs.items() if k == prefix or k.startswith(prefix + "."))

    def hw(prefix):
        shp = shapes.get(prefix)
        return (shp[2], shp[3]) if shp and len(shp) == 4 else (0, 0)

    if isinstance(module, SpatialShiftBlock):
        h, w = hw(path)
        cp, cm = closed_form("ssb", module.cin, module.cout, max(h, 1), max(w, 1))
        out.append(LayerRow(path, "ssb", cp, module.weight_count(), cm if h else None, macs_under(path)))
    elif isinstance(module, ChannelRecursiveAttention):
        h, w = hw(path)
        cp, cm = closed_form("cra", module.channels, module.channels, max(h, 1), max(w, 1))
        out.append(LayerRow(path, "cra", cp, module.weight_count(), cm if h else None, macs_under(path)))
    elif isinstance(module, Conv1x1):
        cin, cout = module.weight.shape[1], module.weight.shape[0]
        h, w = hw(path)
        out.append(LayerRow(path, "conv1x1", Fraction(cin * cout), module.weight_count(),
                            Fraction(h * w * cin * cout) if h else None, macs_under(path)))
    elif isinstance(module, DepthwiseConv3x3):
        c = module.weight.shape[0]
        h, w = hw(path)
        out.append(LayerRow(path, "dwconv", Fraction(9 * c), module.weight_count(),
                            Fraction(9 * c * h * w) if h else None, macs_under(path)))
    elif isinstance(module, FactorizedPrior):
        out.append(LayerRow(path, "prior", None, module.weight_count(), None, 0))
    else:
        for key, child in module.children():
            _rows(child, f"{path}.{key}" if path else key, shapes, macs, out)


def count_model(model: Module, H: int, W: int) -> ComplexityReport:
    """Per-layer weights and weight multiplies for one (1, 3, H, W) image.

    ``model`` may be a full :class:`Model` (all four transforms run) or any
    single module taking a rank-4 tensor, in which case the input width is
    inferred from its first layer.
    """
    report = ComplexityReport(H, W)
    report.all_params = model.param_count()
    if not model.parameters() and not list(model.children()):
        return report
    with count_macs() as ctr:
        if isinstance(model, Model):
            cfg = model.config
            x = Tensor(np.zeros((1, 3, H, W), np.float32))
            y = model.g_a(x)
            model.h_a(y)
            z = Tensor(np.zeros((1, cfg.hyper_width, H // 64, W // 64), np.float32))
            model.h_s(z)
            model.g_s(Tensor(np.zeros(y.shape, np.float32)))
        else:
            cin = _input_width(model)
            model(Tensor(np.zeros((1, cin, H, W), np.float32)))
    prefix = model.name if not isinstance(model, Model) else ""
    _rows(model, prefix, ctr.shapes, ctr.macs, report.rows)
    report.other_multiplies = ctr.total_other
    return report


def _input_width(module: Module) -> int:
    if isinstance(module, SpatialShiftBlock):
        return module.cin
    if isinstance(module, ChannelRecursiveAttention):
        return module.channels
    if isinstance(module, Conv1x1):
        return module.weight.shape[1]
    if isinstance(module, DepthwiseConv3x3):
        return module.weight.shape[0]
    for _, child in module.children():
        return _input_width(child)
    raise ValueError("cannot infer input width of an empty module")


def empty_model() -> Module:
    return Sequential()


# ---------------------------------------------------------------------------
# BD-rate


@dataclass
class RdCurve:
    points: list   # (bpp, quality_db), strictly increasing bpp

    def __post_init__(self):
        pts = [(float(r), float(q)) for r, q in self.points]
        if any(not np.isfinite(q) or not np.isfinite(r) or r <= 0 for r, q in pts):
            raise ValueError("RD points need positive finite rate and finite quality")
        pts.sort()
        if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise ValueError("RD curve rates must be strictly increasing")
        self.points = pts

    @property
    def rates(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @classmethod
    def from_csv(cls, path) -> "RdCurve":
        pts = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    pts.append((float(row[0]), float(row[1])))
                except (ValueError, IndexError):
                    continue    # header line
        return cls(pts)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bpp", "quality_db"])
            w.writerows(self.points)


class BdRateError(ValueError):
    pass


def bd_rate(anchor: RdCurve, test: RdCurve, samples: int = 1000,
            min_overlap_db: float = 1.0) -> float:
    """Average rate difference of ``test`` vs ``anchor`` at equal quality, in percent."""
    for name, c in (("anchor", anchor), ("test", test)):
        if len(c.points) < 4:
            raise BdRateError(f"{name} curve has {len(c.points)} points; at least 4 required")
    qa, qt = anchor.qualities, test.qualities
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if hi - lo < min_overlap_db:
        raise BdRateError(f"quality overlap {max(hi - lo, 0):.3f} dB is below {min_overlap_db} dB")
    # fit log-rate against quality, centred for conditioning
    c = 0.5 * (lo + hi)
    pa = np.polyfit(qa - c, np.log(anchor.rates), 3)
    pt = np.polyfit(qt - c, np.log(test.rates), 3)
    q = np.linspace(lo, hi, samples) - c
    ia = np.trapezoid(np.polyval(pa, q), q)
    it = np.trapezoid(np.polyval(pt, q), q)
    avg = (it - ia) / (hi - lo)
    return 100.0 * (np.exp(avg) - 1.0)


def bd_rate_per_kmacs(bd: float, kmacs_per_pixel: float) -> float:
    """BD-rate divided by MACs per pixel (``KMACs/pixel * 1000``)."""
    return bd / (kmacs_per_pixel * 1000.0)


# ---------------------------------------------------------------------------
# dataset evaluation


class EmptyDatasetError(ValueError):
    pass


@dataclass
class EvalRow:
    image: str
    bpp: float | None
    psnr_db: float | None
    msssim: float | None
    msssim_db: float | None
    error: str = ""


@dataclass
class EvalResult:
    rows: list

    @property
    def ok_rows(self) -> list:
        return [r for r in self.rows if not r.error]

    def mean(self, key: str) -> float:
        vals = [getattr(r, key) for r in self.ok_rows]
        return float(np.mean(vals)) if vals else float("nan")

    def point(self) -> tuple[float, float]:
        return self.mean("bpp"), self.mean("psnr_db")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "bpp", "psnr_db", "msssim", "msssim_db"])
            for r in self.rows:
                if r.error:
                    fh.write(f"# skipped {r.image}: {r.error}\n")
                    w.writerow([r.image, "nan", "nan", "nan", "nan"])
                else:
                    w.writerow([r.image, f"{r.bpp:.6f}", f"{r.psnr_db:.4f}", f"{r.msssim:.6f}",
                                f"{r.msssim_db:.4f}"])


def eval_image(model: Model, x: np.ndarray) -> tuple[float, float, float]:
    """Encode and decode one (3,H,W) image; returns (bpp, PSNR, MS-SSIM)."""
    bs, _ = compress(x, model)
    x_hat, _ = decompress(bs.to_bytes(), model)
    x = np.asarray(x)[None]
    rec = np.floor(x_hat * 255.0 + 0.5) / 255.0
    return bs.bpp(), psnr(x, rec), _msssim_safe(x, rec)


def _msssim_safe(x, rec) -> float:
    # five dyadic scales need at least 16 pixels per side to stay defined
    if min(x.shape[-2:]) < 16:
        return float("nan")
    return ms_ssim(x, rec)


def eval_dataset(model: Model, folder, csv_path=None) -> EvalResult:
    folder = Path(folder)
    if not folder.is_dir():
        raise EmptyDatasetError(f"{folder} is not a directory")
    paths = list_images(folder)
    if not paths:
        raise EmptyDatasetError(f"no .ppm images in {folder}")
    rows = []
    for p in paths:
        try:
            x = read_ppm(p)
        except (OSError, ImageFormatError) as exc:
            log.warning("skipping %s: %s", p.name, exc)
            rows.append(EvalRow(p.name, None, None, None, None, str(exc)))
            continue
        t = time.perf_counter()
        bpp, q, m = eval_image(model, x)
        log.info("%s: %.4f bpp, %.2f dB (%.1fs)", p.name, bpp, q, time.perf_counter() - t)
        rows.append(EvalRow(p.name, bpp, q, m, ssim_db(m) if np.isfinite(m) else float("nan")))
    res = EvalResult(rows)
    if csv_path is not None:
        res.write_csv(csv_path)
    return res
