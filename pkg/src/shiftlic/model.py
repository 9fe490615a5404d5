"""ShiftLIC transforms, model configuration and checkpoint I/O."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .cra import ChannelRecursiveAttention
from .entropy import SIGMA_MIN, FactorizedPrior, GaussianConditional
from .nn import Conv1x1, Module, PixelRearrange, Sequential
from .shift import ShiftSpec, SpatialShiftBlock
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    scale: str = "medium"
    N: int = 192
    M: int = 320
    ssb_per_stage: int = 3
    hyper_ssb: tuple = (2, 1)
    cra_enabled: bool = True
    cra_stages: tuple = (2, 4)
    cra_groups: int = 4
    shuffle_groups: int = 8
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    hyper_width: int = 192
    hyper_hidden: int = 256
    # per-stage widths of the main transforms; None means N everywhere
    stage_widths: tuple | None = None
    sigma_min: float = SIGMA_MIN
    activation: str = "gelu"
    # init-only: scales the last analysis conv up and the first synthesis conv
    # down so y starts out spanning several quantization bins
    latent_gain: float = 50.0
    # ablation switches
    use_shift: bool = True
    use_conv2: bool = True
    cra_local: bool = True
    cra_fuse_shuffle: bool = True

    def __post_init__(self):
        if self.scale not in ("small", "medium"):
            raise ValueError(f"unknown scale {self.scale!r}")
        if isinstance(self.shift, dict):
            self.shift = ShiftSpec.from_dict(self.shift)
        self.hyper_ssb = tuple(self.hyper_ssb)
        self.cra_stages = tuple(self.cra_stages)
        if self.stage_widths is not None:
            self.stage_widths = tuple(self.stage_widths)
            if len(self.stage_widths) != 4:
                raise ValueError("stage_widths needs four entries")
        for w in self.widths:
            if w % self.shift.groups:
                raise ValueError(f"width {w} not divisible by {self.shift.groups} shift groups")
            if self.cra_enabled and w % self.cra_groups:
                raise ValueError(f"width {w} not divisible by {self.cra_groups} CRA groups")
        if self.hyper_hidden % self.shift.groups:
            raise ValueError("hyper_hidden not divisible by shift groups")
        if not self.latent_gain > 0:
            raise ValueError("latent_gain must be positive")

    @property
    def widths(self) -> tuple:
        return self.stage_widths or (self.N,) * 4

    @classmethod
    def small(cls, **kw) -> "ModelConfig":
        return cls(**{"scale": "small", "cra_enabled": False, **kw})

    @classmethod
    def medium(cls, **kw) -> "ModelConfig":
        return cls(**{"scale": "medium", "cra_enabled": True, **kw})

    @classmethod
    def tiny(cls, scale: str = "medium", **kw) -> "ModelConfig":
        """Desk-scale model for CPU training experiments."""
        base = {"scale": scale, "N": 32, "M": 64, "hyper_width": 48, "hyper_hidden": 32,
                "cra_enabled": scale == "medium"}
        return cls(**{**base, **kw})

    @classmethod
    def preset(cls, name: str, **kw) -> "ModelConfig":
        presets = {"small": cls.small, "medium": cls.medium,
                   "tiny": cls.tiny, "tiny-small": lambda **k: cls.tiny("small", **k)}
        if name not in presets:
            raise ValueError(f"unknown config preset {name!r}; choose from {sorted(presets)}")
        return presets[name](**kw)

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shift"] = self.shift.to_dict()
        d["hyper_ssb"] = list(self.hyper_ssb)
        d["cra_stages"] = list(self.cra_stages)
        d["stage_widths"] = list(self.stage_widths) if self.stage_widths else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def config_id(self) -> int:
        """One-byte identifier stored in bitstreams."""
        if self == ModelConfig.small():
            return 0
        if self == ModelConfig.medium():
            return 1
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return 0x80 | (zlib.crc32(blob) & 0x7F)


def _ssb(cfg: ModelConfig, cin: int, cout: int, rng) -> SpatialShiftBlock:
    return SpatialShiftBlock(cin, cout, cfg.shift, rng, use_shift=cfg.use_shift,
                             use_conv2=cfg.use_conv2, activation=cfg.activation)


def _cra(cfg: ModelConfig, ch: int, rng) -> ChannelRecursiveAttention:
    return ChannelRecursiveAttention(
        ch, rng, n_groups=cfg.cra_groups, shuffle_groups=cfg.shuffle_groups, spec=cfg.shift,
        use_local=cfg.cra_local, fuse_shuffle=cfg.cra_fuse_shuffle,
        ssb_kwargs={"use_shift": cfg.use_shift, "use_conv2": cfg.use_conv2,
                    "activation": cfg.activation})


def build_analysis(cfg: ModelConfig, rng) -> Sequential:
    stages, names = [], []
    prev = 3
    for k, w in enumerate(cfg.widths, start=1):
        layers = [PixelRearrange(2, "space_to_channel"), Conv1x1(4 * prev, w, rng)]
        lnames = ["unshuffle", "reduce"]
        layers += [_ssb(cfg, w, w, rng) for _ in range(cfg.ssb_per_stage)]
        lnames += [f"ssb{i + 1}" for i in range(cfg.ssb_per_stage)]
        if cfg.cra_enabled and k in cfg.cra_stages:
            layers.append(_cra(cfg, w, rng))
            lnames.append("cra")
        stages.append(Sequential(*layers, names=lnames))
        names.append(f"stage{k}")
        prev = w
    stages.append(Conv1x1(prev, cfg.M, rng))
    names.append("out")
    return Sequential(*stages, names=names)


def build_synthesis(cfg: ModelConfig, rng) -> Sequential:
    widths = cfg.widths
    stages: list[Module] = [Conv1x1(cfg.M, widths[-1], rng)]
    names = ["in"]
    for k in range(4, 0, -1):
        w = widths[k - 1]
        nxt = widths[k - 2] if k > 1 else 3
        layers: list[Module] = []
        lnames: list[str] = []
        if cfg.cra_enabled and k in cfg.cra_stages:
            layers.append(_cra(cfg, w, rng))
            lnames.append("cra")
        layers += [_ssb(cfg, w, w, rng) for _ in range(cfg.ssb_per_stage)]
        lnames += [f"ssb{i + 1}" for i in range(cfg.ssb_per_stage)]
        layers += [Conv1x1(w, 4 * nxt, rng), PixelRearrange(2, "channel_to_space")]
        lnames += ["expand", "shuffle"]
        stages.append(Sequential(*layers, names=lnames))
        names.append(f"stage{k}")
    return Sequential(*stages, names=names)


def build_hyper_analysis(cfg: ModelConfig, rng) -> Sequential:
    n_ssb = cfg.hyper_ssb[0]
    hid = cfg.hyper_hidden
    stages = []
    prev = cfg.M
    lnames = ["unshuffle", "reduce"] + [f"ssb{i + 1}" for i in range(n_ssb)]
    for _ in range(2):
        layers = [PixelRearrange(2, "space_to_channel"), Conv1x1(4 * prev, hid, rng)]
        layers += [_ssb(cfg, hid, hid, rng) for _ in range(n_ssb)]
        stages.append(Sequential(*layers, names=lnames))
        prev = hid
    stages.append(Conv1x1(hid, cfg.hyper_width, rng))
    return Sequential(*stages, names=["stage1", "stage2", "out"])


def build_hyper_synthesis(cfg: ModelConfig, rng) -> Sequential:
    n_ssb = cfg.hyper_ssb[1]
    hid = cfg.hyper_hidden
    stages: list[Module] = [Conv1x1(cfg.hyper_width, hid, rng)]
    lnames = [f"ssb{i + 1}" for i in range(n_ssb)] + ["expand", "shuffle"]
    for nxt in (hid, 2 * cfg.M):
        layers: list[Module] = [_ssb(cfg, hid, hid, rng) for _ in range(n_ssb)]
        layers += [Conv1x1(hid, 4 * nxt, rng), PixelRearrange(2, "channel_to_space")]
        stages.append(Sequential(*layers, names=lnames))
    return Sequential(*stages, names=["in", "stage2", "stage1"])


class Model(Module):
    """Main and hyper transforms plus the learned prior of z."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.g_a = build_analysis(config, rng)
        self.g_s = build_synthesis(config, rng)
        self.h_a = build_hyper_analysis(config, rng)
        self.h_s = build_hyper_synthesis(config, rng)
        self.prior = FactorizedPrior(config.hyper_width, rng)
        self.gaussian = GaussianConditional(scale_min=config.sigma_min)
        g = config.latent_gain
        if g != 1.0:
            dict(self.g_a.children())["out"].weight.data *= g
            dict(self.g_s.children())["in"].weight.data /= g
        self.assign_names()

    def children(self):
        for key in ("g_a", "g_s", "h_a", "h_s", "prior"):
            yield key, getattr(self, key)

    def named_parameters(self, prefix: str = ""):
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def assign_names(self, prefix: str = "") -> None:
        for key, child in self.children():
            child.name = key
            child.assign_names(f"{prefix}{key}.")
        for key, p in self.named_parameters(prefix):
            p.name = key

    def forward(self, x):
        raise TypeError("use analysis_transform / synthesis_transform or training.forward_rd")


def analysis_transform(x: Tensor, m: Model) -> Tensor:
    _, C, H, W = x.shape
    if C != 3:
        raise ShapeError(f"analysis_transform: expected 3 channels, got {C}")
    if H % 64 or W % 64:
        raise ShapeError(f"analysis_transform: {H}x{W} must be multiples of 64 (pad first)")
    return m.g_a(x)


def synthesis_transform(y_hat: Tensor, m: Model) -> Tensor:
    if y_hat.shape[1] != m.config.M:
        raise ShapeError(f"synthesis_transform: expected {m.config.M} channels, got {y_hat.shape[1]}")
    return m.g_s(y_hat)


def hyper_analysis(y: Tensor, m: Model) -> Tensor:
    _, _, h, w = y.shape
    if h % 4 or w % 4:
        raise ShapeError(f"hyper_analysis: {h}x{w} not divisible by 4")
    return m.h_a(y)


def hyper_synthesis(z_hat: Tensor, m: Model) -> tuple[Tensor, Tensor]:
    """Mean and scale of y; scale = softplus(raw) + sigma_min."""
    out = m.h_s(z_hat)
    M = m.config.M
    mu = ops.channel_slice(out, 0, M)
    raw = ops.channel_slice(out, M, 2 * M)
    sigma = ops.add(ops.softplus(raw), Tensor(np.asarray(m.config.sigma_min, dtype=out.dtype)))
    return mu, sigma


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SLICW\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(m: Model, path, seed: int | None = None) -> None:
    """Magic, version byte, JSON config block, then a name/shape/float32-LE table."""
    cfg = json.dumps(m.config.to_dict(), sort_keys=True).encode()
    parts = [CKPT_MAGIC, bytes([CKPT_VERSION]), struct.pack("<I", len(cfg)), cfg]
    params = list(m.named_parameters())
    parts.append(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode()
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, config: ModelConfig | None = None) -> Model:
    """Rebuild a model; with ``config`` given, the file must match it exactly."""
    with open(path, "rb") as fh:
        data = fh.read()
    rd = _Reader(data)
    if rd.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError("not a ShiftLIC checkpoint (bad magic)")
    (version,) = rd.unpack("<B")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = rd.unpack("<I")
    try:
        file_cfg = ModelConfig.from_dict(json.loads(rd.take(n).decode()))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from exc
    (count,) = rd.unpack("<I")
    table = {}
    for _ in range(count):
        (ln,) = rd.unpack("<H")
        name = rd.take(ln).decode()
        (nd,) = rd.unpack("<B")
        shape = rd.unpack(f"<{nd}I")
        size = int(np.prod(shape)) if nd else 1
        arr = np.frombuffer(rd.take(4 * size), dtype="<f4").reshape(shape)
        table[name] = arr
    if rd.pos != len(data):
        raise CheckpointError(f"{len(data) - rd.pos} trailing bytes in checkpoint")
    model = Model(config or file_cfg)
    for name, p in model.named_parameters():
        if name not in table:
            raise CheckpointError(f"parameter {name} missing from checkpoint")
        if table[name].shape != p.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {table[name].shape} "
                                  f"disagrees with config shape {p.shape}")
    extra = set(table) - {n for n, _ in model.named_parameters()}
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameter {sorted(extra)[0]}")
    for name, p in model.named_parameters():
        p.value = table[name].astype(np.float32)
    return model
