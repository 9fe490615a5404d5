"""Image <-> bitstream: padding, latent coding and the container format.

Container layout (all integers big-endian)::

    b"SLIC" | version u8 | config id u8 | lambda index u8 | height u16 | width u16
    | z length u32 | z bytes | y length u32 | y bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .entropy import ESCAPE_OFFSET, UNIFORM_BYTE_CDF, round_half_away
from .model import Model, analysis_transform, hyper_analysis, hyper_synthesis, synthesis_transform
from .rangecoder import RangeCoderError, RangeDecoder, RangeEncoder
from .tensor import Tensor

MAGIC = b"SLIC"
VERSION = 1
PAD_MULTIPLE = 64
_HEADER = struct.Struct(">4sBBBHH")


class BitstreamError(ValueError):
    pass


@dataclass
class Bitstream:
    config_id: int
    lambda_index: int
    height: int
    width: int
    z_payload: bytes
    y_payload: bytes
    version: int = VERSION

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, self.version, self.config_id, self.lambda_index,
                            self.height, self.width)
        return b"".join([head, struct.pack(">I", len(self.z_payload)), self.z_payload,
                         struct.pack(">I", len(self.y_payload)), self.y_payload])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise BitstreamError("stream shorter than header")
        magic, version, cid, lam, h, w = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError("bad magic")
        if version != VERSION:
            raise BitstreamError(f"unsupported stream version {version}")
        pos = _HEADER.size
        payloads = []
        for name in ("z", "y"):
            if pos + 4 > len(data):
                raise BitstreamError(f"truncated before {name} length")
            (n,) = struct.unpack_from(">I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise BitstreamError(f"{name} payload truncated: declared {n}, have {len(data) - pos}")
            payloads.append(bytes(data[pos:pos + n]))
            pos += n
        if pos != len(data):
            raise BitstreamError(f"{len(data) - pos} trailing bytes after y payload")
        return cls(cid, lam, h, w, payloads[0], payloads[1], version)

    def __len__(self) -> int:
        return _HEADER.size + 8 + len(self.z_payload) + len(self.y_payload)

    def bpp(self) -> float:
        return 8.0 * len(self) / (self.height * self.width)


@dataclass
class Latents:
    y_hat: np.ndarray
    z_hat: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


def pad_image(x: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Replicate-pad right/bottom so both sides are multiples of ``multiple``."""
    _, _, H, W = x.shape
    ph = (-H) % multiple
    pw = (-W) % multiple
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ValueError(f"expected a single (3,H,W) image, got shape {x.shape}")
    return x


def _encode_values(enc: RangeEncoder, values: np.ndarray, offsets: np.ndarray, cdfs) -> None:
    """values/offsets are flat int arrays; cdfs[i] codes values[i] - offsets[i]."""
    idx = (values - offsets).tolist()
    for s, cdf in zip(idx, cdfs):
        esc = len(cdf) - 2
        if 0 <= s < esc:
            start = cdf[s]
            enc.encode(start, cdf[s + 1] - start)
            continue
        enc.encode(cdf[esc], cdf[esc + 1] - cdf[esc])
        v = s + ESCAPE_OFFSET
        if not 0 <= v < (1 << 16):
            raise ValueError(f"latent index {s} outside the escape window")
        enc.encode(UNIFORM_BYTE_CDF[v >> 8], 256)
        enc.encode(UNIFORM_BYTE_CDF[v & 0xFF], 256)


def _decode_values(dec: RangeDecoder, offsets: np.ndarray, cdfs) -> np.ndarray:
    out = np.empty(len(cdfs), dtype=np.int64)
    for i, cdf in enumerate(cdfs):
        s = dec.decode_symbol(cdf)
        if s == len(cdf) - 2:
            hi = dec.decode_symbol(UNIFORM_BYTE_CDF)
            lo = dec.decode_symbol(UNIFORM_BYTE_CDF)
            s = ((hi << 8) | lo) - ESCAPE_OFFSET
        out[i] = s
    return out + offsets


def _z_tables(model: Model, shape):
    _, C, h, w = shape
    offsets, cdfs = model.prior.coding_tables()
    per = h * w
    flat_off = np.repeat(offsets, per)
    flat_cdfs = [cdfs[c] for c in range(C) for _ in range(per)]
    return flat_off, flat_cdfs


def _y_tables(model: Model, sigma: np.ndarray):
    g = model.gaussian
    t = g.index(sigma.reshape(-1).astype(np.float64))
    half = np.asarray(g.half_ranges)[t]
    return -half, [g.cdfs[i] for i in t.tolist()]


def compress(x: np.ndarray, model: Model, lambda_index: int = 0) -> tuple[Bitstream, Latents]:
    """Encode one image with values in [0, 1]."""
    x = _as_batch(x)
    _, _, H, W = x.shape
    if H > 0xFFFF or W > 0xFFFF:
        raise ValueError("image too large for the 16-bit size header")
    xp = Tensor(pad_image(x))
    y = analysis_transform(xp, model).data
    z = hyper_analysis(Tensor(y), model).data
    z_hat = round_half_away(z).astype(np.float32)

    enc = RangeEncoder()
    z_off, z_cdfs = _z_tables(model, z_hat.shape)
    _encode_values(enc, z_hat.reshape(-1).astype(np.int64), z_off, z_cdfs)
    z_bytes = enc.finish()

    mu, sigma = hyper_synthesis(Tensor(z_hat), model)
    mu, sigma = mu.data, sigma.data
    resid = round_half_away(y - mu).astype(np.int64)
    y_hat = (mu + resid).astype(np.float32)

    enc = RangeEncoder()
    y_off, y_cdfs = _y_tables(model, sigma)
    _encode_values(enc, resid.reshape(-1), y_off, y_cdfs)
    y_bytes = enc.finish()

    bs = Bitstream(model.config.config_id(), lambda_index, H, W, z_bytes, y_bytes)
    return bs, Latents(y_hat, z_hat, mu, sigma)


def decompress(bs: Bitstream | bytes, model: Model) -> tuple[np.ndarray, Latents]:
    """Decode to a (1, 3, H, W) float image clamped to [0, 1]."""
    if not isinstance(bs, Bitstream):
        bs = Bitstream.from_bytes(bs)
    if bs.config_id != model.config.config_id():
        raise BitstreamError(f"stream config id {bs.config_id} does not match model "
                             f"config id {model.config.config_id()}")
    Hp = bs.height + (-bs.height) % PAD_MULTIPLE
    Wp = bs.width + (-bs.width) % PAD_MULTIPLE
    cfg = model.config
    z_shape = (1, cfg.hyper_width, Hp // 64, Wp // 64)
    y_shape = (1, cfg.M, Hp // 16, Wp // 16)
    try:
        dec = RangeDecoder(bs.z_payload)
        z_off, z_cdfs = _z_tables(model, z_shape)
        z_hat = _decode_values(dec, z_off, z_cdfs).reshape(z_shape).astype(np.float32)
        if not dec.exhausted:
            raise BitstreamError("z payload has trailing bytes")
        mu, sigma = hyper_synthesis(Tensor(z_hat), model)
        mu, sigma = mu.data, sigma.data
        dec = RangeDecoder(bs.y_payload)
        y_off, y_cdfs = _y_tables(model, sigma)
        resid = _decode_values(dec, y_off, y_cdfs).reshape(y_shape)
        if not dec.exhausted:
            raise BitstreamError("y payload has trailing bytes")
    except RangeCoderError as exc:
        raise BitstreamError(f"corrupt stream: {exc}") from exc
    y_hat = (mu + resid).astype(np.float32)
    x_hat = synthesis_transform(Tensor(y_hat), model).data
    x_hat = np.clip(x_hat[:, :, :bs.height, :bs.width], 0.0, 1.0)
    return x_hat, Latents(y_hat, z_hat, mu, sigma)


def encode_image(x: np.ndarray, model: Model, lambda_index: int = 0) -> Bitstream:
    return compress(x, model, lambda_index)[0]


def decode_image(bs: Bitstream | bytes, model: Model) -> np.ndarray:
    return decompress(bs, model)[0]
