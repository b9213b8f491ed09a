"""The ``.d2gv`` container.

All fields are little-endian.

File header (20 bytes, then the offsets table)::

    magic "D2GV" | version u16 | width u16 | height u16 | gop_size u16
    | gop_count u32 | flags u32 (bit 0: quantized) | gop_count x u64 record offsets

GoP record::

    n_prims u32 | n_frames u16 | integrator u8 (0 rk4, 1 euler, 2 direct)
    | net flags u8 (bit 0 state-conditioned, bit 1 no dc, bit 2 no gate)
    | steps_per_unit u16 | latent_dim u16 | hidden u16 | pos_bands u8 | time_bands u8
    | first_frame u32 | n_frames x f32 timestamps
    | [quantized only: mu min 2xf32, mu max 2xf32, colour min 3xf32, colour max 3xf32]
    | primitive block, in transmission (prune ranking) order
    | 8 weight arrays W1 b1 W2 b2 Wd bd Wo bo, each: ndim u8 | ndim x u32 | f32 data

A primitive is 8 f32 (mu x, mu y, log_sx, log_sy, theta, r, g, b), 32 bytes,
or when quantized 16 bytes: mu 2 x u16 and colour 3 x u16 uniform over the
GoP's min/max, then log_sx, log_sy, theta as f16.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .deformation import INTEGRATORS, PARAM_NAMES, DeformationNet
from .gaussian import GaussianSet
from .metrics import bpp
from .model import GopModel, param_count
from .pruning import BudgetWarning

MAGIC = b"D2GV"
VERSION = 1
FLAG_QUANTIZED = 1

_HEADER = struct.Struct("<4sHHHHII")
_RECORD = struct.Struct("<IHBBHHHBBI")
PRIM_BYTES = 32
PRIM_BYTES_QUANTIZED = 16
_QMAX = 65535


class ContainerError(ValueError):
    pass


@dataclass(frozen=True)
class ContainerHeader:
    width: int
    height: int
    gop_size: int
    gop_count: int
    flags: int
    offsets: tuple[int, ...]
    version: int = VERSION

    @property
    def quantized(self) -> bool:
        return bool(self.flags & FLAG_QUANTIZED)

    @property
    def size(self) -> int:
        return _HEADER.size + 8 * self.gop_count


def _f32(x) -> bytes:
    return np.asarray(x, dtype="<f4").tobytes()


def _quant_range(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """f32 bounds enclosing ``values``: lo <= min and hi >= max after rounding to f32."""
    lo = values.min(axis=0).astype(np.float32) if len(values) else np.zeros(values.shape[1], np.float32)
    hi = values.max(axis=0).astype(np.float32) if len(values) else np.zeros(values.shape[1], np.float32)
    if len(values):
        lo = np.where(lo > values.min(axis=0), np.nextafter(lo, np.float32(-np.inf)), lo)
        hi = np.where(hi < values.max(axis=0), np.nextafter(hi, np.float32(np.inf)), hi)
    return lo.astype(np.float32), hi.astype(np.float32)


def _quantize(values, lo, hi) -> np.ndarray:
    span = hi.astype(np.float64) - lo.astype(np.float64)
    safe = np.where(span > 0, span, 1.0)
    q = np.round((values - lo.astype(np.float64)) / safe * _QMAX)
    return np.clip(q, 0, _QMAX).astype("<u2")


def _dequantize(q, lo, hi) -> np.ndarray:
    span = hi.astype(np.float64) - lo.astype(np.float64)
    return lo.astype(np.float64) + q.astype(np.float64) / _QMAX * span


def _net_flags(net: DeformationNet) -> int:
    return (1 if net.state_conditioned else 0) | (0 if net.use_dc else 2) | (0 if net.use_gate else 4)


def _encode_primitives(gs: GaussianSet, quantized: bool, ranges) -> bytes:
    n = len(gs)
    if not quantized:
        block = np.empty((n, 8), dtype="<f4")
        block[:, 0:2] = gs.mu
        block[:, 2:4] = gs.log_scale
        block[:, 4] = gs.theta
        block[:, 5:8] = gs.color
        return block.tobytes()
    mu_lo, mu_hi, c_lo, c_hi = ranges
    rec = np.empty(n, dtype=[("mu", "<u2", 2), ("c", "<u2", 3), ("ls", "<f2", 2), ("th", "<f2")])
    rec["mu"] = _quantize(gs.mu, mu_lo, mu_hi)
    rec["c"] = _quantize(gs.color, c_lo, c_hi)
    rec["ls"] = gs.log_scale
    rec["th"] = gs.theta
    return rec.tobytes()


def _decode_primitives(buf: bytes, n: int, quantized: bool, ranges) -> GaussianSet:
    if not quantized:
        block = np.frombuffer(buf, dtype="<f4", count=8 * n).reshape(n, 8).astype(np.float64)
        return GaussianSet(block[:, 0:2].copy(), block[:, 2:4].copy(), block[:, 4].copy(), block[:, 5:8].copy())
    mu_lo, mu_hi, c_lo, c_hi = ranges
    rec = np.frombuffer(buf, dtype=[("mu", "<u2", 2), ("c", "<u2", 3), ("ls", "<f2", 2), ("th", "<f2")],
                        count=n)
    return GaussianSet(_dequantize(rec["mu"], mu_lo, mu_hi), rec["ls"].astype(np.float64),
                       rec["th"].astype(np.float64), _dequantize(rec["c"], c_lo, c_hi))


def encode_record(model: GopModel, quantized: bool = False) -> bytes:
    net, gs = model.net, model.canonical
    parts = [_RECORD.pack(len(gs), model.n_frames, INTEGRATORS.index(net.integrator), _net_flags(net),
                          net.steps_per_unit, net.latent_dim, net.hidden, net.pos_bands,
                          net.time_bands, model.first_frame),
             _f32(model.timestamps)]
    ranges = None
    if quantized:
        ranges = _quant_range(gs.mu) + _quant_range(gs.color)
        parts += [_f32(ranges[0]), _f32(ranges[1]), _f32(ranges[2]), _f32(ranges[3])]
    parts.append(_encode_primitives(gs, quantized, ranges))
    for name in PARAM_NAMES:
        a = getattr(net, name)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + _f32(a))
    return b"".join(parts)


def encode(models: list[GopModel], quantize: bool = False) -> bytes:
    if not models:
        raise ValueError("nothing to save")
    w, h = models[0].width, models[0].height
    if any((m.width, m.height) != (w, h) for m in models):
        raise ValueError("all GoPs must share the frame size")
    gop_size = max(m.n_frames for m in models)
    records = [encode_record(m, quantize) for m in models]
    offsets, pos = [], _HEADER.size + 8 * len(models)
    for r in records:
        offsets.append(pos)
        pos += len(r)
    head = _HEADER.pack(MAGIC, VERSION, w, h, gop_size, len(models), FLAG_QUANTIZED if quantize else 0)
    return head + struct.pack(f"<{len(models)}Q", *offsets) + b"".join(records)


def save(models, path, quantize: bool = False) -> int:
    """Write ``models`` (a GopModel or list of them) to ``path``; returns the byte count.

    Primitives are written in their current order, so models should be
    finalized (sorted by the prune ranking) beforehand.
    """
    if isinstance(models, GopModel):
        models = [models]
    data = encode(list(models), quantize)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return len(data)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated file while reading {what}")
    return buf


def read_header(fh) -> ContainerHeader:
    raw = _read_exact(fh, _HEADER.size, "header")
    magic, version, w, h, gop_size, count, flags = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    if count < 1 or w < 1 or h < 1:
        raise ContainerError("corrupt header")
    offsets = struct.unpack(f"<{count}Q", _read_exact(fh, 8 * count, "offsets table"))
    if offsets[0] != _HEADER.size + 8 * count or any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise ContainerError("corrupt offsets table")
    return ContainerHeader(w, h, gop_size, count, flags, offsets, version)


def _read_record(fh, header: ContainerHeader, gop: int, keep: int | None = None) -> GopModel:
    fh.seek(header.offsets[gop])
    (n, n_frames, mode, nflags, steps, latent, hidden, pos_bands, time_bands,
     first) = _RECORD.unpack(_read_exact(fh, _RECORD.size, "record header"))
    if mode >= len(INTEGRATORS):
        raise ContainerError(f"unknown integrator code {mode}")
    ts = np.frombuffer(_read_exact(fh, 4 * n_frames, "timestamps"), dtype="<f4").astype(np.float64)
    quantized = header.quantized
    ranges = None
    if quantized:
        vals = np.frombuffer(_read_exact(fh, 40, "quantizer ranges"), dtype="<f4")
        ranges = (vals[0:2], vals[2:4], vals[4:7], vals[7:10])
    size = PRIM_BYTES_QUANTIZED if quantized else PRIM_BYTES
    k = n if keep is None else keep
    block_start = fh.tell()
    gs = _decode_primitives(_read_exact(fh, k * size, "primitives"), k, quantized, ranges)
    fh.seek(block_start + n * size)
    weights = {}
    for name in PARAM_NAMES:
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1, name))
        shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, name))
        count = int(np.prod(shape)) if ndim else 1
        weights[name] = np.frombuffer(_read_exact(fh, 4 * count, name), dtype="<f4").reshape(shape).astype(np.float64)
    net = DeformationNet(**weights, width=header.width, height=header.height, pos_bands=pos_bands,
                         time_bands=time_bands, integrator=INTEGRATORS[mode], steps_per_unit=steps,
                         state_conditioned=bool(nflags & 1), use_dc=not nflags & 2, use_gate=not nflags & 4)
    if (net.latent_dim, net.hidden) != (latent, hidden):
        raise ContainerError("weight shapes disagree with the record header")
    model = GopModel(gs, net, ts, header.width, header.height, first)
    model.mark_stored_order()
    return model


def stored_count(path, gop: int = 0) -> int:
    with open(path, "rb") as fh:
        header = read_header(fh)
        fh.seek(header.offsets[gop])
        return struct.unpack("<I", _read_exact(fh, 4, "record header"))[0]


def load(path) -> list[GopModel]:
    with open(path, "rb") as fh:
        header = read_header(fh)
        return [_read_record(fh, header, g) for g in range(header.gop_count)]


def load_prefix(path, gop: int = 0, budget: int | None = None, keep_ratio: float | None = None) -> GopModel:
    """GoP ``gop`` with only its first K stored primitives (K = budget or round(ratio * N)).

    Bytes past the K-th primitive are skipped, not read.
    """
    if (budget is None) == (keep_ratio is None):
        raise ValueError("give exactly one of budget or keep_ratio")
    with open(path, "rb") as fh:
        header = read_header(fh)
        if not 0 <= gop < header.gop_count:
            raise IndexError(f"GoP {gop} out of range (file has {header.gop_count})")
        fh.seek(header.offsets[gop])
        n = struct.unpack("<I", _read_exact(fh, 4, "record header"))[0]
        if keep_ratio is not None:
            if not 0.0 <= keep_ratio <= 1.0:
                raise ValueError("keep_ratio must lie in [0, 1]")
            budget = int(round(keep_ratio * n))
        if budget < 0:
            raise ValueError("budget must be non-negative")
        if budget > n:
            warnings.warn(f"budget {budget} exceeds the {n} stored primitives; clamped", BudgetWarning,
                          stacklevel=2)
            budget = n
        return _read_record(fh, header, gop, keep=budget)


def info(path) -> dict:
    """Header fields plus per-GoP primitive counts and parameter totals."""
    models = load(path)
    with open(path, "rb") as fh:
        header = read_header(fh)
    size = Path(path).stat().st_size
    frames = sum(m.n_frames for m in models)
    return {
        "version": header.version, "width": header.width, "height": header.height,
        "gop_size": header.gop_size, "gop_count": header.gop_count, "quantized": header.quantized,
        "frames": frames, "primitives": [m.n_prims for m in models], "bytes": size,
        "param_count": param_count(models), "bpp": bpp(size, header.width, header.height, frames),
    }
