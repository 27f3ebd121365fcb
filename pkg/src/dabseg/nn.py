"""Network building blocks on top of the autodiff engine.

Parameter discovery walks module attributes in insertion order, so the
named-parameter map (and therefore checkpoint layout, optimizer state
order, and gradient accumulation order) is deterministic for a given
architecture.
"""

from __future__ import annotations

import io
import math
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def _collect(value, key: str, out: dict):
    if isinstance(value, Tensor):
        if value.requires_grad:
            out[key] = value
    elif isinstance(value, Module):
        value_params = value.named_parameters(f"{key}.")
        out.update(value_params)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _collect(item, f"{key}.{i}", out)


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            _collect(value, f"{prefix}{name}", out)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def kaiming_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return Tensor(w.astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Conv3d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, pad=0, bias=True, dtype=np.float64):
        self.stride = stride
        self.pad = pad
        self.w = kaiming_init(rng, (cout, cin, kernel, kernel, kernel), cin * kernel**3, dtype)
        self.b = zeros_param((cout,), dtype) if bias else None

    def __call__(self, x) -> Tensor:
        return ad.conv3d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class InstanceNorm3d(Module):
    def __init__(self, channels, dtype=np.float64, eps=1e-5):
        self.eps = eps
        self.gamma = ones_param((channels,), dtype)
        self.beta = zeros_param((channels,), dtype)

    def __call__(self, x) -> Tensor:
        return ad.instance_norm(x, self.gamma, self.beta, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, channels, dtype=np.float64, eps=1e-5):
        self.eps = eps
        self.gamma = ones_param((channels,), dtype)
        self.beta = zeros_param((channels,), dtype)

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True, dtype=np.float64):
        self.w = kaiming_init(rng, (cin, cout), cin, dtype)
        self.b = zeros_param((cout,), dtype) if bias else None

    def __call__(self, x) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


class ConvBlock3d(Module):
    """conv -> InstanceNorm3d -> leaky_relu, spatial shape preserved for odd k."""

    def __init__(self, cin, cout, kernel, rng, pad=None, norm=True, act=True, dtype=np.float64):
        if pad is None:
            pad = kernel // 2
        self.conv = Conv3d(cin, cout, kernel, rng, pad=pad, dtype=dtype)
        self.norm = InstanceNorm3d(cout, dtype=dtype) if norm else None
        self.act = act

    def __call__(self, x) -> Tensor:
        y = self.conv(x)
        if self.norm is not None:
            y = self.norm(y)
        return ad.leaky_relu(y) if self.act else y


class BlockLinear3d(Module):
    """Kernel==stride convolution as a block-wise linear map onto tokens.

    Splits [B, C, D, H, W] into non-overlapping p^3 blocks and applies one
    linear layer per block, returning tokens [B*N, cout] row-major over
    (D/p, H/p, W/p). Serves both the patch embedding and the x2 stage
    downsampling (p=2 with channel doubling).
    """

    def __init__(self, cin, cout, block, rng, norm=True, act=True, dtype=np.float64):
        self.block = block
        self.cin = cin
        self.proj = Linear(cin * block**3, cout, rng, dtype=dtype)
        self.norm = LayerNorm(cout, dtype=dtype) if norm else None
        self.act = act

    def __call__(self, x) -> Tensor:
        b, c, d, h, w = x.shape
        p = self.block
        if c != self.cin:
            raise ShapeError(f"expected {self.cin} channels, got {c}")
        if d % p or h % p or w % p:
            raise ShapeError(f"spatial dims {(d, h, w)} not divisible by block {p}")
        t = ad.reshape(x, (b, c, d // p, p, h // p, p, w // p, p))
        t = ad.permute(t, (0, 2, 4, 6, 1, 3, 5, 7))
        t = ad.reshape(t, (b * (d // p) * (h // p) * (w // p), c * p**3))
        y = self.proj(t)
        if self.norm is not None:
            y = self.norm(y)
        return ad.leaky_relu(y) if self.act else y


def tokens_to_map(tokens: Tensor, dims: tuple[int, int, int]) -> Tensor:
    """[N, C] row-major over dims -> [1, C, D, H, W]."""
    d, h, w = dims
    c = tokens.shape[-1]
    m = ad.reshape(tokens, (d, h, w, c))
    m = ad.permute(m, (3, 0, 1, 2))
    return ad.reshape(m, (1, c, d, h, w))


def map_to_tokens(m: Tensor) -> Tensor:
    """[1, C, D, H, W] -> [N, C] row-major over (D, H, W)."""
    _, c, d, h, w = m.shape
    t = ad.reshape(m, (c, d, h, w))
    t = ad.permute(t, (1, 2, 3, 0))
    return ad.reshape(t, (d * h * w, c))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with rows normalized over the keys.

    Accepts [N, d] or a stacked [heads, N, d].
    """
    d = q.shape[-1]
    if d == 0:
        raise ShapeError("attention feature dimension must be positive")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attention dims differ: {q.shape}, {k.shape}, {v.shape}")
    kt = ad.permute(k, (1, 0)) if k.ndim == 2 else ad.permute(k, (0, 2, 1))
    logits = (q @ kt) * (1.0 / math.sqrt(d))
    return ad.softmax(logits, axis=-1) @ v


# -- parameter checkpoint blob -------------------------------------------

_MAGIC = b"DBSG"
_VERSION = 1
_DTYPE_CODES = {0: np.float32, 1: np.float64}


def _dtype_code(dtype) -> int:
    dt = np.dtype(dtype)
    for code, cand in _DTYPE_CODES.items():
        if dt == np.dtype(cand):
            return code
    raise ValueError(f"unsupported checkpoint dtype {dt}")


def write_param_blob(fh, named: dict[str, Tensor] | dict[str, np.ndarray], dtype=None):
    """Little-endian blob: magic, version, dtype code, count, then per entry
    name, rank, dims and the raw payload."""
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in named.items()}
    if dtype is None:
        dtype = next(iter(arrays.values())).dtype if arrays else np.float32
    code = _dtype_code(dtype)
    fh.write(_MAGIC)
    fh.write(struct.pack("<HBI", _VERSION, code, len(arrays)))
    for name, arr in arrays.items():
        enc = name.encode("utf-8")
        fh.write(struct.pack("<H", len(enc)))
        fh.write(enc)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def read_param_blob(fh) -> dict[str, np.ndarray]:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad parameter blob magic {magic!r}")
    version, code, count = struct.unpack("<HBI", fh.read(7))
    if version != _VERSION:
        raise ValueError(f"unsupported parameter blob version {version}")
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown dtype code {code}")
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", fh.read(1))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        payload = fh.read(n * dtype.itemsize)
        if len(payload) != n * dtype.itemsize:
            raise ValueError(f"truncated payload for parameter {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(_DTYPE_CODES[code])
    return out


def save_params(path, module: Module, dtype=None):
    with open(path, "wb") as fh:
        write_param_blob(fh, module.named_parameters(), dtype=dtype)


def load_params(path, module: Module):
    """Load a parameter blob into module; shape mismatches are config errors."""
    with open(path, "rb") as fh:
        arrays = read_param_blob(fh)
    assign_params(module, arrays)


def assign_params(module: Module, arrays: dict[str, np.ndarray]):
    params = module.named_parameters()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint/model mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise ValueError(
                f"checkpoint shape mismatch for {name}: {arrays[name].shape} vs {p.shape}"
            )
        p.data = arrays[name].astype(p.dtype)


def params_to_bytes(named: dict[str, Tensor], dtype=None) -> bytes:
    buf = io.BytesIO()
    write_param_blob(buf, named, dtype=dtype)
    return buf.getvalue()
