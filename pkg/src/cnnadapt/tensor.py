"""Rank-3 feature maps and the numerical primitives both engines share.

Layout is (height, width, channels) row-major everywhere. All types are
immutable after construction; every operation is a pure function, so
results are bit-reproducible run to run.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ModelFormatError, ShapeError

INT16_MIN, INT16_MAX = -(2**15), 2**15 - 1
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1

# dtype codes used by the tensor container and the weights blob
DTYPE_FLOAT32 = 0
DTYPE_INT16 = 1
DTYPE_INT32 = 2

_TENSOR_MAGIC = b"TNSR"
_TENSOR_VERSION = 1


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FeatureMap:
    """Float activation tensor of shape (height, width, channels).

    Channels may be zero (the empty map is a valid concat operand);
    spatial dims must be positive and every value finite.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeError(f"feature map must be rank 3, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"feature map spatial dims must be positive, got {arr.shape}")
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("feature map contains NaN or infinite values")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class IntFeatureMap:
    """Integer activation tensor with a declared storage width (16 or 32 bits).

    Data is held as int64 internally; the invariant is that every value fits
    the declared two's-complement width.
    """

    data: np.ndarray
    width_bits: int = 16

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"integer feature map requires integer data, got {arr.dtype}")
        arr = arr.astype(np.int64)
        if arr.ndim != 3:
            raise ShapeError(f"feature map must be rank 3, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"feature map spatial dims must be positive, got {arr.shape}")
        if self.width_bits not in (16, 32):
            raise ValueError(f"width_bits must be 16 or 32, got {self.width_bits}")
        lo, hi = -(2 ** (self.width_bits - 1)), 2 ** (self.width_bits - 1) - 1
        if arr.size and (arr.min() < lo or arr.max() > hi):
            raise ValueError(f"values exceed int{self.width_bits} range")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class FilterBank:
    """Convolution weights (kernel_h, kernel_w, in_channels, num_filters) plus biases.

    The bias vector is always materialized; bias-free layers carry zeros and
    the owning layer records whether it is semantically present.
    """

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        b = np.asarray(self.biases, dtype=np.float32)
        if w.ndim != 4:
            raise ShapeError(f"weights must be rank 4 (kh, kw, c_in, nf), got {w.shape}")
        if b.ndim != 1 or b.shape[0] != w.shape[3]:
            raise ShapeError(f"biases must have one entry per filter: {b.shape} vs nf={w.shape[3]}")
        if min(w.shape) < 1:
            raise ShapeError(f"all filter dims must be positive, got {w.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("filter bank contains NaN or infinite values")
        object.__setattr__(self, "weights", _freeze(w))
        object.__setattr__(self, "biases", _freeze(b))

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def num_filters(self) -> int:
        return self.weights.shape[3]


@dataclass(frozen=True)
class BatchNormParams:
    """Per-filter normalization statistics and affine terms.

    Vector length equals the filter count of the preceding convolution.
    """

    mu: np.ndarray
    sigma2: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 0.001

    def __post_init__(self):
        vecs = {}
        for name in ("mu", "sigma2", "gamma", "beta"):
            v = np.asarray(getattr(self, name), dtype=np.float32)
            if v.ndim != 1:
                raise ShapeError(f"batchnorm {name} must be a vector, got shape {v.shape}")
            if not np.isfinite(v).all():
                raise ValueError(f"batchnorm {name} contains NaN or infinite values")
            vecs[name] = _freeze(v)
        lengths = {v.shape[0] for v in vecs.values()}
        if len(lengths) != 1:
            raise ShapeError(f"batchnorm vectors must share one length, got {sorted(lengths)}")
        if (vecs["sigma2"] < 0).any():
            raise ValueError("batchnorm variance must be non-negative")
        if ((vecs["sigma2"] + np.float32(self.epsilon)) <= 0).any():
            raise ValueError("variance + epsilon must be positive")
        for name, v in vecs.items():
            object.__setattr__(self, name, v)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def num_filters(self) -> int:
        return self.mu.shape[0]


def _same_padding(in_dim: int, kernel: int, stride: int) -> tuple[int, int]:
    """Zero-pad amounts (begin, end) so that out = ceil(in / stride)."""
    out_dim = -(-in_dim // stride)
    total = max((out_dim - 1) * stride + kernel - in_dim, 0)
    return total // 2, total - total // 2


def conv_output_shape(in_h: int, in_w: int, kernel_h: int, kernel_w: int,
                      stride: int, padding: str) -> tuple[int, int]:
    """Spatial output size of a convolution; raises if the kernel cannot fit."""
    if padding == "same":
        return -(-in_h // stride), -(-in_w // stride)
    if padding == "valid":
        out_h = (in_h - kernel_h) // stride + 1
        out_w = (in_w - kernel_w) // stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(
                f"kernel {kernel_h}x{kernel_w} larger than {in_h}x{in_w} input under valid padding")
        return out_h, out_w
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _conv_accumulate(padded: np.ndarray, weights: np.ndarray, stride: int,
                     out_h: int, out_w: int, acc: np.ndarray) -> np.ndarray:
    # Fixed (c, kh, kw) accumulation order keeps float results bit-reproducible.
    kernel_h, kernel_w, in_c, _ = weights.shape
    for c in range(in_c):
        for r in range(kernel_h):
            for s in range(kernel_w):
                patch = padded[r:r + out_h * stride:stride,
                               s:s + out_w * stride:stride, c]
                acc += patch[:, :, None] * weights[r, s, c, :]
    return acc


def conv2d(input: FeatureMap, filters: FilterBank, stride: int = 1,
           padding: str = "same") -> FeatureMap:
    """2-D convolution over (h, w, c) with per-filter bias.

    Same padding pads with zeros; accumulation runs in fixed (c, kh, kw)
    order so identical inputs always produce identical bits.
    """
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if input.channels != filters.in_channels:
        raise ShapeError(
            f"input has {input.channels} channels but filters expect {filters.in_channels}")
    kh, kw = filters.kernel_h, filters.kernel_w
    out_h, out_w = conv_output_shape(input.height, input.width, kh, kw, stride, padding)
    if padding == "same":
        pt, pb = _same_padding(input.height, kh, stride)
        pl, pr = _same_padding(input.width, kw, stride)
    else:
        pt = pb = pl = pr = 0
    padded = np.zeros((input.height + pt + pb, input.width + pl + pr, input.channels),
                      dtype=np.float32)
    padded[pt:pt + input.height, pl:pl + input.width, :] = input.data

    acc = np.zeros((out_h, out_w, filters.num_filters), dtype=np.float32)
    _conv_accumulate(padded, filters.weights, stride, out_h, out_w, acc)
    acc += filters.biases
    return FeatureMap(acc)


def batchnorm_forward(z: FeatureMap, params: BatchNormParams) -> FeatureMap:
    """Per-channel normalization: gamma * (z - mu) / sqrt(sigma2 + eps) + beta."""
    if z.channels != params.num_filters:
        raise ShapeError(
            f"feature map has {z.channels} channels but batchnorm has {params.num_filters}")
    denom = np.sqrt(params.sigma2.astype(np.float64) + params.epsilon)
    scale = (params.gamma / denom).astype(np.float32)
    out = scale * (z.data - params.mu) + params.beta
    return FeatureMap(out)


def leaky_relu(z: FeatureMap, alpha: float) -> FeatureMap:
    """z for positive entries, alpha * z otherwise."""
    if alpha < 0:
        raise ValueError(f"negative slope must be >= 0, got {alpha}")
    out = np.where(z.data > 0, z.data, np.float32(alpha) * z.data)
    return FeatureMap(out)


def maxpool_output_shape(in_h: int, in_w: int, stride: int) -> tuple[int, int]:
    return -(-in_h // stride), -(-in_w // stride)


def _pool_window_max(data: np.ndarray, size: int, stride: int, sentinel) -> np.ndarray:
    in_h, in_w, c = data.shape
    out_h, out_w = maxpool_output_shape(in_h, in_w, stride)
    # Pad bottom/right with a never-selected sentinel so edge windows that
    # overhang (stride-1 pooling at the border) only see real elements.
    pad_h = max((out_h - 1) * stride + size - in_h, 0)
    pad_w = max((out_w - 1) * stride + size - in_w, 0)
    padded = np.full((in_h + pad_h, in_w + pad_w, c), sentinel, dtype=data.dtype)
    padded[:in_h, :in_w, :] = data
    out = np.full((out_h, out_w, c), sentinel, dtype=data.dtype)
    for r in range(size):
        for s in range(size):
            window = padded[r:r + out_h * stride:stride, s:s + out_w * stride:stride, :]
            np.maximum(out, window, out=out)
    return out


def maxpool(input: FeatureMap, size: int, stride: int) -> FeatureMap:
    """Channelwise window maximum with ceil-mode output (out = ceil(in / stride))."""
    if size < 1 or stride < 1:
        raise ValueError(f"pool size and stride must be positive, got {size}, {stride}")
    if input.channels == 0:
        raise ShapeError("cannot pool a zero-channel feature map")
    out = _pool_window_max(input.data, size, stride, np.float32(-np.inf))
    return FeatureMap(out)


def maxpool_int(input: IntFeatureMap, size: int, stride: int) -> IntFeatureMap:
    """Integer maxpool; comparison semantics carry over from the float version."""
    if size < 1 or stride < 1:
        raise ValueError(f"pool size and stride must be positive, got {size}, {stride}")
    if input.channels == 0:
        raise ShapeError("cannot pool a zero-channel feature map")
    out = _pool_window_max(input.data, size, stride, np.iinfo(np.int64).min)
    return IntFeatureMap(out, input.width_bits)


def upsample_nearest(input: FeatureMap, factor: int) -> FeatureMap:
    if factor < 1:
        raise ValueError(f"upsample factor must be positive, got {factor}")
    out = np.repeat(np.repeat(input.data, factor, axis=0), factor, axis=1)
    return FeatureMap(out)


def upsample_nearest_int(input: IntFeatureMap, factor: int) -> IntFeatureMap:
    if factor < 1:
        raise ValueError(f"upsample factor must be positive, got {factor}")
    out = np.repeat(np.repeat(input.data, factor, axis=0), factor, axis=1)
    return IntFeatureMap(out, input.width_bits)


def concat(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    """Channel concatenation, a's channels first."""
    if (a.height, a.width) != (b.height, b.width):
        raise ShapeError(f"concat spatial mismatch: {a.shape} vs {b.shape}")
    return FeatureMap(np.concatenate([a.data, b.data], axis=2))


def concat_int(a: IntFeatureMap, b: IntFeatureMap) -> IntFeatureMap:
    if (a.height, a.width) != (b.height, b.width):
        raise ShapeError(f"concat spatial mismatch: {a.shape} vs {b.shape}")
    if a.width_bits != b.width_bits:
        raise ValueError(f"concat width mismatch: {a.width_bits} vs {b.width_bits}")
    return IntFeatureMap(np.concatenate([a.data, b.data], axis=2), a.width_bits)


# ---------------------------------------------------------------------------
# Tensor container file ("TNSR")
# ---------------------------------------------------------------------------

_NUMPY_DTYPES = {
    DTYPE_FLOAT32: np.dtype("<f4"),
    DTYPE_INT16: np.dtype("<i2"),
    DTYPE_INT32: np.dtype("<i4"),
}


def save_tensor(path, fm: FeatureMap | IntFeatureMap) -> None:
    """Write a feature map: magic, version u32, dtype u8, rank u8, dims u32, raw data."""
    if isinstance(fm, FeatureMap):
        code = DTYPE_FLOAT32
    elif isinstance(fm, IntFeatureMap):
        code = DTYPE_INT16 if fm.width_bits == 16 else DTYPE_INT32
    else:
        raise TypeError(f"cannot serialize {type(fm).__name__}")
    payload = np.ascontiguousarray(fm.data.astype(_NUMPY_DTYPES[code])).tobytes()
    with open(path, "wb") as fh:
        fh.write(_TENSOR_MAGIC)
        fh.write(struct.pack("<IBB", _TENSOR_VERSION, code, 3))
        fh.write(struct.pack("<3I", fm.height, fm.width, fm.channels))
        fh.write(payload)


def load_tensor(path) -> FeatureMap | IntFeatureMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _TENSOR_MAGIC:
        raise ModelFormatError(f"{path}: not a tensor container (bad magic)")
    version, code, rank = struct.unpack_from("<IBB", raw, 4)
    if version != _TENSOR_VERSION:
        raise ModelFormatError(f"{path}: unsupported tensor format version {version}")
    if rank != 3 or code not in _NUMPY_DTYPES:
        raise ModelFormatError(f"{path}: unsupported rank {rank} or dtype {code}")
    dims = struct.unpack_from("<3I", raw, 10)
    dtype = _NUMPY_DTYPES[code]
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    body = raw[22:]
    if len(body) != expected:
        raise ModelFormatError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    data = np.frombuffer(body, dtype=dtype).reshape(dims)
    if code == DTYPE_FLOAT32:
        return FeatureMap(data)
    return IntFeatureMap(data.astype(np.int64), 16 if code == DTYPE_INT16 else 32)
