"""Network/layer descriptors, tensor containers, analytic cost formulas, file I/O.

Conventions:
  * tensors are (channels, rows, cols) int16 Q8.8, rows contiguous so an
    8-pixel row stream is one sequential read
  * reported "KB" means 1000 bytes, rounded to the nearest integer
  * a MAC counts as 2 ops (multiply + add)
"""

import struct
from dataclasses import dataclass, field
from typing import Optional, List, Tuple

import numpy as np

from .fxp import to_fx_array

BYTES_PER_WORD = 2  # Fx16


class NetworkFormatError(ValueError):
    """Bad network description text (message carries the line number)."""


class TensorFormatError(ValueError):
    """Bad tensor/filter binary file."""


@dataclass(frozen=True)
class PoolSpec:
    """Max-pool stage appended to a conv layer."""
    kernel: int
    stride: int

    def __post_init__(self):
        if self.kernel not in (2, 3):
            raise ValueError("pool kernel must be 2 or 3, got %d" % self.kernel)
        if not 1 <= self.stride <= 3:
            raise ValueError("pool stride must be in 1..3, got %d" % self.stride)


def _pool_out(dim, pool):
    return (dim - pool.kernel) // pool.stride + 1


@dataclass(frozen=True)
class ConvLayerSpec:
    """Geometry of one convolution layer (optionally followed by max pooling)."""
    in_w: int
    in_h: int
    in_c: int
    out_c: int
    kernel: int
    stride: int = 1
    pad: int = 0
    groups: int = 1
    has_bias: bool = True
    pool: Optional[PoolSpec] = None

    def __post_init__(self):
        if min(self.in_w, self.in_h, self.in_c, self.out_c) < 1:
            raise ValueError("layer dimensions must be positive")
        if self.kernel < 1 or self.stride < 1 or self.pad < 0 or self.groups < 1:
            raise ValueError("bad kernel/stride/pad/groups")
        if self.in_c % self.groups or self.out_c % self.groups:
            raise ValueError(
                "groups=%d must divide in_c=%d and out_c=%d"
                % (self.groups, self.in_c, self.out_c)
            )
        ow, oh, _ = self.conv_out_dims()
        if ow < 1 or oh < 1:
            raise ValueError("conv output would be empty (%dx%d)" % (ow, oh))
        if self.pool is not None:
            if _pool_out(ow, self.pool) < 1 or _pool_out(oh, self.pool) < 1:
                raise ValueError("pool window larger than conv output")

    def conv_out_dims(self) -> Tuple[int, int, int]:
        """(width, height, features) after convolution, before any pooling."""
        ow = (self.in_w + 2 * self.pad - self.kernel) // self.stride + 1
        oh = (self.in_h + 2 * self.pad - self.kernel) // self.stride + 1
        return ow, oh, self.out_c

    def out_dims(self) -> Tuple[int, int, int]:
        """(width, height, features) leaving the layer (pooling applied if present)."""
        ow, oh, m = self.conv_out_dims()
        if self.pool is not None:
            ow = _pool_out(ow, self.pool)
            oh = _pool_out(oh, self.pool)
        return ow, oh, m


def out_dims(layer: ConvLayerSpec) -> Tuple[int, int, int]:
    return layer.out_dims()


def ops_count(layer: ConvLayerSpec) -> int:
    """Analytic operation count: 2 ops per MAC, grouping respected."""
    ow, oh, _ = layer.conv_out_dims()
    return 2 * ow * oh * layer.out_c * (layer.in_c // layer.groups) * layer.kernel ** 2


def macs_count(layer: ConvLayerSpec) -> int:
    return ops_count(layer) // 2


def mem_bytes(dims) -> int:
    """Footprint in bytes of a (w, h, c) or arbitrary dim tuple of Fx16 words."""
    n = 1
    for d in dims:
        n *= d
    return n * BYTES_PER_WORD


def mem_kb(nbytes: int) -> int:
    """Reported KB: 1000 bytes, rounded to nearest."""
    return round(nbytes / 1000)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered conv stack; layer i's output dims feed layer i+1."""
    name: str
    layers: Tuple[ConvLayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network has no layers")
        object.__setattr__(self, "layers", tuple(self.layers))
        for i in range(1, len(self.layers)):
            prev_w, prev_h, prev_c = self.layers[i - 1].out_dims()
            nxt = self.layers[i]
            if (nxt.in_w, nxt.in_h, nxt.in_c) != (prev_w, prev_h, prev_c):
                raise NetworkFormatError(
                    "layer %d input %dx%dx%d does not chain from layer %d output %dx%dx%d"
                    % (i + 1, nxt.in_w, nxt.in_h, nxt.in_c, i, prev_w, prev_h, prev_c)
                )


@dataclass
class Tensor3D:
    """(channels, rows, cols) int16 Q8.8 feature map."""
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.dtype != np.int16:
            raise ValueError("Tensor3D wants an int16 array of shape (c, h, w)")

    @property
    def c(self):
        return self.data.shape[0]

    @property
    def h(self):
        return self.data.shape[1]

    @property
    def w(self):
        return self.data.shape[2]

    @classmethod
    def zeros(cls, c, h, w):
        return cls(np.zeros((c, h, w), dtype=np.int16))

    @classmethod
    def random(cls, c, h, w, rng, lo=-1.0, hi=1.0):
        return cls(to_fx_array(rng.uniform(lo, hi, size=(c, h, w))))

    def same_bits(self, other) -> bool:
        return self.data.shape == other.data.shape and bool(
            np.array_equal(self.data, other.data)
        )


@dataclass
class FilterSet:
    """Weights [m][k][i][j] and biases [m] for one conv layer (k = channel within group)."""
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.biases = np.asarray(self.biases)
        if self.weights.ndim != 4 or self.weights.dtype != np.int16:
            raise ValueError("weights must be int16 (m, k, K, K)")
        if self.weights.shape[2] != self.weights.shape[3]:
            raise ValueError("kernel must be square")
        if self.biases.shape != (self.weights.shape[0],) or self.biases.dtype != np.int16:
            raise ValueError("biases must be int16 (m,)")

    @property
    def m(self):
        return self.weights.shape[0]

    @property
    def k(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2]

    def check_layer(self, layer: ConvLayerSpec):
        want = (layer.out_c, layer.in_c // layer.groups, layer.kernel, layer.kernel)
        if self.weights.shape != want:
            raise ValueError(
                "filter shape %s does not match layer %s" % (self.weights.shape, want)
            )

    @classmethod
    def random(cls, layer: ConvLayerSpec, rng, scale=0.25):
        w = to_fx_array(
            rng.uniform(
                -scale,
                scale,
                size=(layer.out_c, layer.in_c // layer.groups, layer.kernel, layer.kernel),
            )
        )
        b = to_fx_array(rng.uniform(-scale, scale, size=layer.out_c))
        if not layer.has_bias:
            b = np.zeros(layer.out_c, dtype=np.int16)
        return cls(w, b)


# ---------------------------------------------------------------------------
# network description text format
# ---------------------------------------------------------------------------

_LAYER_KEYS = {
    "in_w", "in_h", "in_c", "out_c", "kernel", "stride", "pad", "groups",
    "bias", "pool_kernel", "pool_stride",
}
_REQUIRED_KEYS = ("in_w", "in_h", "in_c", "out_c", "kernel")


def parse_network(text: str, name: str = "network") -> NetworkSpec:
    """Parse the `[layer]` / `key = value` description format."""
    sections: List[Tuple[int, dict]] = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[layer]":
            current = {}
            sections.append((lineno, current))
            continue
        if line.startswith("["):
            raise NetworkFormatError("line %d: unknown section %r" % (lineno, line))
        if current is None:
            raise NetworkFormatError(
                "line %d: key outside a [layer] section" % lineno
            )
        if "=" not in line:
            raise NetworkFormatError("line %d: expected key = value" % lineno)
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _LAYER_KEYS:
            raise NetworkFormatError("line %d: unknown key %r" % (lineno, key))
        try:
            current[key] = int(val, 10)
        except ValueError:
            raise NetworkFormatError(
                "line %d: value for %s must be a decimal integer" % (lineno, key)
            ) from None

    if not sections:
        raise NetworkFormatError("no layers")

    layers = []
    for idx, (lineno, kv) in enumerate(sections, start=1):
        for req in _REQUIRED_KEYS:
            if req not in kv:
                raise NetworkFormatError(
                    "layer %d (line %d): missing key %s" % (idx, lineno, req)
                )
        if ("pool_kernel" in kv) != ("pool_stride" in kv):
            raise NetworkFormatError(
                "layer %d (line %d): pool_kernel and pool_stride go together"
                % (idx, lineno)
            )
        pool = None
        if "pool_kernel" in kv:
            try:
                pool = PoolSpec(kv["pool_kernel"], kv["pool_stride"])
            except ValueError as e:
                raise NetworkFormatError("layer %d (line %d): %s" % (idx, lineno, e)) from None
        try:
            layers.append(
                ConvLayerSpec(
                    in_w=kv["in_w"],
                    in_h=kv["in_h"],
                    in_c=kv["in_c"],
                    out_c=kv["out_c"],
                    kernel=kv["kernel"],
                    stride=kv.get("stride", 1),
                    pad=kv.get("pad", 0),
                    groups=kv.get("groups", 1),
                    has_bias=bool(kv.get("bias", 1)),
                    pool=pool,
                )
            )
        except ValueError as e:
            raise NetworkFormatError("layer %d (line %d): %s" % (idx, lineno, e)) from None

    return NetworkSpec(name, tuple(layers))


def parse_network_file(path) -> NetworkSpec:
    with open(path, "r", encoding="ascii") as f:
        text = f.read()
    name = str(path).rsplit("/", 1)[-1]
    if name.endswith(".net"):
        name = name[:-4]
    return parse_network(text, name=name)


def render_network(net: NetworkSpec) -> str:
    """Write a NetworkSpec back out in the description format (parse round-trips)."""
    out = []
    for lay in net.layers:
        out.append("[layer]")
        out.append("in_w = %d" % lay.in_w)
        out.append("in_h = %d" % lay.in_h)
        out.append("in_c = %d" % lay.in_c)
        out.append("out_c = %d" % lay.out_c)
        out.append("kernel = %d" % lay.kernel)
        out.append("stride = %d" % lay.stride)
        out.append("pad = %d" % lay.pad)
        out.append("groups = %d" % lay.groups)
        out.append("bias = %d" % int(lay.has_bias))
        if lay.pool is not None:
            out.append("pool_kernel = %d" % lay.pool.kernel)
            out.append("pool_stride = %d" % lay.pool.stride)
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# binary tensor / filter files
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"FXT3"
FILTER_MAGIC = b"FXW4"


def store_tensor(t: Tensor3D, path):
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<III", t.c, t.h, t.w))
        f.write(np.ascontiguousarray(t.data, dtype="<i2").tobytes())


def load_tensor(path) -> Tensor3D:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != TENSOR_MAGIC:
        raise TensorFormatError("%s: bad magic, not a tensor file" % path)
    if len(blob) < 16:
        raise TensorFormatError("%s: truncated header" % path)
    c, h, w = struct.unpack("<III", blob[4:16])
    want = 16 + 2 * c * h * w
    if len(blob) != want:
        raise TensorFormatError(
            "%s: payload length %d does not match dims %dx%dx%d (want %d)"
            % (path, len(blob), c, h, w, want)
        )
    data = np.frombuffer(blob[16:], dtype="<i2").reshape(c, h, w).astype(np.int16)
    return Tensor3D(data)


def store_filters(fs: FilterSet, path):
    with open(path, "wb") as f:
        f.write(FILTER_MAGIC)
        f.write(struct.pack("<III", fs.m, fs.k, fs.kernel))
        f.write(np.ascontiguousarray(fs.weights, dtype="<i2").tobytes())
        f.write(np.ascontiguousarray(fs.biases, dtype="<i2").tobytes())


def load_filters(path) -> FilterSet:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FILTER_MAGIC:
        raise TensorFormatError("%s: bad magic, not a filter file" % path)
    if len(blob) < 16:
        raise TensorFormatError("%s: truncated header" % path)
    m, k, kk = struct.unpack("<III", blob[4:16])
    nw = m * k * kk * kk
    want = 16 + 2 * (nw + m)
    if len(blob) != want:
        raise TensorFormatError(
            "%s: payload length %d does not match header (want %d)" % (path, len(blob), want)
        )
    w = np.frombuffer(blob[16 : 16 + 2 * nw], dtype="<i2").reshape(m, k, kk, kk)
    b = np.frombuffer(blob[16 + 2 * nw :], dtype="<i2")
    return FilterSet(w.astype(np.int16), b.astype(np.int16))
