"""Loop-nest reference convolution and max pooling.

This is the ground truth the streaming datapath is diffed against.  It is
deliberately the obvious implementation: zero-pad, slide the kernel,
accumulate exactly in int64 (Acc48 semantics), quantize once at the end.
Padding contributes exact zeros; bias is injected before quantization.
"""

import numpy as np

from . import fxp
from .netmodel import ConvLayerSpec, FilterSet, NetworkSpec, PoolSpec, Tensor3D


def conv2d_acc(inp: Tensor3D, filters: FilterSet, layer: ConvLayerSpec) -> np.ndarray:
    """Pre-quantization accumulators, int64 with 16 fraction bits, shape (m, oh, ow)."""
    filters.check_layer(layer)
    if (inp.c, inp.h, inp.w) != (layer.in_c, layer.in_h, layer.in_w):
        raise ValueError(
            "input %dx%dx%d does not match layer %dx%dx%d"
            % (inp.c, inp.h, inp.w, layer.in_c, layer.in_h, layer.in_w)
        )
    ow, oh, m = layer.conv_out_dims()
    k, a, p = layer.kernel, layer.stride, layer.pad

    padded = np.zeros((layer.in_c, layer.in_h + 2 * p, layer.in_w + 2 * p), dtype=np.int64)
    padded[:, p : p + layer.in_h, p : p + layer.in_w] = inp.data

    acc = np.empty((m, oh, ow), dtype=np.int64)
    if layer.has_bias:
        acc[:] = fxp.acc_from_fx(filters.biases.astype(np.int64))[:, None, None]
    else:
        acc[:] = 0

    cpg = layer.in_c // layer.groups
    mpg = layer.out_c // layer.groups
    w64 = filters.weights.astype(np.int64)
    for g in range(layer.groups):
        wg = w64[g * mpg : (g + 1) * mpg]
        pg = padded[g * cpg : (g + 1) * cpg]
        for i in range(k):
            for j in range(k):
                win = pg[:, i : i + a * (oh - 1) + 1 : a, j : j + a * (ow - 1) + 1 : a]
                acc[g * mpg : (g + 1) * mpg] += np.einsum("mc,chw->mhw", wg[:, :, i, j], win)
    fxp.check_acc_range(acc)
    return acc


def conv2d_ref(inp: Tensor3D, filters: FilterSet, layer: ConvLayerSpec) -> Tensor3D:
    """Quantized conv output (the layer's pre-pool feature map)."""
    return Tensor3D(fxp.quantize_array(conv2d_acc(inp, filters, layer)))


def maxpool_ref(inp: Tensor3D, pool: PoolSpec) -> Tensor3D:
    """Per-channel sliding-window max, floor output dims, no padding."""
    k, s = pool.kernel, pool.stride
    if inp.h < k or inp.w < k:
        raise ValueError("pool window %dx%d larger than input %dx%d" % (k, k, inp.h, inp.w))
    oh = (inp.h - k) // s + 1
    ow = (inp.w - k) // s + 1
    out = np.full((inp.c, oh, ow), np.iinfo(np.int16).min, dtype=np.int16)
    for di in range(k):
        for dj in range(k):
            win = inp.data[:, di : di + s * (oh - 1) + 1 : s, dj : dj + s * (ow - 1) + 1 : s]
            np.maximum(out, win, out=out)
    return Tensor3D(out)


def run_layer_ref(layer: ConvLayerSpec, inp: Tensor3D, filters: FilterSet) -> Tensor3D:
    out = conv2d_ref(inp, filters, layer)
    if layer.pool is not None:
        out = maxpool_ref(out, layer.pool)
    return out


def run_network_ref(net: NetworkSpec, inp: Tensor3D, weights, return_all=False):
    """Sequential reference evaluation of the whole conv stack."""
    if len(weights) != len(net.layers):
        raise ValueError("need one FilterSet per layer")
    outs = []
    cur = inp
    for layer, fs in zip(net.layers, weights):
        cur = run_layer_ref(layer, cur, fs)
        outs.append(cur)
    return outs if return_all else cur
