"""Streaming max-pool unit.

Mirrors the hardware block: a scratchpad feeds conv output rows to a
comparator stage.  A multiplexer drops scratchpad rows that hold stale
data when the convolution ran with stride > 1 (stride 2 leaves valid data
only in every other row).  Valid rows flow through the vertical stage --
one running column-max per open window, the comparator feedback register --
and a completed window's column maxes are reduced horizontally into the
pooled output row.  Windows still waiting for rows sit in the internal
buffer (`_open`); trailing partial windows never complete, which gives the
floor output-size semantics.
"""

import numpy as np

from .netmodel import PoolSpec


class PoolUnit:
    """Push raw conv rows in order; pooled rows come back as they complete."""

    def __init__(self, pool: PoolSpec, conv_stride: int = 1):
        if conv_stride < 1:
            raise ValueError("conv stride must be >= 1")
        self.kernel = pool.kernel
        self.stride = pool.stride
        self.conv_stride = conv_stride
        self._next_raw = 0
        self._open = {}  # window index -> running column max

    def push(self, row):
        """Feed the next scratchpad row; returns [(pooled_row_index, values)]."""
        r = self._next_raw
        self._next_raw += 1
        if r % self.conv_stride:
            return []  # stale scratchpad row, mux drops it
        v = r // self.conv_stride
        row = np.asarray(row, dtype=np.int16)

        k, s = self.kernel, self.stride
        emitted = []
        # windows covering valid row v: w*s <= v <= w*s + k - 1
        w_lo = max(0, -(-(v - k + 1) // s))
        w_hi = v // s
        for w in range(w_lo, w_hi + 1):
            cur = self._open.get(w)
            if cur is None:
                self._open[w] = row.copy()
            else:
                np.maximum(cur, row, out=cur)
            if v == w * s + k - 1:
                emitted.append((w, self._hscan(self._open.pop(w))))
        return emitted

    def _hscan(self, vrow):
        # horizontal stage: max over kernel-wide column windows
        k, s = self.kernel, self.stride
        n = (len(vrow) - k) // s + 1
        if n < 1:
            raise ValueError("pool window wider than the row")
        out = vrow[0 : s * (n - 1) + 1 : s].copy()
        for dj in range(1, k):
            np.maximum(out, vrow[dj : dj + s * (n - 1) + 1 : s], out=out)
        return out

    def pool_plane(self, plane):
        """Stream a whole (rows, cols) plane through the unit; returns the pooled plane."""
        rows = []
        for r in range(plane.shape[0]):
            for w, vals in self.push(plane[r]):
                rows.append((w, vals))
        rows.sort(key=lambda t: t[0])
        if not rows:
            raise ValueError("pool window taller than the streamed plane")
        return np.stack([vals for _, vals in rows])
