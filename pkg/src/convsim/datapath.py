"""Cycle-approximate streaming simulator of the accelerator datapath.

Data path: single-port buffer bank -> column buffer -> 16 conv units
(9 multiply slots each) -> wide accumulators -> quantize -> optional
streaming max pool -> buffer bank -> DRAM.

Timing model, one global clock:

  * every buffer-bank port access moves one 16-byte word (8 pixels) and
    costs one cycle; DMA load/store phases occupy the port one word per
    cycle
  * a (channel, feature-batch, sub-kernel) pass clocks the stream across
    the sub-kernel's whole window span: rows a*(out_h-1)+rows(si) and
    ceil(span/8) words per row, where the span covers stored pixels plus
    the positions boundary windows need; only words overlapping stored
    pixels read the SRAM
  * weight prefetch (bank -> unit registers), accumulator writeback and
    pooling traffic pause the stream; those port cycles also count as
    stall_cycles
  * each pass ends with pipeline_depth drain cycles
  * enable gating: zero-padded sub-kernel slots and stride-skipped
    positions produce nothing and are never counted as MACs

Weights for the resident feature group are staged in the bank by LOAD_WT
(that is where their DRAM traffic is counted); per-channel prefetch then
re-reads the active registers through the port.  Arbitration priority is
writeback > weight prefetch > input read; transfers are serialized at
phase boundaries so the priority shows up as whose cycles the stream
waits out.

The vectorized executor and the cycle-stepped CycleEngine implement the
same protocol; tests hold their outputs and counters bit-identical.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import fxp
from .netmodel import BYTES_PER_WORD, ConvLayerSpec, FilterSet, NetworkSpec, Tensor3D
from .perf import PerfCounters
from .planner import (
    SRAM_BYTES_DEFAULT,
    SRAM_WORD_BYTES,
    Command,
    CommandFifo,
    OP_BARRIER,
    OP_CONV,
    OP_LOAD_IMG,
    OP_LOAD_WT,
    OP_POOL,
    OP_STORE,
    PlanInfeasibleError,
    TilePlan,
    TileStep,
    emit_commands,
    full_layer_step,
    tile_steps,
)
from .pooling import PoolUnit

WORD_PIXELS = SRAM_WORD_BYTES // BYTES_PER_WORD  # 8 pixels per port word


def _ceil_div(n, d):
    return -(-n // d)


def _words(nbytes):
    return _ceil_div(nbytes, SRAM_WORD_BYTES)


@dataclass
class DatapathConfig:
    """Build-time knobs of the modeled hardware."""
    sram_bytes: int = SRAM_BYTES_DEFAULT
    f_parallel: int = 2   # features computed in parallel
    c_parallel: int = 8   # adjacent column positions per cycle
    pipeline_depth: int = 3

    def __post_init__(self):
        if self.f_parallel * self.c_parallel != 16:
            raise ValueError("conv unit mapping must use all 16 units")
        if self.c_parallel != WORD_PIXELS:
            raise ValueError("column parallelism is tied to the 8-pixel stream")


def subkernel_slots(kernel: int) -> List[Tuple[int, int, int, int]]:
    """(si, sj, rows, cols) for each 3x3 sub-kernel of a KxK kernel."""
    n = _ceil_div(kernel, 3)
    return [
        (si, sj, min(3, kernel - 3 * si), min(3, kernel - 3 * sj))
        for si in range(n)
        for sj in range(n)
    ]


def enable_masks(layer: ConvLayerSpec) -> Dict[Tuple[int, int], np.ndarray]:
    """Per-sub-kernel 3x3 slot masks; padded slots are gated off."""
    masks = {}
    for si, sj, rr, cc in subkernel_slots(layer.kernel):
        m = np.zeros((3, 3), dtype=bool)
        m[:rr, :cc] = True
        masks[(si, sj)] = m
    return masks


@dataclass
class LayerSetup:
    """Derived per-step configuration (unit mapping and gating)."""
    f_parallel: int
    c_parallel: int
    decimation: int  # keep every decimation-th window position
    pe_masks: Dict[Tuple[int, int], np.ndarray]


class BufferBank:
    """128 KB single-port SRAM: named allocations, hard capacity fault."""

    def __init__(self, capacity=SRAM_BYTES_DEFAULT):
        self.capacity = capacity
        self._regions = {}
        self.peak_bytes = 0

    @property
    def live_bytes(self):
        return sum(self._regions.values())

    def alloc(self, name, nbytes):
        if name in self._regions:
            raise fxp.SimulationFault("bank region %r already allocated" % name)
        if self.live_bytes + nbytes > self.capacity:
            raise fxp.SimulationFault(
                "bank overflow: %d live + %d requested > %d capacity"
                % (self.live_bytes, nbytes, self.capacity)
            )
        self._regions[name] = nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)

    def free(self, name):
        self._regions.pop(name)


class ColumnBuffer:
    """Two retained rows plus the row in flight, keyed by absolute index."""

    def __init__(self):
        self._rows = {}

    def push(self, idx, row):
        self._rows[idx] = row
        for k in [k for k in self._rows if k < idx - 2]:
            del self._rows[k]

    def get(self, idx):
        return self._rows.get(idx)


class ConvUnit:
    """Nine multiply slots feeding one adder; gated slots contribute nothing."""

    def __init__(self):
        self.w = np.zeros((3, 3), dtype=np.int64)
        self.mask = np.zeros((3, 3), dtype=bool)
        self.bias = 0

    def load(self, w3x3, mask, bias=0):
        self.w[:] = w3x3
        self.mask[:] = mask
        self.bias = bias

    def dot(self, window) -> int:
        acc = 0
        for di in range(3):
            for dj in range(3):
                if self.mask[di, dj]:
                    acc = fxp.acc_add(acc, fxp.fx_mul(int(self.w[di, dj]), int(window[di, dj])))
        return acc


class CuArray:
    """16 conv units mapped f_parallel features x c_parallel columns."""

    def __init__(self, config: DatapathConfig):
        self.config = config
        self.units = [
            [ConvUnit() for _ in range(config.c_parallel)]
            for _ in range(config.f_parallel)
        ]

    def load_feature(self, fi, w3x3, mask, bias=0):
        for unit in self.units[fi]:
            unit.load(w3x3, mask, bias)

    def dot(self, fi, pos, window) -> int:
        return self.units[fi][pos].dot(window)


@dataclass
class _PassGeom:
    r_first: int
    r_last: int
    words_cycle: int
    n_rows_read: int
    words_read: int
    span_lo: int

    @property
    def n_row_cycles(self):
        return self.r_last - self.r_first + 1

    @property
    def stream_cycles(self):
        return self.n_row_cycles * self.words_cycle


def _pass_geometry(layer, step, si, sj, rr, cc) -> _PassGeom:
    a, pad = layer.stride, layer.pad
    r_first = a * step.out_r0 - pad + 3 * si
    r_last = a * (step.out_r1 - 1) - pad + 3 * si + rr - 1
    c_first = a * step.out_c0 - pad + 3 * sj
    c_last = a * (step.out_c1 - 1) - pad + 3 * sj + cc - 1
    span_lo = min(c_first, step.in_c0)
    span_hi = max(c_last, step.in_c1 - 1)
    words_cycle = _ceil_div(span_hi - span_lo + 1, WORD_PIXELS)
    lo = max(r_first, step.in_r0)
    hi = min(r_last, step.in_r1 - 1)
    n_rows_read = max(0, hi - lo + 1)
    words_read = (step.in_c1 - 1 - span_lo) // WORD_PIXELS \
        - (step.in_c0 - span_lo) // WORD_PIXELS + 1
    return _PassGeom(r_first, r_last, words_cycle, n_rows_read, words_read, span_lo)


def _axis_slices(out_lo, out_hi, a, pad, k_off, in_lo, in_hi):
    """dst/src slices of outputs whose tap k_off lands in stored [in_lo, in_hi)."""
    x_lo = max(out_lo, _ceil_div(in_lo + pad - k_off, a))
    x_hi = min(out_hi, (in_hi - 1 + pad - k_off) // a + 1)
    if x_lo >= x_hi:
        return None
    src0 = a * x_lo - pad + k_off - in_lo
    n = x_hi - x_lo
    return slice(x_lo - out_lo, x_hi - out_lo), slice(src0, src0 + a * (n - 1) + 1, a)


class _StepContext:
    """In-flight residency: accumulators, slice cache, remaining channels."""

    def __init__(self, layer: ConvLayerSpec, step: TileStep, filters: FilterSet):
        self.layer = layer
        self.step = step
        self.w64 = filters.weights.astype(np.int64)
        self.acc = np.empty((step.feats, step.out_h, step.out_w), dtype=np.int64)
        if layer.has_bias:
            bias = filters.biases[step.feat_lo : step.feat_hi].astype(np.int64)
            self.acc[:] = fxp.acc_from_fx(bias)[:, None, None]
        else:
            self.acc[:] = 0
        self.remaining = set(step.channel_list(layer))
        self.ranges = step.conv_channel_ranges(layer)
        self.subk = subkernel_slots(layer.kernel)
        a, pad = layer.stride, layer.pad
        self.row_slices = [
            _axis_slices(step.out_r0, step.out_r1, a, pad, i, step.in_r0, step.in_r1)
            for i in range(layer.kernel)
        ]
        self.col_slices = [
            _axis_slices(step.out_c0, step.out_c1, a, pad, j, step.in_c0, step.in_c1)
            for j in range(layer.kernel)
        ]
        self.geom = {
            (si, sj): _pass_geometry(layer, step, si, sj, rr, cc)
            for si, sj, rr, cc in self.subk
        }
        self.out_area = step.out_h * step.out_w
        self.planes = None   # quantized conv planes (feats, out_h, out_w)
        self.pooled = None


class Accelerator:
    """Vectorized executor: replays command streams or runs tiles directly."""

    def __init__(self, config: Optional[DatapathConfig] = None):
        self.config = config or DatapathConfig()
        self.bank = BufferBank(self.config.sram_bytes)
        self.counters = PerfCounters()
        self._img = None      # (tile_id, int64 (in_c, rh, rw))
        self._wt_group = None
        self._ctx: Optional[_StepContext] = None

    # -- accounting helpers ------------------------------------------------

    def _dma_in(self, nbytes):
        w = _words(nbytes)
        self.counters.cycles += w
        self.counters.sram_writes += w
        self.counters.dram_bytes_in += nbytes

    def _dma_out(self, nbytes):
        w = _words(nbytes)
        self.counters.cycles += w
        self.counters.sram_reads += w
        self.counters.dram_bytes_out += nbytes

    def _stalled_reads(self, words):
        self.counters.cycles += words
        self.counters.stall_cycles += words
        self.counters.sram_reads += words

    def _stalled_writes(self, words):
        self.counters.cycles += words
        self.counters.stall_cycles += words
        self.counters.sram_writes += words

    # -- configuration -----------------------------------------------------

    def configure_layer(self, layer: ConvLayerSpec, step: TileStep) -> LayerSetup:
        """Validate the residency against the bank and derive unit gating."""
        need = step.input_bytes(layer) + step.out_bytes() + step.weight_bytes(layer)
        if need > self.config.sram_bytes:
            raise PlanInfeasibleError(
                "residency footprint %d bytes exceeds %d-byte bank"
                % (need, self.config.sram_bytes)
            )
        return LayerSetup(
            f_parallel=self.config.f_parallel,
            c_parallel=self.config.c_parallel,
            decimation=layer.stride,
            pe_masks=enable_masks(layer),
        )

    # -- step phases ---------------------------------------------------------

    def _load_weights(self, layer, step, filters):
        if self._wt_group is not None:
            self.bank.free("wt")
        self.bank.alloc("wt", step.weight_bytes(layer))
        self._dma_in(step.weight_bytes(layer))
        self._wt_group = step.group_id

    def _load_image(self, layer, step, tile64):
        if self._img is not None:
            self.bank.free("img")
        self.bank.alloc("img", step.input_bytes(layer))
        self._dma_in(step.input_bytes(layer))
        self._img = (step.tile_id, tile64)

    def _begin_conv(self, layer, step, filters):
        self.configure_layer(layer, step)
        self.bank.alloc("out", step.out_bytes())
        self._ctx = _StepContext(layer, step, filters)

    def prefetch_weights(self, n_feats, real_slots, with_bias):
        """Bank -> unit registers; the stream waits these cycles out."""
        words = n_feats * real_slots
        if with_bias:
            words += n_feats
        self._stalled_reads(_ceil_div(words, WORD_PIXELS))

    def _conv_channel(self, ch):
        ctx = self._ctx
        layer, step = ctx.layer, ctx.step
        if ch not in ctx.remaining:
            raise fxp.SimulationFault("unexpected CONV for channel %d" % ch)
        ctx.remaining.discard(ch)
        for ch_lo, ch_hi, f_lo, f_hi in ctx.ranges:
            if ch_lo <= ch < ch_hi:
                break
        else:
            raise fxp.SimulationFault("channel %d outside residency" % ch)
        k_idx = ch - ch_lo
        plane = self._img[1][ch]
        F = self.config.f_parallel
        for f0 in range(f_lo, f_hi, F):
            feats = range(f0, min(f0 + F, f_hi))
            nf = len(feats)
            first = True
            for si, sj, rr, cc in ctx.subk:
                self.prefetch_weights(nf, rr * cc, first and layer.has_bias)
                first = False
                g = ctx.geom[(si, sj)]
                self.counters.cycles += g.stream_cycles + self.config.pipeline_depth
                self.counters.sram_reads += g.n_rows_read * g.words_read
                self.counters.macs_executed += ctx.out_area * nf * rr * cc
                for m in feats:
                    ai = m - step.feat_lo
                    for di in range(rr):
                        rs = ctx.row_slices[3 * si + di]
                        if rs is None:
                            continue
                        for dj in range(cc):
                            cs = ctx.col_slices[3 * sj + dj]
                            if cs is None:
                                continue
                            wgt = int(ctx.w64[m, k_idx, 3 * si + di, 3 * sj + dj])
                            if wgt:
                                ctx.acc[ai, rs[0], cs[0]] += wgt * plane[rs[1], cs[1]]
        if not ctx.remaining:
            self._finish_conv()

    def _finish_conv(self):
        ctx = self._ctx
        fxp.check_acc_range(ctx.acc)
        ctx.planes = fxp.quantize_array(ctx.acc)
        self._stalled_writes(_words(ctx.planes.size * BYTES_PER_WORD))

    def _pool_step(self):
        ctx = self._ctx
        if ctx.planes is None:
            raise fxp.SimulationFault("POOL before convolution finished")
        pool = ctx.layer.pool
        pooled = np.stack(
            [PoolUnit(pool).pool_plane(plane) for plane in ctx.planes]
        )
        self._stalled_reads(_words(ctx.planes.size * BYTES_PER_WORD))
        self._stalled_writes(_words(pooled.size * BYTES_PER_WORD))
        ctx.pooled = pooled

    def _store_step(self):
        ctx = self._ctx
        if ctx.planes is None:
            raise fxp.SimulationFault("STORE before convolution finished")
        if ctx.layer.pool is not None and ctx.pooled is None:
            raise fxp.SimulationFault("STORE before POOL on a pooled layer")
        data = ctx.pooled if ctx.pooled is not None else ctx.planes
        nbytes = data.size * BYTES_PER_WORD
        assert nbytes == ctx.step.store_bytes()
        self._dma_out(nbytes)
        self.bank.free("out")
        self._ctx = None
        return data

    def _release_layer(self):
        if self._img is not None:
            self.bank.free("img")
            self._img = None
        if self._wt_group is not None:
            self.bank.free("wt")
            self._wt_group = None

    # -- public entry points -------------------------------------------------

    def run_tile(self, tile: Tensor3D, filters: FilterSet, layer: ConvLayerSpec,
                 step: TileStep):
        """Run one residency directly; returns (planes, counter delta)."""
        want = (layer.in_c, step.in_h, step.in_w)
        if tile.data.shape != want:
            raise ValueError("tile shape %s, expected %s" % (tile.data.shape, want))
        base = self.counters.copy()
        self.configure_layer(layer, step)
        self._load_weights(layer, step, filters)
        self._load_image(layer, step, tile.data.astype(np.int64))
        self._begin_conv(layer, step, filters)
        for ch in step.channel_list(layer):
            self._conv_channel(ch)
        if layer.pool is not None:
            self._pool_step()
        data = self._store_step()
        self._release_layer()
        return data, self.counters.delta(base)

    def execute_commands(self, layer: ConvLayerSpec, plan: TilePlan,
                         inp: Tensor3D, filters: FilterSet,
                         commands: Optional[List[Command]] = None) -> Tensor3D:
        """Replay a command stream through the datapath, stitching the layer output."""
        filters.check_layer(layer)
        if (inp.c, inp.h, inp.w) != (layer.in_c, layer.in_h, layer.in_w):
            raise ValueError("input tensor does not match the layer")
        steps = {(s.tile_id, s.group_id): s for s in tile_steps(layer, plan)}
        tiles = {}
        for s in steps.values():
            tiles.setdefault(s.tile_id, s)
        fw, fh, m = layer.out_dims()
        out = np.zeros((m, fh, fw), dtype=np.int16)
        stored = set()

        fifo = CommandFifo(emit_commands(layer, plan) if commands is None else commands)
        for cmd in fifo:
            self.counters.commands_executed += 1
            if cmd.op == OP_BARRIER:
                continue
            if cmd.op == OP_LOAD_WT:
                st = steps[(cmd.tile, cmd.group)]
                self._load_weights(layer, st, filters)
            elif cmd.op == OP_LOAD_IMG:
                st = tiles[cmd.tile]
                tile64 = inp.data[:, st.in_r0 : st.in_r1, st.in_c0 : st.in_c1].astype(np.int64)
                self._load_image(layer, st, tile64)
            elif cmd.op == OP_CONV:
                st = steps[(cmd.tile, cmd.group)]
                if self._ctx is None or self._ctx.step is not st:
                    if self._ctx is not None:
                        raise fxp.SimulationFault("CONV while another residency is open")
                    if self._img is None or self._img[0] != st.tile_id:
                        raise fxp.SimulationFault("CONV without its input tile")
                    if self._wt_group != st.group_id:
                        raise fxp.SimulationFault("CONV without its weights")
                    self._begin_conv(layer, st, filters)
                self._conv_channel(cmd.chan)
            elif cmd.op == OP_POOL:
                self._pool_step()
            elif cmd.op == OP_STORE:
                st = steps[(cmd.tile, cmd.group)]
                data = self._store_step()
                if st.pool_r0 is not None:
                    out[st.feat_lo : st.feat_hi,
                        st.pool_r0 : st.pool_r1, st.pool_c0 : st.pool_c1] = data
                else:
                    out[st.feat_lo : st.feat_hi,
                        st.out_r0 : st.out_r1, st.out_c0 : st.out_c1] = data
                stored.add((cmd.tile, cmd.group))
            else:
                raise fxp.SimulationFault("unknown opcode %d" % cmd.op)
        self.counters.dram_bytes_in += fifo.dram_bytes
        self._release_layer()
        if stored != set(steps):
            raise fxp.SimulationFault("command stream left residencies unstored")
        return Tensor3D(out)

    def run_layer(self, layer: ConvLayerSpec, plan: TilePlan, inp: Tensor3D,
                  filters: FilterSet):
        base = self.counters.copy()
        out = self.execute_commands(layer, plan, inp, filters)
        return out, self.counters.delta(base)

    def run_network(self, net: NetworkSpec, inp: Tensor3D, weights, plans):
        per_layer = []
        cur = inp
        for layer, filters, plan in zip(net.layers, weights, plans):
            cur, delta = self.run_layer(layer, plan, cur, filters)
            per_layer.append(delta)
        return cur, per_layer


def run_tile(tile: Tensor3D, filters: FilterSet, layer: ConvLayerSpec,
             step: TileStep, config: Optional[DatapathConfig] = None):
    """One-shot residency run on a fresh datapath instance."""
    acc = Accelerator(config)
    return acc.run_tile(tile, filters, layer, step)


def run_layer_full(layer: ConvLayerSpec, inp: Tensor3D, filters: FilterSet,
                   config: Optional[DatapathConfig] = None):
    """Whole layer as a single residency (needs a bank big enough to hold it)."""
    step = full_layer_step(layer)
    planes, delta = run_tile(inp, filters, layer, step, config)
    return Tensor3D(planes), delta


@dataclass
class CycleInfo:
    phase: str
    results: int
    stalled: bool
    done: bool = False


class CycleEngine:
    """Cycle-stepped model of one residency; the reference the fast path must match.

    Streams words through the column buffer, forms windows at up to
    c_parallel positions per cycle, routes them through distinct conv
    units, and advances DMA/prefetch/writeback phases one word per cycle.
    """

    def __init__(self, layer: ConvLayerSpec, step: TileStep, tile: Tensor3D,
                 filters: FilterSet, config: Optional[DatapathConfig] = None):
        self.config = config or DatapathConfig()
        self.layer = layer
        self.step = step
        want = (layer.in_c, step.in_h, step.in_w)
        if tile.data.shape != want:
            raise ValueError("tile shape %s, expected %s" % (tile.data.shape, want))
        self.tile = tile.data
        self.filters = filters
        self.counters = PerfCounters()
        self.cu = CuArray(self.config)
        self.colbuf = ColumnBuffer()
        self.acc = np.empty((step.feats, step.out_h, step.out_w), dtype=np.int64)
        if layer.has_bias:
            bias = filters.biases[step.feat_lo : step.feat_hi].astype(np.int64)
            self.acc[:] = fxp.acc_from_fx(bias)[:, None, None]
        else:
            self.acc[:] = 0
        self.planes = None
        self.pooled = None
        self._gen = self._run_cycles()
        self._done = False

    # spec-facing name
    def stream_cycle(self) -> CycleInfo:
        if self._done:
            return CycleInfo("done", 0, False, True)
        try:
            return next(self._gen)
        except StopIteration:
            self._done = True
            return CycleInfo("done", 0, False, True)

    def run(self):
        while not self.stream_cycle().done:
            pass
        data = self.pooled if self.pooled is not None else self.planes
        return data, self.counters

    # -- internals ----------------------------------------------------------

    def _tick_write(self, phase, stalled):
        self.counters.cycles += 1
        self.counters.sram_writes += 1
        if stalled:
            self.counters.stall_cycles += 1
        return CycleInfo(phase, 0, stalled)

    def _tick_read(self, phase, stalled):
        self.counters.cycles += 1
        self.counters.sram_reads += 1
        if stalled:
            self.counters.stall_cycles += 1
        return CycleInfo(phase, 0, stalled)

    def _run_cycles(self):
        layer, step, cfg = self.layer, self.step, self.config
        if step.load_weights:
            nbytes = step.weight_bytes(layer)
            self.counters.dram_bytes_in += nbytes
            for _ in range(_words(nbytes)):
                yield self._tick_write("dma_wt", False)
        if step.load_input:
            nbytes = step.input_bytes(layer)
            self.counters.dram_bytes_in += nbytes
            for _ in range(_words(nbytes)):
                yield self._tick_write("dma_img", False)

        F = cfg.f_parallel
        w64 = self.filters.weights.astype(np.int64)
        for ch_lo, ch_hi, f_lo, f_hi in step.conv_channel_ranges(layer):
            for ch in range(ch_lo, ch_hi):
                k_idx = ch - ch_lo
                for f0 in range(f_lo, f_hi, F):
                    feats = list(range(f0, min(f0 + F, f_hi)))
                    first = True
                    for si, sj, rr, cc in subkernel_slots(layer.kernel):
                        words = len(feats) * rr * cc
                        if first and layer.has_bias:
                            words += len(feats)
                        first = False
                        for fi, m in enumerate(feats):
                            w3 = np.zeros((3, 3), dtype=np.int64)
                            w3[:rr, :cc] = w64[m, k_idx, 3 * si : 3 * si + rr,
                                               3 * sj : 3 * sj + cc]
                            mask = np.zeros((3, 3), dtype=bool)
                            mask[:rr, :cc] = True
                            self.cu.load_feature(
                                fi, w3, mask,
                                int(self.filters.biases[m]) if layer.has_bias else 0,
                            )
                        for _ in range(_ceil_div(words, WORD_PIXELS)):
                            yield self._tick_read("prefetch", True)
                        yield from self._stream_pass(ch, feats, si, sj, rr, cc)
                        for _ in range(cfg.pipeline_depth):
                            self.counters.cycles += 1
                            yield CycleInfo("flush", 0, False)

        fxp.check_acc_range(self.acc)
        self.planes = fxp.quantize_array(self.acc)
        for _ in range(_words(self.planes.size * BYTES_PER_WORD)):
            yield self._tick_write("writeback", True)

        if layer.pool is not None:
            self.pooled = np.stack(
                [PoolUnit(layer.pool).pool_plane(p) for p in self.planes]
            )
            for _ in range(_words(self.planes.size * BYTES_PER_WORD)):
                yield self._tick_read("pool", True)
            for _ in range(_words(self.pooled.size * BYTES_PER_WORD)):
                yield self._tick_write("pool", True)

        data = self.pooled if self.pooled is not None else self.planes
        nbytes = data.size * BYTES_PER_WORD
        self.counters.dram_bytes_out += nbytes
        for _ in range(_words(nbytes)):
            yield self._tick_read("store", False)

    def _stream_pass(self, ch, feats, si, sj, rr, cc):
        layer, step = self.layer, self.step
        a, pad = layer.stride, layer.pad
        g = _pass_geometry(layer, step, si, sj, rr, cc)
        self.colbuf = ColumnBuffer()

        # completion coordinates are unique per output: one row per x, one
        # column position per y, so at most c_parallel windows form per cycle
        col_of = {}
        for y in range(step.out_c0, step.out_c1):
            col_of.setdefault(
                (a * y - pad + 3 * sj + cc - 1 - g.span_lo) // WORD_PIXELS, []
            ).append(y)

        for r in range(g.r_first, g.r_last + 1):
            stored_row = None
            if step.in_r0 <= r < step.in_r1:
                stored_row = self.tile[ch, r - step.in_r0]
            self.colbuf.push(r, stored_row)
            x = None
            num = r + pad - 3 * si - (rr - 1)
            if num % a == 0:
                cand = num // a
                if step.out_r0 <= cand < step.out_r1:
                    x = cand
            for w in range(g.words_cycle):
                word_lo = g.span_lo + w * WORD_PIXELS
                is_read = (
                    stored_row is not None
                    and word_lo + WORD_PIXELS > step.in_c0
                    and word_lo < step.in_c1
                )
                self.counters.cycles += 1
                if is_read:
                    self.counters.sram_reads += 1
                results = 0
                if x is not None:
                    for y in col_of.get(w, ()):
                        results += self._emit(ch, feats, si, sj, rr, cc, x, y)
                yield CycleInfo("stream", results, False)

    def _emit(self, ch, feats, si, sj, rr, cc, x, y):
        layer, step = self.layer, self.step
        a, pad = layer.stride, layer.pad
        window = np.zeros((3, 3), dtype=np.int64)
        for di in range(rr):
            row = self.colbuf.get(a * x - pad + 3 * si + di)
            if row is None:
                continue
            for dj in range(cc):
                c = a * y - pad + 3 * sj + dj
                if step.in_c0 <= c < step.in_c1:
                    window[di, dj] = row[c - step.in_c0]
        pos = (a * y - pad + 3 * sj + cc - 1 - self.step.in_c0) % self.config.c_parallel
        ai_r, ai_c = x - step.out_r0, y - step.out_c0
        for fi, m in enumerate(feats):
            val = self.cu.dot(fi, pos, window)
            self.acc[m - step.feat_lo, ai_r, ai_c] = fxp.acc_add(
                int(self.acc[m - step.feat_lo, ai_r, ai_c]), val
            )
            self.counters.macs_executed += rr * cc
        return len(feats)
