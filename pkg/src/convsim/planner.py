"""Image/feature/kernel decomposition planning and command-stream emission.

A layer is split three ways until every working set fits the on-chip
buffer:

  * image grid gx x gy  -- partitions the FINAL (post-pool) output plane;
    tiles of a pooled layer overlap in conv space by the pool halo so no
    pooling window ever crosses a tile seam
  * feature split f     -- output features held resident per pass
  * kernel split s      -- ceil(K/3)^2 zero-padded 3x3 sub-kernels

Feasibility always uses halo-correct input footprints; the naive
(ceil-partition, halo-free) figure is carried alongside for reporting.
Weights for the resident feature group are staged in the buffer bank, so
the capacity check is input + output + weights <= sram_bytes.

Loop orders model what stays resident across the outer loop:
  * tiles-outer:    input loaded once per tile, weights re-fetched per
                    tile x group
  * features-outer: weights loaded once per group, input re-fetched per
                    group x tile
"""

import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

from .netmodel import BYTES_PER_WORD, ConvLayerSpec, mem_bytes

SRAM_BYTES_DEFAULT = 128 * 1024
SRAM_WORD_BYTES = 16  # one port access moves 8 pixels

FIFO_DEPTH = 128
FIFO_LOW_WATER = 32
COMMAND_BYTES = 8

MAX_GRID = 16       # exhaustive search bound per image axis
MAX_FEATURE_SPLIT = 256  # group id is an 8-bit command field


class PlanInfeasibleError(Exception):
    """No decomposition of the layer fits the SRAM budget."""


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def ceil_parts(total: int, n: int) -> List[Tuple[int, int]]:
    """Split `total` into n (start, size) parts: ceil-sized parts, remainder last."""
    if n < 1 or n > total:
        raise ValueError("cannot split %d into %d parts" % (total, n))
    size = -(-total // n)
    parts = []
    start = 0
    while start < total:
        parts.append((start, min(size, total - start)))
        start += size
    return parts


def group_ranges(out_c: int, f: int) -> List[Tuple[int, int]]:
    """Feature residency groups [lo, hi) for a requested split f."""
    return [(s, s + n) for s, n in ceil_parts(out_c, f)]


def kernel_splits(kernel: int) -> int:
    """Number of 3x3 sub-kernels a KxK kernel decomposes into."""
    return (-(-kernel // 3)) ** 2


def halo_extent(layer: ConvLayerSpec, out_w: int, out_h: int) -> Tuple[int, int]:
    """Stored input extent feeding an out_w x out_h conv-output tile."""
    w = min((out_w - 1) * layer.stride + layer.kernel, layer.in_w)
    h = min((out_h - 1) * layer.stride + layer.kernel, layer.in_h)
    return w, h


def _conv_span(layer: ConvLayerSpec, start: int, size: int) -> Tuple[int, int]:
    # final(post-pool)-space part -> conv-space (start, size)
    if layer.pool is None:
        return start, size
    ps, pk = layer.pool.stride, layer.pool.kernel
    return start * ps, (size - 1) * ps + pk


def _input_span(layer: ConvLayerSpec, axis_dim: int, cstart: int, csize: int) -> Tuple[int, int]:
    # conv-space part -> stored input (start, stop), clipped to the layer
    lo = cstart * layer.stride - layer.pad
    hi = (cstart + csize - 1) * layer.stride - layer.pad + layer.kernel  # exclusive
    return max(0, lo), min(axis_dim, hi)


@dataclass(frozen=True)
class TileStep:
    """One (image tile, feature group) residency the datapath executes."""
    tile_id: int
    group_id: int
    feat_lo: int
    feat_hi: int
    # conv-space output region, absolute half-open [r0, r1) x [c0, c1)
    out_r0: int
    out_r1: int
    out_c0: int
    out_c1: int
    # stored input region, absolute half-open
    in_r0: int
    in_r1: int
    in_c0: int
    in_c1: int
    # pooled-space output region (None when the layer has no pool)
    pool_r0: Optional[int] = None
    pool_r1: Optional[int] = None
    pool_c0: Optional[int] = None
    pool_c1: Optional[int] = None
    load_input: bool = True
    load_weights: bool = True

    @property
    def out_h(self):
        return self.out_r1 - self.out_r0

    @property
    def out_w(self):
        return self.out_c1 - self.out_c0

    @property
    def in_h(self):
        return self.in_r1 - self.in_r0

    @property
    def in_w(self):
        return self.in_c1 - self.in_c0

    @property
    def feats(self):
        return self.feat_hi - self.feat_lo

    def input_bytes(self, layer):
        return self.in_h * self.in_w * layer.in_c * BYTES_PER_WORD

    def out_bytes(self):
        return self.out_h * self.out_w * self.feats * BYTES_PER_WORD

    def pooled_bytes(self):
        if self.pool_r0 is None:
            return self.out_bytes()
        return (self.pool_r1 - self.pool_r0) * (self.pool_c1 - self.pool_c0) \
            * self.feats * BYTES_PER_WORD

    def store_bytes(self):
        return self.pooled_bytes()

    def weight_bytes(self, layer):
        cpg = layer.in_c // layer.groups
        n = self.feats * cpg * layer.kernel ** 2 * BYTES_PER_WORD
        if layer.has_bias:
            n += self.feats * BYTES_PER_WORD
        return n

    def conv_channel_ranges(self, layer) -> List[Tuple[int, int, int, int]]:
        """(ch_lo, ch_hi, feat_lo, feat_hi) sub-batches, split at conv-group seams."""
        cpg = layer.in_c // layer.groups
        mpg = layer.out_c // layer.groups
        out = []
        f = self.feat_lo
        while f < self.feat_hi:
            g = f // mpg
            f_hi = min(self.feat_hi, (g + 1) * mpg)
            out.append((g * cpg, (g + 1) * cpg, f, f_hi))
            f = f_hi
        return out

    def channel_list(self, layer) -> List[int]:
        chans = []
        for ch_lo, ch_hi, _, _ in self.conv_channel_ranges(layer):
            chans.extend(range(ch_lo, ch_hi))
        return chans


@dataclass(frozen=True)
class TilePlan:
    """Chosen decomposition of one layer plus its footprint/traffic accounting."""
    gx: int
    gy: int
    f: int
    s: int
    in_tile_w: int
    in_tile_h: int
    out_tile_w: int
    out_tile_h: int
    in_naive_bytes: int
    in_halo_bytes: int
    out_bytes: int
    wt_bytes: int
    loop_order: str
    dram_bytes_in: int
    dram_bytes_out: int

    @property
    def n_tiles(self):
        return self.gx * self.gy

    def total_sram_bytes(self):
        return self.in_halo_bytes + self.out_bytes + self.wt_bytes


def _axis_geometry(layer, final_dim, axis_dim, g):
    """Per-part (conv_start, conv_size, in_start, in_stop) for one axis."""
    rows = []
    for fstart, fsize in ceil_parts(final_dim, g):
        cstart, csize = _conv_span(layer, fstart, fsize)
        ilo, ihi = _input_span(layer, axis_dim, cstart, csize)
        rows.append((fstart, fsize, cstart, csize, ilo, ihi))
    return rows


def _total_weight_bytes(layer):
    n = layer.out_c * (layer.in_c // layer.groups) * layer.kernel ** 2 * BYTES_PER_WORD
    if layer.has_bias:
        n += layer.out_c * BYTES_PER_WORD
    return n


def tile_footprint(layer: ConvLayerSpec, gx: int, gy: int, f: int):
    """(in_naive_bytes, in_halo_bytes, out_bytes, wt_bytes) for the worst tile.

    in_naive ceil-partitions the input with no halo (the figure decomposition
    summaries quote); in_halo is the physically required stored extent.
    """
    fw, fh, _ = layer.out_dims()
    if gx > fw or gy > fh:
        raise ValueError("grid %dx%d exceeds output plane %dx%d" % (gx, gy, fw, fh))
    cols = _axis_geometry(layer, fw, layer.in_w, gx)
    rows = _axis_geometry(layer, fh, layer.in_h, gy)

    in_naive = -(-layer.in_w // gx) * -(-layer.in_h // gy) * layer.in_c * BYTES_PER_WORD
    max_icols = max(ihi - ilo for _, _, _, _, ilo, ihi in cols)
    max_irows = max(ihi - ilo for _, _, _, _, ilo, ihi in rows)
    in_halo = max_icols * max_irows * layer.in_c * BYTES_PER_WORD

    max_ccols = max(csize for _, _, _, csize, _, _ in cols)
    max_crows = max(csize for _, _, _, csize, _, _ in rows)
    feats = -(-layer.out_c // f)
    out_bytes = max_ccols * max_crows * feats * BYTES_PER_WORD

    cpg = layer.in_c // layer.groups
    wt = feats * cpg * layer.kernel ** 2 * BYTES_PER_WORD
    if layer.has_bias:
        wt += feats * BYTES_PER_WORD
    return in_naive, in_halo, out_bytes, wt


def _traffic_terms(layer, gx, gy, f):
    cols = _axis_geometry(layer, layer.out_dims()[0], layer.in_w, gx)
    rows = _axis_geometry(layer, layer.out_dims()[1], layer.in_h, gy)
    sum_icols = sum(ihi - ilo for _, _, _, _, ilo, ihi in cols)
    sum_irows = sum(ihi - ilo for _, _, _, _, ilo, ihi in rows)
    halo_sum = sum_icols * sum_irows * layer.in_c * BYTES_PER_WORD
    wt_total = _total_weight_bytes(layer)
    fw, fh, m = layer.out_dims()
    out_total = fw * fh * m * BYTES_PER_WORD
    n_groups = len(group_ranges(layer.out_c, f))
    return halo_sum, wt_total, out_total, n_groups


def dram_traffic_for_order(layer, gx, gy, f, order) -> Tuple[int, int]:
    halo_sum, wt_total, out_total, n_groups = _traffic_terms(layer, gx, gy, f)
    if order == "tiles":
        bytes_in = halo_sum + gx * gy * wt_total
    elif order == "features":
        bytes_in = n_groups * halo_sum + wt_total
    else:
        raise ValueError("unknown loop order %r" % order)
    return bytes_in, out_total


def dram_traffic(layer: ConvLayerSpec, plan: TilePlan) -> Tuple[int, int]:
    """Estimated DRAM bytes (in, out) for the plan's recorded loop order."""
    return dram_traffic_for_order(layer, plan.gx, plan.gy, plan.f, plan.loop_order)


def _build_plan(layer, gx, gy, f):
    in_naive, in_halo, out_b, wt_b = tile_footprint(layer, gx, gy, f)
    cols = _axis_geometry(layer, layer.out_dims()[0], layer.in_w, gx)
    rows = _axis_geometry(layer, layer.out_dims()[1], layer.in_h, gy)
    t_tiles = dram_traffic_for_order(layer, gx, gy, f, "tiles")
    t_feats = dram_traffic_for_order(layer, gx, gy, f, "features")
    if sum(t_tiles) <= sum(t_feats):
        order, traffic = "tiles", t_tiles
    else:
        order, traffic = "features", t_feats
    return TilePlan(
        gx=gx,
        gy=gy,
        f=len(group_ranges(layer.out_c, f)),
        s=kernel_splits(layer.kernel),
        in_tile_w=max(ihi - ilo for _, _, _, _, ilo, ihi in cols),
        in_tile_h=max(ihi - ilo for _, _, _, _, ilo, ihi in rows),
        out_tile_w=max(cs for _, _, _, cs, _, _ in cols),
        out_tile_h=max(cs for _, _, _, cs, _, _ in rows),
        in_naive_bytes=in_naive,
        in_halo_bytes=in_halo,
        out_bytes=out_b,
        wt_bytes=wt_b,
        loop_order=order,
        dram_bytes_in=traffic[0],
        dram_bytes_out=traffic[1],
    )


def _divisors(n):
    out = [d for d in range(1, n + 1) if n % d == 0]
    return out


def plan_layer(layer: ConvLayerSpec, sram_bytes: int = SRAM_BYTES_DEFAULT,
               forced: Optional[Tuple[int, int, int]] = None) -> TilePlan:
    """Smallest gx*gy*f decomposition whose halo-correct footprints fit.

    Ties break on estimated DRAM traffic, then smaller f, then (gx, gy).
    `forced` pins (gx, gy, f) and only validates feasibility.
    """
    if forced is not None:
        gx, gy, f = forced
        try:
            plan = _build_plan(layer, gx, gy, f)
        except ValueError as e:
            raise PlanInfeasibleError(str(e)) from None
        if plan.total_sram_bytes() > sram_bytes:
            raise PlanInfeasibleError(
                "forced plan (%d,%d,%d) needs %d bytes > budget %d"
                % (gx, gy, f, plan.total_sram_bytes(), sram_bytes)
            )
        return plan

    fw, fh, _ = layer.out_dims()
    gxs = range(1, min(MAX_GRID, fw) + 1)
    gys = range(1, min(MAX_GRID, fh) + 1)
    fs = [d for d in _divisors(layer.out_c) if d <= MAX_FEATURE_SPLIT]

    combos = {}
    for gx in gxs:
        for gy in gys:
            for f in fs:
                combos.setdefault(gx * gy * f, []).append((f, gx, gy))

    for product in sorted(combos):
        best = None
        for f, gx, gy in sorted(combos[product]):
            _, in_halo, out_b, wt_b = tile_footprint(layer, gx, gy, f)
            if in_halo + out_b + wt_b > sram_bytes:
                continue
            t_tiles = dram_traffic_for_order(layer, gx, gy, f, "tiles")
            t_feats = dram_traffic_for_order(layer, gx, gy, f, "features")
            key = (min(sum(t_tiles), sum(t_feats)), f, gx, gy)
            if best is None or key < best[0]:
                best = (key, gx, gy, f)
        if best is not None:
            _, gx, gy, f = best
            return _build_plan(layer, gx, gy, f)

    raise PlanInfeasibleError(
        "no decomposition of the layer fits %d bytes" % sram_bytes
    )


def plan_network(net, sram_bytes: int = SRAM_BYTES_DEFAULT,
                 forced: Optional[Tuple[int, int, int]] = None) -> List[TilePlan]:
    return [plan_layer(l, sram_bytes, forced=forced) for l in net.layers]


def tile_steps(layer: ConvLayerSpec, plan: TilePlan) -> List[TileStep]:
    """Residency steps in the plan's loop order, with DMA-reuse flags set."""
    fw, fh, _ = layer.out_dims()
    cols = _axis_geometry(layer, fw, layer.in_w, plan.gx)
    rows = _axis_geometry(layer, fh, layer.in_h, plan.gy)
    groups = group_ranges(layer.out_c, plan.f)

    def make(ty, tx, gi, load_input, load_weights):
        frow = rows[ty]
        fcol = cols[tx]
        lo, hi = groups[gi]
        kw = dict(
            tile_id=ty * plan.gx + tx,
            group_id=gi,
            feat_lo=lo,
            feat_hi=hi,
            out_r0=frow[2],
            out_r1=frow[2] + frow[3],
            out_c0=fcol[2],
            out_c1=fcol[2] + fcol[3],
            in_r0=frow[4],
            in_r1=frow[5],
            in_c0=fcol[4],
            in_c1=fcol[5],
            load_input=load_input,
            load_weights=load_weights,
        )
        if layer.pool is not None:
            kw.update(
                pool_r0=frow[0],
                pool_r1=frow[0] + frow[1],
                pool_c0=fcol[0],
                pool_c1=fcol[0] + fcol[1],
            )
        return TileStep(**kw)

    steps = []
    if plan.loop_order == "tiles":
        for ty in range(plan.gy):
            for tx in range(plan.gx):
                for gi in range(len(groups)):
                    steps.append(make(ty, tx, gi, gi == 0, True))
    else:
        for gi in range(len(groups)):
            for ty in range(plan.gy):
                for tx in range(plan.gx):
                    steps.append(make(ty, tx, gi, True, ty == 0 and tx == 0))
    return steps


def full_layer_step(layer: ConvLayerSpec) -> TileStep:
    """Single-residency step covering the whole layer (plan 1,1,1)."""
    plan = _build_plan(layer, 1, 1, 1)
    return tile_steps(layer, plan)[0]


# ---------------------------------------------------------------------------
# command stream
# ---------------------------------------------------------------------------

OP_LOAD_IMG = 1
OP_LOAD_WT = 2
OP_CONV = 3
OP_POOL = 4
OP_STORE = 5
OP_BARRIER = 6

OP_NAMES = {
    OP_LOAD_IMG: "LOAD_IMG",
    OP_LOAD_WT: "LOAD_WT",
    OP_CONV: "CONV",
    OP_POOL: "POOL",
    OP_STORE: "STORE",
    OP_BARRIER: "BARRIER",
}

COMMAND_MAGIC = b"KCMD"


@dataclass(frozen=True)
class Command:
    """One 64-bit control word: op(8) | tile(12) | group(8) | chan(12) | payload(24)."""
    op: int
    tile: int = 0
    group: int = 0
    chan: int = 0
    payload: int = 0

    def encode(self) -> int:
        if not (0 <= self.op < 1 << 8 and 0 <= self.tile < 1 << 12
                and 0 <= self.group < 1 << 8 and 0 <= self.chan < 1 << 12
                and 0 <= self.payload < 1 << 24):
            raise ValueError("command field out of range: %r" % (self,))
        return (self.op << 56) | (self.tile << 44) | (self.group << 36) \
            | (self.chan << 24) | self.payload

    @classmethod
    def decode(cls, word: int) -> "Command":
        return cls(
            op=(word >> 56) & 0xFF,
            tile=(word >> 44) & 0xFFF,
            group=(word >> 36) & 0xFF,
            chan=(word >> 24) & 0xFFF,
            payload=word & 0xFFFFFF,
        )

    def __str__(self):
        return "%s t%d g%d ch%d p%d" % (
            OP_NAMES.get(self.op, "OP%d" % self.op),
            self.tile, self.group, self.chan, self.payload,
        )


def write_commands(path, commands):
    with open(path, "wb") as f:
        f.write(COMMAND_MAGIC)
        f.write(struct.pack("<I", len(commands)))
        for cmd in commands:
            f.write(struct.pack("<Q", cmd.encode()))


def read_commands(path) -> List[Command]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != COMMAND_MAGIC:
        raise ValueError("%s: bad magic, not a command file" % path)
    (count,) = struct.unpack("<I", blob[4:8])
    if len(blob) != 8 + 8 * count:
        raise ValueError("%s: length does not match command count" % path)
    return [
        Command.decode(struct.unpack("<Q", blob[8 + 8 * i : 16 + 8 * i])[0])
        for i in range(count)
    ]


def emit_commands(layer: ConvLayerSpec, plan: TilePlan) -> List[Command]:
    """Dependency-ordered LOAD/CONV/POOL/STORE stream; BARRIER between residencies."""
    cmds = []
    for idx, st in enumerate(tile_steps(layer, plan)):
        if idx:
            cmds.append(Command(OP_BARRIER))
        if st.load_weights:
            cmds.append(Command(OP_LOAD_WT, st.tile_id, st.group_id,
                                payload=st.weight_bytes(layer)))
        if st.load_input:
            cmds.append(Command(OP_LOAD_IMG, st.tile_id, st.group_id,
                                payload=st.input_bytes(layer)))
        for ch in st.channel_list(layer):
            cmds.append(Command(OP_CONV, st.tile_id, st.group_id, chan=ch,
                                payload=plan.s))
        if layer.pool is not None:
            cmds.append(Command(OP_POOL, st.tile_id, st.group_id,
                                payload=st.pooled_bytes()))
        cmds.append(Command(OP_STORE, st.tile_id, st.group_id,
                            payload=st.store_bytes()))
    return cmds


def check_dependencies(commands: List[Command], layer: ConvLayerSpec,
                       plan: TilePlan) -> None:
    """Independent validator: every residency fully loaded before compute,
    computed before store, exactly once, barriers only between residencies."""
    steps = {(s.tile_id, s.group_id): s for s in tile_steps(layer, plan)}
    img_live = None       # tile id whose input currently sits in the bank
    wt_live = None        # group id whose weights currently sit in the bank
    conv_seen = {key: set() for key in steps}
    pooled = set()
    stored = set()
    in_block = False

    for cmd in commands:
        if cmd.op == OP_BARRIER:
            if in_block:
                raise AssertionError("BARRIER inside a residency block")
            continue
        key = (cmd.tile, cmd.group)
        if cmd.op == OP_LOAD_WT:
            wt_live = cmd.group
            in_block = True
        elif cmd.op == OP_LOAD_IMG:
            img_live = cmd.tile
            in_block = True
        elif cmd.op == OP_CONV:
            if key not in steps:
                raise AssertionError("CONV for unknown residency %s" % (key,))
            if img_live != cmd.tile:
                raise AssertionError("CONV before its LOAD_IMG: %s" % cmd)
            if wt_live != cmd.group:
                raise AssertionError("CONV before its LOAD_WT: %s" % cmd)
            if cmd.chan in conv_seen[key]:
                raise AssertionError("duplicate CONV channel: %s" % cmd)
            conv_seen[key].add(cmd.chan)
            in_block = True
        elif cmd.op == OP_POOL:
            if conv_seen[key] != set(steps[key].channel_list(layer)):
                raise AssertionError("POOL before all CONVs of %s" % (key,))
            pooled.add(key)
        elif cmd.op == OP_STORE:
            if conv_seen[key] != set(steps[key].channel_list(layer)):
                raise AssertionError("STORE before all CONVs of %s" % (key,))
            if layer.pool is not None and key not in pooled:
                raise AssertionError("STORE before POOL of %s" % (key,))
            if key in stored:
                raise AssertionError("duplicate STORE of %s" % (key,))
            stored.add(key)
            in_block = False
        else:
            raise AssertionError("unknown opcode in %s" % cmd)

    if stored != set(steps):
        raise AssertionError("missing STOREs: %s" % (set(steps) - stored,))


class CommandFifo:
    """128-deep command queue refilled from DRAM below the low-water mark."""

    def __init__(self, commands, depth=FIFO_DEPTH, low_water=FIFO_LOW_WATER):
        self._commands = list(commands)
        self.depth = depth
        self.low_water = low_water
        self._next_load = 0
        self._next_pop = 0
        self.refills = 0
        self.dram_bytes = 0
        self.peak_level = 0
        self._refill()

    @property
    def level(self):
        return self._next_load - self._next_pop

    def _refill(self):
        n = min(self.depth - self.level, len(self._commands) - self._next_load)
        if n > 0:
            self._next_load += n
            self.refills += 1
            self.dram_bytes += COMMAND_BYTES * n
            self.peak_level = max(self.peak_level, self.level)

    def pop(self) -> Optional[Command]:
        if self.level < self.low_water:
            self._refill()
        if self.level == 0:
            return None
        cmd = self._commands[self._next_pop]
        self._next_pop += 1
        return cmd

    def __iter__(self):
        while True:
            cmd = self.pop()
            if cmd is None:
                return
            yield cmd


def plan_report_csv(net, plans) -> str:
    """Per-layer decomposition summary in the fixed CSV schema."""
    lines = ["layer,gx,gy,f,s,in_naive_B,in_halo_B,out_B,wt_B,dram_in_B,dram_out_B,loop_order"]
    for i, (layer, plan) in enumerate(zip(net.layers, plans), start=1):
        lines.append(
            "%d,%d,%d,%d,%d,%d,%d,%d,%d,%d,%d,%s"
            % (
                i, plan.gx, plan.gy, plan.f, plan.s,
                plan.in_naive_bytes, plan.in_halo_bytes, plan.out_bytes,
                plan.wt_bytes, plan.dram_bytes_in, plan.dram_bytes_out,
                plan.loop_order,
            )
        )
    return "\n".join(lines) + "\n"
