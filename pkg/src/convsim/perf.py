"""Performance counters, throughput/efficiency arithmetic, report rendering.

Conventions: 1 MAC = 2 ops; the array peaks at 16 units x 9 multipliers =
144 MACs per cycle; reported KB means 1000 bytes.  Power is always a
configuration input (measured silicon values), never a model output.
"""

import csv
import io
import warnings
from dataclasses import asdict, dataclass, field, fields

from .netmodel import ConvLayerSpec, NetworkSpec, mem_bytes, mem_kb, ops_count

PEAK_MACS_PER_CYCLE = 16 * 9

FREQ_ENVELOPE_MHZ = (20.0, 500.0)


def _load_operating_points():
    """MHz -> core mW map from the bundled operating-points file."""
    import importlib.resources as res

    points = {}
    text = (res.files(__package__) / "data" / "power.cfg").read_text()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            freq, mw = line.split()[:2]
            points[float(freq)] = float(mw)
    return points


OPERATING_POINTS = _load_operating_points()


@dataclass
class PerfCounters:
    """Monotone event counters accumulated by a simulation run.

    stall_cycles counts port cycles spent on weight prefetch, writeback and
    pooling traffic while the input stream was paused; DMA load/store phases
    are plain cycles (no stream pending).
    """
    cycles: int = 0
    macs_executed: int = 0
    sram_reads: int = 0
    sram_writes: int = 0
    dram_bytes_in: int = 0
    dram_bytes_out: int = 0
    stall_cycles: int = 0
    commands_executed: int = 0

    def add(self, other: "PerfCounters") -> "PerfCounters":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def copy(self) -> "PerfCounters":
        return PerfCounters(**asdict(self))

    def delta(self, baseline: "PerfCounters") -> "PerfCounters":
        return PerfCounters(
            **{
                f.name: getattr(self, f.name) - getattr(baseline, f.name)
                for f in fields(self)
            }
        )

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: int(d[f.name]) for f in fields(cls)})

    def check(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise AssertionError("negative counter %s" % f.name)
        budget = PEAK_MACS_PER_CYCLE * (self.cycles - self.stall_cycles)
        if self.macs_executed > budget:
            raise AssertionError(
                "MACs %d exceed array budget %d" % (self.macs_executed, budget)
            )


@dataclass
class PowerProfile:
    """Operating point: clock and measured total power."""
    freq_mhz: float
    power_mw: float
    energy_pj_per_mac: float = 0.0
    energy_pj_per_sram_word: float = 0.0
    energy_pj_per_dram_byte: float = 0.0

    def __post_init__(self):
        lo, hi = FREQ_ENVELOPE_MHZ
        if not lo <= self.freq_mhz <= hi:
            warnings.warn(
                "frequency %.1f MHz is outside the characterized %g-%g MHz envelope"
                % (self.freq_mhz, lo, hi),
                stacklevel=2,
            )


def default_power_mw(freq_mhz):
    """Measured power at a known operating point, else None."""
    return OPERATING_POINTS.get(float(freq_mhz))


def gops(counters: PerfCounters, freq_mhz: float):
    """(achieved, peak) throughput in 1e9 ops/s at the given clock."""
    peak = 2 * PEAK_MACS_PER_CYCLE * freq_mhz / 1000.0
    if counters.cycles <= 0:
        raise ValueError("gops needs cycles > 0")
    achieved = 2 * counters.macs_executed * freq_mhz / (counters.cycles * 1000.0)
    return achieved, peak


def energy_efficiency(gops_value: float, profile: PowerProfile) -> float:
    """TOPS per watt: GOPS / mW (the unit conversions cancel)."""
    if profile.power_mw <= 0:
        raise ValueError("energy efficiency needs power > 0")
    return gops_value / profile.power_mw


def format_ops(n: int) -> str:
    if n >= 10**9:
        return "%.1fG" % (n / 10**9)
    if n >= 10**6:
        return "%dM" % round(n / 10**6)
    return str(n)


def _dims_str(w, h, c):
    return "%dx%dx%d" % (w, h, c)


REPORT_COLUMNS = [
    "layer", "input", "output", "ops", "in_kb", "out_kb", "total_kb",
    "plan", "order", "cycles", "gops", "dram_in_b", "dram_out_b",
]


def report_rows(net: NetworkSpec, plans=None, counters_list=None, freq_mhz=500.0):
    """Per-layer report rows plus a totals row, as column->string dicts.

    The ops and memory columns come straight from the analytic formulas;
    nothing here recomputes them.
    """
    rows = []
    tot_ops = tot_in_kb = tot_out_kb = tot_total_kb = 0
    tot_cycles = tot_macs = tot_din = tot_dout = 0
    have_counters = counters_list is not None
    for i, layer in enumerate(net.layers):
        ow, oh, m = layer.conv_out_dims()
        n_ops = ops_count(layer)
        in_b = mem_bytes((layer.in_w, layer.in_h, layer.in_c))
        out_b = mem_bytes((ow, oh, m))
        row = {
            "layer": str(i + 1),
            "input": _dims_str(layer.in_w, layer.in_h, layer.in_c),
            "output": _dims_str(ow, oh, m),
            "ops": format_ops(n_ops),
            "in_kb": str(mem_kb(in_b)),
            "out_kb": str(mem_kb(out_b)),
            "total_kb": str(mem_kb(in_b + out_b)),
        }
        tot_ops += n_ops
        tot_in_kb += mem_kb(in_b)
        tot_out_kb += mem_kb(out_b)
        tot_total_kb += mem_kb(in_b + out_b)
        if plans is not None:
            p = plans[i]
            row["plan"] = "%dx%dx%d/%d" % (p.gx, p.gy, p.f, p.s)
            row["order"] = p.loop_order
        else:
            row["plan"] = "-"
            row["order"] = "-"
        if have_counters:
            c = counters_list[i]
            achieved, _ = gops(c, freq_mhz)
            row["cycles"] = str(c.cycles)
            row["gops"] = "%.2f" % achieved
            row["dram_in_b"] = str(c.dram_bytes_in)
            row["dram_out_b"] = str(c.dram_bytes_out)
            tot_cycles += c.cycles
            tot_macs += c.macs_executed
            tot_din += c.dram_bytes_in
            tot_dout += c.dram_bytes_out
        elif plans is not None:
            p = plans[i]
            row["cycles"] = "-"
            row["gops"] = "-"
            row["dram_in_b"] = str(p.dram_bytes_in)
            row["dram_out_b"] = str(p.dram_bytes_out)
            tot_din += p.dram_bytes_in
            tot_dout += p.dram_bytes_out
        else:
            row.update({"cycles": "-", "gops": "-", "dram_in_b": "-", "dram_out_b": "-"})
        rows.append(row)

    total = {
        "layer": "total",
        "input": "-",
        "output": "-",
        "ops": format_ops(tot_ops),
        "in_kb": str(tot_in_kb),
        "out_kb": str(tot_out_kb),
        "total_kb": str(tot_total_kb),
        "plan": "-",
        "order": "-",
        "cycles": str(tot_cycles) if have_counters else "-",
        "gops": (
            "%.2f" % (2 * tot_macs * freq_mhz / (tot_cycles * 1000.0))
            if have_counters and tot_cycles
            else "-"
        ),
        "dram_in_b": str(tot_din) if (have_counters or plans is not None) else "-",
        "dram_out_b": str(tot_dout) if (have_counters or plans is not None) else "-",
    }
    rows.append(total)
    return rows


def render_report(rows, fmt="text") -> str:
    """Render report rows; text and CSV carry the identical strings."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()
    if fmt != "text":
        raise ValueError("unknown report format %r" % fmt)
    widths = {c: len(c) for c in REPORT_COLUMNS}
    for row in rows:
        for c in REPORT_COLUMNS:
            widths[c] = max(widths[c], len(row[c]))
    lines = ["  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS)]
    lines.append("  ".join("-" * widths[c] for c in REPORT_COLUMNS))
    for row in rows:
        lines.append("  ".join(row[c].ljust(widths[c]) for c in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"


def report(net, plans=None, counters_list=None, freq_mhz=500.0, fmt="text") -> str:
    return render_report(report_rows(net, plans, counters_list, freq_mhz), fmt)
