"""Command-line driver: plan / run / verify / report.

Exit codes: 0 success, 1 usage error, 2 infeasible plan, 3 verification
mismatch, 4 I/O or file-format error.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import bundled_net_path
from .datapath import Accelerator, DatapathConfig
from .netmodel import (
    FilterSet,
    NetworkFormatError,
    Tensor3D,
    TensorFormatError,
    load_filters,
    load_tensor,
    parse_network,
    parse_network_file,
    render_network,
)
from .oracle import run_network_ref
from .perf import (
    PerfCounters,
    PowerProfile,
    default_power_mw,
    energy_efficiency,
    gops,
    report,
)
from .planner import PlanInfeasibleError, TilePlan, plan_network, plan_report_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_MISMATCH = 3
EXIT_IO = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _tile_arg(text):
    try:
        gx, gy, f = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("--tile wants GX,GY,F") from None
    if min(gx, gy, f) < 1:
        raise argparse.ArgumentTypeError("--tile fields must be >= 1")
    return gx, gy, f


def build_parser() -> _Parser:
    p = _Parser(prog="convsim",
                description="streaming conv/pool accelerator simulator and tiling planner")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, with_run_flags=True):
        sp.add_argument("--net", required=True,
                        help="network description file (or a bundled name like 'alexnet')")
        sp.add_argument("--sram-kb", type=int, default=128,
                        help="on-chip buffer budget in KiB units of 1024 bytes (default 128)")
        sp.add_argument("--tile", type=_tile_arg, default=None, metavar="GX,GY,F",
                        help="force one decomposition for every layer")
        sp.add_argument("--format", choices=("text", "csv"), default="text")
        sp.add_argument("--out", default=None, help="also write the result to this path")
        if with_run_flags:
            sp.add_argument("--input", default=None, help="input tensor file")
            sp.add_argument("--weights", default=None,
                            help="filter file (single layer) or directory of layer%%02d.fxw")
            sp.add_argument("--random-weights", action="store_true",
                            help="synthesize input/weights not given as files")
            sp.add_argument("--seed", type=int, default=0)
            sp.add_argument("--freq-mhz", type=float, default=500.0)
            sp.add_argument("--power-mw", type=float, default=None,
                            help="measured power at the chosen clock (defaults from known operating points)")

    common(sub.add_parser("plan", help="decompose each layer and report footprints"),
           with_run_flags=False)
    common(sub.add_parser("run", help="simulate the network and report counters"))
    common(sub.add_parser("verify", help="diff the datapath against the reference loop nest"))

    rp = sub.add_parser("report", help="re-render counters saved by run --out")
    rp.add_argument("bundle", help="JSON bundle written by run --out")
    rp.add_argument("--format", choices=("text", "csv"), default="text")
    rp.add_argument("--out", default=None)
    return p


def _resolve_net(arg):
    if os.path.exists(arg):
        return parse_network_file(arg)
    name = arg[:-4] if arg.endswith(".net") else arg
    try:
        return parse_network_file(bundled_net_path(name))
    except FileNotFoundError:
        raise OSError("network description %r not found" % arg) from None


def _emit(text, out_path):
    sys.stdout.write(text)
    if not text.endswith("\n"):
        sys.stdout.write("\n")
    if out_path:
        with open(out_path, "w") as f:
            f.write(text)


def _load_data(net, args):
    rng = np.random.default_rng(args.seed)
    if args.input:
        inp = load_tensor(args.input)
    elif args.random_weights or args.weights is None:
        l0 = net.layers[0]
        inp = Tensor3D.random(l0.in_c, l0.in_h, l0.in_w, rng)
    else:
        raise _UsageError("run needs --input or --random-weights")
    if args.weights:
        if os.path.isdir(args.weights):
            weights = [
                load_filters(os.path.join(args.weights, "layer%02d.fxw" % i))
                for i in range(1, len(net.layers) + 1)
            ]
        else:
            if len(net.layers) != 1:
                raise _UsageError("--weights must be a directory for multi-layer nets")
            weights = [load_filters(args.weights)]
        for layer, fs in zip(net.layers, weights):
            fs.check_layer(layer)
    else:
        weights = [FilterSet.random(l, rng, scale=0.1) for l in net.layers]
    if (inp.c, inp.h, inp.w) != (net.layers[0].in_c, net.layers[0].in_h, net.layers[0].in_w):
        raise TensorFormatError("input tensor does not match the first layer")
    return inp, weights


def _summary_lines(total: PerfCounters, freq_mhz, power_mw):
    achieved, peak = gops(total, freq_mhz)
    lines = [
        "total: cycles=%d macs=%d stalls=%d sram(r/w)=%d/%d dram(in/out)=%d/%d commands=%d"
        % (
            total.cycles, total.macs_executed, total.stall_cycles,
            total.sram_reads, total.sram_writes,
            total.dram_bytes_in, total.dram_bytes_out, total.commands_executed,
        ),
        "throughput @ %.0f MHz: %.2f GOPS achieved, %.2f GOPS peak" % (freq_mhz, achieved, peak),
    ]
    if power_mw is None:
        power_mw = default_power_mw(freq_mhz)
    if power_mw is not None:
        eff = energy_efficiency(achieved, PowerProfile(freq_mhz, power_mw))
        peak_eff = energy_efficiency(peak, PowerProfile(freq_mhz, power_mw))
        lines.append(
            "efficiency @ %.1f mW: %.3f TOPS/W achieved, %.3f TOPS/W peak"
            % (power_mw, eff, peak_eff)
        )
    return lines


def _cmd_plan(args):
    net = _resolve_net(args.net)
    plans = plan_network(net, args.sram_kb * 1024, forced=args.tile)
    if args.format == "csv":
        _emit(plan_report_csv(net, plans), args.out)
    else:
        _emit(report(net, plans, None), args.out)
    return EXIT_OK


def _simulate(args):
    net = _resolve_net(args.net)
    plans = plan_network(net, args.sram_kb * 1024, forced=args.tile)
    inp, weights = _load_data(net, args)
    acc = Accelerator(DatapathConfig(sram_bytes=args.sram_kb * 1024))
    out, per_layer = acc.run_network(net, inp, weights, plans)
    return net, plans, inp, weights, out, per_layer


def _cmd_run(args):
    net, plans, _, _, _, per_layer = _simulate(args)
    total = PerfCounters()
    for d in per_layer:
        total.add(d)
    text = report(net, plans, per_layer, args.freq_mhz, args.format)
    text += "\n" + "\n".join(_summary_lines(total, args.freq_mhz, args.power_mw)) + "\n"
    sys.stdout.write(text)
    if args.out:
        bundle = {
            "name": net.name,
            "network": render_network(net),
            "freq_mhz": args.freq_mhz,
            "power_mw": args.power_mw,
            "sram_kb": args.sram_kb,
            "seed": args.seed,
            "plans": [asdict(p) for p in plans],
            "counters": [d.as_dict() for d in per_layer],
        }
        with open(args.out, "w") as f:
            json.dump(bundle, f, indent=1)
    return EXIT_OK


def _cmd_verify(args):
    net, plans, inp, weights, out, per_layer = _simulate(args)
    ref = run_network_ref(net, inp, weights)
    total = PerfCounters()
    for d in per_layer:
        total.add(d)
    ok = ref.same_bits(out)
    text = report(net, plans, per_layer, args.freq_mhz, args.format)
    text += "\n" + "\n".join(_summary_lines(total, args.freq_mhz, args.power_mw)) + "\n"
    if ok:
        text += "verify: PASS (datapath output bit-identical to the reference)\n"
    else:
        bad = int(np.count_nonzero(ref.data != out.data))
        text += "verify: MISMATCH (%d of %d words differ)\n" % (bad, ref.data.size)
    _emit(text, args.out)
    return EXIT_OK if ok else EXIT_MISMATCH


def _cmd_report(args):
    with open(args.bundle) as f:
        bundle = json.load(f)
    net = parse_network(bundle["network"], name=bundle.get("name", "network"))
    plans = [TilePlan(**d) for d in bundle["plans"]]
    counters = [PerfCounters.from_dict(d) for d in bundle["counters"]]
    total = PerfCounters()
    for d in counters:
        total.add(d)
    text = report(net, plans, counters, bundle["freq_mhz"], args.format)
    text += "\n" + "\n".join(
        _summary_lines(total, bundle["freq_mhz"], bundle.get("power_mw"))
    ) + "\n"
    _emit(text, args.out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "plan":
            return _cmd_plan(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "verify":
            return _cmd_verify(args)
        return _cmd_report(args)
    except _UsageError as e:
        sys.stderr.write("error: %s\n" % e)
        sys.stderr.write(parser.format_usage())
        return EXIT_USAGE
    except PlanInfeasibleError as e:
        sys.stderr.write("infeasible plan: %s\n" % e)
        return EXIT_INFEASIBLE
    except (OSError, NetworkFormatError, TensorFormatError, json.JSONDecodeError) as e:
        sys.stderr.write("i/o error: %s\n" % e)
        return EXIT_IO


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
