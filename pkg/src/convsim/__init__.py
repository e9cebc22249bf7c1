"""Bit-exact, cycle-approximate simulator of a streaming conv/pool accelerator
with the image/feature/kernel decomposition planner that schedules layers
into its 128 KB on-chip buffer."""

from . import datapath, fxp, netmodel, oracle, perf, planner, pooling
from .datapath import Accelerator, CycleEngine, DatapathConfig, run_layer_full, run_tile
from .netmodel import (
    ConvLayerSpec,
    FilterSet,
    NetworkSpec,
    PoolSpec,
    Tensor3D,
    load_filters,
    load_tensor,
    parse_network,
    parse_network_file,
    render_network,
    store_filters,
    store_tensor,
)
from .oracle import conv2d_ref, maxpool_ref, run_network_ref
from .perf import PerfCounters, PowerProfile, energy_efficiency, gops, report
from .planner import (
    Command,
    CommandFifo,
    PlanInfeasibleError,
    TilePlan,
    TileStep,
    dram_traffic,
    emit_commands,
    halo_extent,
    plan_layer,
    plan_network,
    tile_footprint,
    tile_steps,
)

__version__ = "0.1.0"


def bundled_net_path(name="alexnet"):
    """Path of a network description shipped with the package."""
    import importlib.resources as res

    p = res.files(__name__) / "data" / ("%s.net" % name)
    if not p.is_file():
        raise FileNotFoundError("no bundled network named %r" % name)
    return str(p)
