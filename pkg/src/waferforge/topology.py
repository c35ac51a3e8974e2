"""Static layout of a virtual wafer-scale neuromorphic system.

One wafer module carries 384 identical ASICs ("hicanns") arranged on a round
wafer as 48 reticle groups of 8. Each hicann provides 512 neuron circuits, two
synapse arrays, a floating-gate parameter memory, an event-merger tree and an
on-wafer bus/repeater/switch routing fabric. This module defines the
coordinate system, the counting arithmetic, the wafer grid and the fabric
wiring pattern; it holds no state.

Fabric model
------------
The routing fabric is modeled explicitly so that availability and routing are
well defined:

* 320 buses per hicann = 4 border groups (N, E, S, W) x 80 lanes. Bus ``b``
  belongs to group ``b // 80`` with lane ``b % 80``.
* Repeater ``i`` serves bus ``i`` and regenerates the signal across the
  hicann's border in its group's direction: lane ``k`` of group N pairs with
  lane ``k`` of group S on the northern neighbor, and so on. Repeaters come in
  8 blocks of 40 (blocks ``2d`` and ``2d+1`` cover lanes 0-39 and 40-79 of
  direction ``d``).
* 7680 switches per hicann: 2400 crossbar switches join buses of different
  groups whose lanes agree modulo 16; 5280 select switches join synapse driver
  ``D`` (0..219) to the 24 buses ``(7*D + 13*t) % 320``, ``t`` in 0..23.
* Spike sources leave a hicann on 8 sending channels. Neuron block ``b``
  (64 circuits) and background generator ``b`` feed leaf merger ``b``; the
  channel is shared with external-input merger ``b``. Channel ``c`` injects
  onto bus ``40*c`` and, as a fallback, onto the opposite-group bus
  ``(40*c + 160) % 320``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import lru_cache

__all__ = [
    "Kind",
    "Direction",
    "Coord",
    "TopologyConfig",
    "resource_count",
    "hicann_group",
    "group_members",
]


class Kind(enum.Enum):
    """Resource kinds with a dense per-hicann enumeration."""

    HICANN = "hicann"
    HICANN_GROUP = "hicann_group"
    JTAG_LINK = "jtag_link"
    HIGHSPEED_LINK = "highspeed_link"
    NEURON = "neuron"
    SYNAPSE_ARRAY = "synapse_array"
    SYNAPSE_ROW = "synapse_row"
    SYNAPSE_DRIVER = "synapse_driver"
    SYNAPSE = "synapse"
    FG_BLOCK = "fg_block"
    EXT_MERGER = "ext_merger"
    BG_GEN = "bg_gen"
    MERGER = "merger"
    ANALOG_OUT = "analog_out"
    BUS = "bus"
    REPEATER = "repeater"
    REPEATER_BLOCK = "repeater_block"
    SWITCH = "switch"


_KIND_ORDER = {k: i for i, k in enumerate(Kind)}


class Direction(enum.IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3

    @property
    def opposite(self) -> "Direction":
        return Direction((self + 2) % 4)

    @property
    def dxdy(self) -> tuple[int, int]:
        return ((0, -1), (1, 0), (0, 1), (-1, 0))[self]


@dataclass(frozen=True)
class Coord:
    """Typed coordinate: a resource kind plus its index tuple.

    Index layout per kind (h = hicann index):
      HICANN (h,) | HICANN_GROUP (g,) | JTAG_LINK/HIGHSPEED_LINK (h,)
      NEURON (h, n) | SYNAPSE_ARRAY (h, a) | SYNAPSE_ROW (h, a, r)
      SYNAPSE_DRIVER (h, a, d) | SYNAPSE (h, a, r, c) | FG_BLOCK (h, b)
      EXT_MERGER/BG_GEN/MERGER/ANALOG_OUT (h, m) | BUS/REPEATER (h, b)
      REPEATER_BLOCK (h, rb) | SWITCH (h, s)
    """

    kind: Kind
    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    @property
    def hicann(self) -> int:
        if self.kind in (Kind.HICANN_GROUP,):
            raise ValueError("group coordinate has no single hicann")
        return self.indices[0]

    def sort_key(self) -> tuple:
        return (_KIND_ORDER[self.kind], self.indices)

    def __lt__(self, other: "Coord") -> bool:
        return self.sort_key() < other.sort_key()

    def __str__(self) -> str:
        return f"{self.kind.value}[{','.join(str(i) for i in self.indices)}]"

    def to_json(self) -> list:
        return [self.kind.value, *self.indices]

    @classmethod
    def from_json(cls, data) -> "Coord":
        return cls(Kind(data[0]), tuple(data[1:]))

    # dense constructors
    @classmethod
    def hicann_(cls, h):
        return cls(Kind.HICANN, (h,))

    @classmethod
    def group(cls, g):
        return cls(Kind.HICANN_GROUP, (g,))

    @classmethod
    def neuron(cls, h, n):
        return cls(Kind.NEURON, (h, n))

    @classmethod
    def synapse_array(cls, h, a):
        return cls(Kind.SYNAPSE_ARRAY, (h, a))

    @classmethod
    def synapse_row(cls, h, a, r):
        return cls(Kind.SYNAPSE_ROW, (h, a, r))

    @classmethod
    def synapse_driver(cls, h, a, d):
        return cls(Kind.SYNAPSE_DRIVER, (h, a, d))

    @classmethod
    def synapse(cls, h, a, r, c):
        return cls(Kind.SYNAPSE, (h, a, r, c))

    @classmethod
    def fg_block(cls, h, b):
        return cls(Kind.FG_BLOCK, (h, b))

    @classmethod
    def ext_merger(cls, h, m):
        return cls(Kind.EXT_MERGER, (h, m))

    @classmethod
    def bg_gen(cls, h, m):
        return cls(Kind.BG_GEN, (h, m))

    @classmethod
    def merger(cls, h, m):
        return cls(Kind.MERGER, (h, m))

    @classmethod
    def analog_out(cls, h, o):
        return cls(Kind.ANALOG_OUT, (h, o))

    @classmethod
    def bus(cls, h, b):
        return cls(Kind.BUS, (h, b))

    @classmethod
    def repeater(cls, h, r):
        return cls(Kind.REPEATER, (h, r))

    @classmethod
    def repeater_block(cls, h, rb):
        return cls(Kind.REPEATER_BLOCK, (h, rb))

    @classmethod
    def switch(cls, h, s):
        return cls(Kind.SWITCH, (h, s))


@dataclass(frozen=True)
class TopologyConfig:
    """Counts and layout of one wafer module.

    Defaults describe the reference module; every count is configurable so
    reduced systems can be modeled. ``reticle_rows`` gives the number of
    reticles per reticle row on the (round) wafer; each reticle is a 4x2 block
    of hicanns and one hicann group. ``no_highspeed_groups`` are the central
    groups wired without a high-speed connection by design. ``edge_hicanns``
    are the dies adjacent to unconnected edge dies from an earlier
    post-processing version; their off-grid bus groups are excluded during
    commissioning. The default (``None``) resolves to the bottom grid row.
    """

    group_size: int = 8
    reticle_rows: tuple[int, ...] = (3, 5, 7, 9, 9, 7, 5, 3)
    reticle_shape: tuple[int, int] = (4, 2)  # hicanns per reticle: 4 wide, 2 tall
    neurons_per_hicann: int = 512
    neuron_block_size: int = 64
    arrays_per_hicann: int = 2
    rows_per_array: int = 224
    driven_rows_per_array: int = 220
    columns_per_array: int = 256
    fg_blocks_per_hicann: int = 4
    fg_rows: int = 24
    fg_columns: int = 129  # column 0 holds block-shared parameters
    ext_mergers_per_hicann: int = 8
    bg_gens_per_hicann: int = 8
    mergers_per_hicann: int = 15
    analog_outs_per_hicann: int = 2
    bus_groups: int = 4
    lanes_per_group: int = 80
    repeater_blocks_per_hicann: int = 8
    crossbar_lane_modulus: int = 16
    select_fanin: int = 24
    no_highspeed_groups: tuple[int, ...] = (19, 28)
    edge_hicanns: tuple[int, ...] | None = None
    dac_max: int = 1023
    dac_current_max: float = 2.5e-6  # A at full scale
    dac_voltage_max: float = 1.8  # V at full scale
    weight_max: int = 15
    gmax_divisor_min: int = 1
    gmax_divisor_max: int = 30
    vgmax_palette_size: int = 4
    speedup: float = 1.0e4

    def __post_init__(self):
        if self.edge_hicanns is None:
            ids = tuple(sorted(h for h, (x, y) in enumerate(_grid(self).xy)
                               if y == _grid(self).height - 1))
            object.__setattr__(self, "edge_hicanns", ids)
        else:
            object.__setattr__(self, "edge_hicanns", tuple(sorted(self.edge_hicanns)))

    # ---- derived counts -------------------------------------------------
    @property
    def n_groups(self) -> int:
        return sum(self.reticle_rows)

    @property
    def n_hicanns(self) -> int:
        return self.n_groups * self.group_size

    @property
    def drivers_per_array(self) -> int:
        return self.driven_rows_per_array // 2

    @property
    def synapses_per_hicann(self) -> int:
        return self.arrays_per_hicann * self.driven_rows_per_array * self.columns_per_array

    @property
    def buses_per_hicann(self) -> int:
        return self.bus_groups * self.lanes_per_group

    @property
    def repeaters_per_block(self) -> int:
        return self.buses_per_hicann // self.repeater_blocks_per_hicann

    @property
    def fg_cells_per_hicann(self) -> int:
        return self.fg_blocks_per_hicann * self.fg_rows * self.fg_columns

    @property
    def switches_per_hicann(self) -> int:
        per_pair = self.lanes_per_group * (self.lanes_per_group // self.crossbar_lane_modulus)
        n_pairs = self.bus_groups * (self.bus_groups - 1) // 2
        crossbar = n_pairs * per_pair
        select = self.arrays_per_hicann * self.drivers_per_array * self.select_fanin
        return crossbar + select

    @property
    def neuron_blocks_per_hicann(self) -> int:
        return self.neurons_per_hicann // self.neuron_block_size

    def units_per_hicann(self, kind: Kind) -> int:
        table = {
            Kind.HICANN: 1,
            Kind.JTAG_LINK: 1,
            Kind.HIGHSPEED_LINK: 1,
            Kind.NEURON: self.neurons_per_hicann,
            Kind.SYNAPSE_ARRAY: self.arrays_per_hicann,
            Kind.SYNAPSE_ROW: self.arrays_per_hicann * self.rows_per_array,
            Kind.SYNAPSE_DRIVER: self.arrays_per_hicann * self.drivers_per_array,
            Kind.SYNAPSE: self.synapses_per_hicann,
            Kind.FG_BLOCK: self.fg_blocks_per_hicann,
            Kind.EXT_MERGER: self.ext_mergers_per_hicann,
            Kind.BG_GEN: self.bg_gens_per_hicann,
            Kind.MERGER: self.mergers_per_hicann,
            Kind.ANALOG_OUT: self.analog_outs_per_hicann,
            Kind.BUS: self.buses_per_hicann,
            Kind.REPEATER: self.buses_per_hicann,
            Kind.REPEATER_BLOCK: self.repeater_blocks_per_hicann,
            Kind.SWITCH: self.switches_per_hicann,
        }
        if kind not in table:
            raise ValueError(f"no per-hicann unit count for {kind}")
        return table[kind]

    # ---- grid ------------------------------------------------------------
    @property
    def grid_width(self) -> int:
        return max(self.reticle_rows) * self.reticle_shape[0]

    @property
    def grid_height(self) -> int:
        return len(self.reticle_rows) * self.reticle_shape[1]

    def hicann_xy(self, h: int) -> tuple[int, int]:
        """Grid position of a hicann (x to the east, y to the south)."""
        return _grid(self).xy[h]

    def hicann_at(self, x: int, y: int) -> int | None:
        return _grid(self).by_xy.get((x, y))

    def neighbor(self, h: int, direction: Direction) -> int | None:
        x, y = self.hicann_xy(h)
        dx, dy = direction.dxdy
        return self.hicann_at(x + dx, y + dy)

    def neighbors(self, h: int) -> dict[Direction, int]:
        out = {}
        for d in Direction:
            n = self.neighbor(h, d)
            if n is not None:
                out[d] = n
        return out

    def row_widths(self) -> list[int]:
        widths = [0] * self.grid_height
        for x, y in _grid(self).xy:
            widths[y] += 1
        return widths

    def no_highspeed_hicanns(self) -> tuple[int, ...]:
        return tuple(h for h in range(self.n_hicanns)
                     if h // self.group_size in self.no_highspeed_groups)

    # ---- fabric ----------------------------------------------------------
    def bus_direction(self, b: int) -> Direction:
        return Direction(b // self.lanes_per_group)

    def bus_lane(self, b: int) -> int:
        return b % self.lanes_per_group

    def repeater_block_of(self, r: int) -> int:
        return r // self.repeaters_per_block

    def bus_partner(self, h: int, b: int) -> tuple[int, int] | None:
        """Bus on the neighboring hicann that repeater ``b`` of ``h`` drives."""
        d = self.bus_direction(b)
        n = self.neighbor(h, d)
        if n is None:
            return None
        return n, d.opposite * self.lanes_per_group + self.bus_lane(b)

    def crossbar_partners(self, b: int) -> list[int]:
        """Buses of other groups reachable from ``b`` through one switch."""
        lane, grp = self.bus_lane(b), b // self.lanes_per_group
        m = self.crossbar_lane_modulus
        out = []
        for g in range(self.bus_groups):
            if g == grp:
                continue
            out.extend(g * self.lanes_per_group + l
                       for l in range(lane % m, self.lanes_per_group, m))
        return out

    def select_buses(self, driver_flat: int) -> list[int]:
        """Buses a synapse driver (flat index ``a*drivers + d``) can listen to."""
        n = self.buses_per_hicann
        return [(7 * driver_flat + 13 * t) % n for t in range(self.select_fanin)]

    def drivers_on_bus(self, b: int) -> list[int]:
        """Flat driver indices selectable from bus ``b`` (inverse of select_buses)."""
        return _fabric(self).drivers_by_bus[b]

    def crossbar_switch(self, b1: int, b2: int) -> int | None:
        return _fabric(self).switch_ids.get((min(b1, b2), max(b1, b2)))

    def select_switch(self, b: int, driver_flat: int) -> int | None:
        return _fabric(self).switch_ids.get((b, "d", driver_flat))

    def injection_bus(self, channel: int) -> int:
        return (self.buses_per_hicann // self.ext_mergers_per_hicann) * channel

    def injection_buses(self, channel: int) -> tuple[int, int]:
        """Primary and fallback buses a sending channel can drive."""
        primary = self.injection_bus(channel)
        half = self.bus_groups // 2 * self.lanes_per_group
        return primary, (primary + half) % self.buses_per_hicann

    def channel_of_neuron(self, n: int) -> int:
        return n // self.neuron_block_size

    def leaf_merger(self, channel: int) -> int:
        return channel

    # ---- memory ----------------------------------------------------------
    def memory_map(self) -> dict[str, int]:
        """Per-hicann digital memory regions and their size in bytes."""
        return {
            "synapse_array": self.synapses_per_hicann,  # 1 byte: 4-bit weight + 4-bit decoder
            "repeater_sram": self.buses_per_hicann * 2,
            "switch_config": -(-self.switches_per_hicann // 8),
            "driver_config": self.arrays_per_hicann * self.drivers_per_array * 4,
            "merger_config": self.mergers_per_hicann * 2,
            "bg_config": self.bg_gens_per_hicann * 4,
            "ext_merger_config": self.ext_mergers_per_hicann * 2,
            "fg_controller_sram": self.fg_blocks_per_hicann * 256,
            "analog_out_config": self.analog_outs_per_hicann * 2,
            "neuron_builder_sram": self.neurons_per_hicann * 2,
        }

    def routing_regions(self) -> tuple[str, ...]:
        """Regions covered by the reduced test on route-through-only hicanns."""
        return ("repeater_sram", "switch_config")

    # ---- serialization ----------------------------------------------------
    def to_json(self) -> dict:
        from dataclasses import asdict

        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "TopologyConfig":
        kwargs = dict(data)
        for k in ("reticle_rows", "reticle_shape", "no_highspeed_groups", "edge_hicanns"):
            if k in kwargs and kwargs[k] is not None:
                kwargs[k] = tuple(kwargs[k])
        return cls(**kwargs)

    def with_overrides(self, **kwargs) -> "TopologyConfig":
        return replace(self, **kwargs)


class _Grid:
    """Precomputed hicann grid: reticles laid out row-major and centered."""

    def __init__(self, cfg: TopologyConfig):
        rw, rh = cfg.reticle_shape
        max_cols = max(cfg.reticle_rows)
        self.height = len(cfg.reticle_rows) * rh
        self.xy: list[tuple[int, int]] = []
        for ry, ncols in enumerate(cfg.reticle_rows):
            offset = (max_cols - ncols) // 2
            for rx in range(offset, offset + ncols):
                for local in range(rw * rh):
                    lx, ly = local % rw, local // rw
                    self.xy.append((rx * rw + lx, ry * rh + ly))
        self.by_xy = {xy: h for h, xy in enumerate(self.xy)}


class _Fabric:
    """Precomputed switch pattern (identical on every hicann)."""

    def __init__(self, cfg: TopologyConfig):
        pairs: list[tuple] = []
        n = cfg.buses_per_hicann
        for b1 in range(n):
            for b2 in cfg.crossbar_partners(b1):
                if b2 > b1:
                    pairs.append((b1, b2))
        pairs.sort()
        n_drivers = cfg.arrays_per_hicann * cfg.drivers_per_array
        select = sorted((b, "d", d) for d in range(n_drivers) for b in set(cfg.select_buses(d)))
        self.switch_ids: dict[tuple, int] = {}
        for i, p in enumerate(pairs + select):
            self.switch_ids[p] = i
        assert len(self.switch_ids) == cfg.switches_per_hicann
        self.drivers_by_bus: list[list[int]] = [[] for _ in range(n)]
        for d in range(n_drivers):
            for b in sorted(set(cfg.select_buses(d))):
                self.drivers_by_bus[b].append(d)


@lru_cache(maxsize=8)
def _grid_cached(key: tuple) -> _Grid:
    return _Grid(TopologyConfig(reticle_rows=key[0], reticle_shape=key[1],
                                group_size=key[2], edge_hicanns=()))


def _grid(cfg: TopologyConfig) -> _Grid:
    return _grid_cached((cfg.reticle_rows, cfg.reticle_shape, cfg.group_size))


@lru_cache(maxsize=8)
def _fabric_cached(key: tuple) -> _Fabric:
    return _Fabric(TopologyConfig(bus_groups=key[0], lanes_per_group=key[1],
                                  crossbar_lane_modulus=key[2], select_fanin=key[3],
                                  arrays_per_hicann=key[4], rows_per_array=key[5],
                                  driven_rows_per_array=key[6], edge_hicanns=()))


def _fabric(cfg: TopologyConfig) -> _Fabric:
    return _fabric_cached((cfg.bus_groups, cfg.lanes_per_group, cfg.crossbar_lane_modulus,
                           cfg.select_fanin, cfg.arrays_per_hicann, cfg.rows_per_array,
                           cfg.driven_rows_per_array))


def hicann_group(cfg: TopologyConfig, h: int) -> int:
    """Group (reticle) index of a hicann."""
    if not 0 <= h < cfg.n_hicanns:
        raise ValueError(f"hicann index {h} out of range")
    return h // cfg.group_size


def group_members(cfg: TopologyConfig, g: int) -> tuple[int, ...]:
    if not 0 <= g < cfg.n_groups:
        raise ValueError(f"group index {g} out of range")
    return tuple(range(g * cfg.group_size, (g + 1) * cfg.group_size))


def resource_count(cfg: TopologyConfig, kind: Kind, subset_size: int) -> int:
    """Number of ``kind`` resources on ``subset_size`` hicanns.

    ``HICANN`` counts the subset itself; ``HICANN_GROUP`` counts whole groups
    contained in it. Everything else is per-hicann units times subset size.
    """
    if subset_size < 0:
        raise ValueError("subset_size must be non-negative")
    if kind is Kind.HICANN:
        return subset_size
    if kind is Kind.HICANN_GROUP:
        return subset_size // cfg.group_size
    return cfg.units_per_hicann(kind) * subset_size


def validate_coord(cfg: TopologyConfig, coord: Coord) -> None:
    """Raise ValueError if the coordinate is outside the configured ranges."""
    k, idx = coord.kind, coord.indices
    bounds = {
        Kind.HICANN: (cfg.n_hicanns,),
        Kind.HICANN_GROUP: (cfg.n_groups,),
        Kind.JTAG_LINK: (cfg.n_hicanns,),
        Kind.HIGHSPEED_LINK: (cfg.n_hicanns,),
        Kind.NEURON: (cfg.n_hicanns, cfg.neurons_per_hicann),
        Kind.SYNAPSE_ARRAY: (cfg.n_hicanns, cfg.arrays_per_hicann),
        Kind.SYNAPSE_ROW: (cfg.n_hicanns, cfg.arrays_per_hicann, cfg.rows_per_array),
        Kind.SYNAPSE_DRIVER: (cfg.n_hicanns, cfg.arrays_per_hicann, cfg.drivers_per_array),
        Kind.SYNAPSE: (cfg.n_hicanns, cfg.arrays_per_hicann,
                       cfg.driven_rows_per_array, cfg.columns_per_array),
        Kind.FG_BLOCK: (cfg.n_hicanns, cfg.fg_blocks_per_hicann),
        Kind.EXT_MERGER: (cfg.n_hicanns, cfg.ext_mergers_per_hicann),
        Kind.BG_GEN: (cfg.n_hicanns, cfg.bg_gens_per_hicann),
        Kind.MERGER: (cfg.n_hicanns, cfg.mergers_per_hicann),
        Kind.ANALOG_OUT: (cfg.n_hicanns, cfg.analog_outs_per_hicann),
        Kind.BUS: (cfg.n_hicanns, cfg.buses_per_hicann),
        Kind.REPEATER: (cfg.n_hicanns, cfg.buses_per_hicann),
        Kind.REPEATER_BLOCK: (cfg.n_hicanns, cfg.repeater_blocks_per_hicann),
        Kind.SWITCH: (cfg.n_hicanns, cfg.switches_per_hicann),
    }[k]
    if len(idx) != len(bounds):
        raise ValueError(f"{coord}: expected {len(bounds)} indices")
    for i, (v, b) in enumerate(zip(idx, bounds)):
        if not 0 <= v < b:
            raise ValueError(f"{coord}: index {i} out of range (0..{b - 1})")
