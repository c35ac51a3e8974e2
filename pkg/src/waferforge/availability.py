"""Availability database: per-component usable/excluded flags.

Exclusions are stored sparsely as sets of coordinates per resource kind and
grouped into named states. The two canonical states are "individual" (what
the tests discovered, one flag per failing component) and "effective" (the
dependency closure over the individual state). Flags are hierarchical in
interpretation but flat in storage: excluding a HICANN does not
automatically flag each of its children; closure rules decide which child
flags get cleared, and reports decide which HICANNs' children are counted.
"""

from __future__ import annotations

import json

from .topology import Coord, Kind, TopologyConfig

SCHEMA = "waferforge.availability/1"


class AvailabilityState:
    """One named snapshot of per-coordinate exclusions."""

    def __init__(self, excluded=None):
        self._excluded: dict[Kind, set[Coord]] = {}
        if excluded:
            for coord in excluded:
                self.exclude(coord)

    def exclude(self, coord: Coord) -> None:
        self._excluded.setdefault(coord.kind, set()).add(coord)

    def exclude_many(self, coords) -> None:
        for coord in coords:
            self.exclude(coord)

    def is_usable(self, coord: Coord) -> bool:
        return coord not in self._excluded.get(coord.kind, ())

    def excluded_of(self, kind: Kind) -> set[Coord]:
        return set(self._excluded.get(kind, ()))

    def count_excluded(self, kind: Kind) -> int:
        return len(self._excluded.get(kind, ()))

    def kinds(self) -> list[Kind]:
        return [k for k in Kind if self._excluded.get(k)]

    def all_excluded(self) -> list[Coord]:
        out = []
        for k in Kind:
            out.extend(sorted(self._excluded.get(k, ()), key=Coord.sort_key))
        return out

    def copy(self) -> "AvailabilityState":
        new = AvailabilityState()
        new._excluded = {k: set(v) for k, v in self._excluded.items() if v}
        return new

    def issuperset(self, other: "AvailabilityState") -> bool:
        return all(self._excluded.get(k, set()) >= v
                   for k, v in other._excluded.items())

    def __eq__(self, other) -> bool:
        if not isinstance(other, AvailabilityState):
            return NotImplemented
        ks = set(self._excluded) | set(other._excluded)
        return all(self._excluded.get(k, set()) == other._excluded.get(k, set())
                   for k in ks)

    def __len__(self) -> int:
        return sum(len(v) for v in self._excluded.values())

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "excluded": {k.value: [list(c.indices) for c in
                                   sorted(v, key=Coord.sort_key)]
                         for k, v in sorted(self._excluded.items(),
                                            key=lambda kv: kv[0].value) if v},
        }

    @classmethod
    def from_json(cls, data: dict) -> "AvailabilityState":
        if data.get("schema", SCHEMA).split("/")[0] != SCHEMA.split("/")[0]:
            raise ValueError(f"unexpected schema {data.get('schema')!r}")
        state = cls()
        for kind_value, coords in data.get("excluded", {}).items():
            kind = Kind(kind_value)
            for indices in coords:
                state.exclude(Coord(kind, tuple(indices)))
        return state


class AvailabilityDb:
    """Named availability states of one wafer."""

    def __init__(self, topology: TopologyConfig):
        self.topology = topology
        self._states: dict[str, AvailabilityState] = {}

    def names(self) -> list[str]:
        return sorted(self._states)

    def has_state(self, name: str) -> bool:
        return name in self._states

    def state(self, name: str) -> AvailabilityState:
        if name not in self._states:
            raise KeyError(f"unknown availability state {name!r}")
        return self._states[name]

    def ensure(self, name: str) -> AvailabilityState:
        return self._states.setdefault(name, AvailabilityState())

    def set_state(self, name: str, state: AvailabilityState) -> None:
        self._states[name] = state

    def diff(self, a: str, b: str) -> list[tuple[Coord, bool, bool]]:
        """All coords excluded in either state, with per-state usability."""
        sa, sb = self.state(a), self.state(b)
        coords = set(sa.all_excluded()) | set(sb.all_excluded())
        return [(c, sa.is_usable(c), sb.is_usable(c))
                for c in sorted(coords, key=Coord.sort_key)]

    def write_diff_csv(self, path, a: str = "individual",
                       b: str = "effective") -> None:
        rows = self.diff(a, b)
        with open(path, "w") as f:
            f.write(f"coord,kind,usable_{a},usable_{b}\n")
            for coord, ua, ub in rows:
                idx = ":".join(str(i) for i in coord.indices)
                f.write(f"{idx},{coord.kind.value},{int(ua)},{int(ub)}\n")


def save_state(db: AvailabilityDb, name: str, path) -> None:
    data = db.state(name).to_json()
    data["name"] = name
    with open(path, "w") as f:
        json.dump(data, f, indent=1, sort_keys=True)
        f.write("\n")


def load_state(db: AvailabilityDb, name: str, path) -> AvailabilityState:
    with open(path) as f:
        data = json.load(f)
    state = AvailabilityState.from_json(data)
    db.set_state(name, state)
    return state
