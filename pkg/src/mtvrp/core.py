"""Shared routing types, geometry, solution cost and feasibility checking.

Node 0 is always the depot, customers are 1..n. Demands, capacity and the
duration limit are stored normalized so that the vehicle capacity is 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

TOL = 1e-9

ATTR_ORDER = ("backhaul", "limit", "tw")


@dataclass(frozen=True)
class AttributeSet:
    tw_active: bool = False
    open_active: bool = False
    backhaul_active: bool = False
    limit_active: bool = False
    capacity_active: bool = True

    def __post_init__(self):
        if not self.capacity_active:
            raise ValueError("capacity is active for every variant")

    @property
    def name(self) -> str:
        suffix = ""
        if self.backhaul_active:
            suffix += "B"
        if self.limit_active:
            suffix += "L"
        if self.tw_active:
            suffix += "TW"
        if not suffix and not self.open_active:
            return "CVRP"
        return ("O" if self.open_active else "") + "VRP" + suffix

    @classmethod
    def from_name(cls, name: str) -> "AttributeSet":
        key = name.strip().upper()
        if key not in _BY_NAME:
            raise ValueError(f"unknown variant {name!r}")
        return _BY_NAME[key]

    def as_dict(self) -> dict:
        return {"tw": self.tw_active, "open": self.open_active,
                "backhaul": self.backhaul_active, "limit": self.limit_active}


def _all_attribute_sets() -> list[AttributeSet]:
    out = []
    for bits in range(16):
        out.append(AttributeSet(tw_active=bool(bits & 8), open_active=bool(bits & 1),
                                backhaul_active=bool(bits & 2), limit_active=bool(bits & 4)))
    return out


_BY_NAME = {a.name: a for a in _all_attribute_sets()}

# All 16 attribute combinations, ordered by number of extra attributes.
VARIANTS: tuple[str, ...] = tuple(
    a.name for a in sorted(_BY_NAME.values(),
                           key=lambda a: (a.open_active + a.backhaul_active + a.limit_active
                                          + a.tw_active, a.name)))

TRAIN_VARIANTS = ("CVRP", "VRPTW", "OVRP", "VRPB", "VRPL")
UNSEEN_VARIANTS = ("VRPBTW", "VRPBL", "OVRPL", "OVRPLTW", "OVRPBTW", "OVRPBLTW")
BENCHMARK_VARIANTS = TRAIN_VARIANTS + UNSEEN_VARIANTS


def euclidean_distance(a: Sequence[float], b: Sequence[float]) -> float:
    dx = float(a[0]) - float(b[0])
    dy = float(a[1]) - float(b[1])
    return math.sqrt(dx * dx + dy * dy)


@dataclass(frozen=True, eq=False)
class Instance:
    coords: np.ndarray               # (n+1, 2)
    demands: np.ndarray              # (n+1,), depot 0, negative = pickup
    attrs: AttributeSet = field(default_factory=AttributeSet)
    tw_early: Optional[np.ndarray] = None
    tw_late: Optional[np.ndarray] = None
    service: Optional[np.ndarray] = None
    capacity: float = 1.0
    duration_limit: Optional[float] = None
    depot_horizon: Optional[float] = None
    speed: float = 1.0
    name: str = ""
    seed: Optional[int] = None

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        demands = np.ascontiguousarray(self.demands, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 2:
            raise ValueError("coords must have shape (n+1, 2) with n >= 1")
        if demands.shape != (coords.shape[0],):
            raise ValueError("demands must have one entry per node")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "demands", demands)
        for name in ("tw_early", "tw_late", "service"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.ascontiguousarray(arr, dtype=np.float64)
                if arr.shape != demands.shape:
                    raise ValueError(f"{name} must have one entry per node")
                object.__setattr__(self, name, arr)
        for arr in (coords, demands):
            arr.setflags(write=False)
        for name in ("tw_early", "tw_late", "service"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)
        if self.attrs.tw_active and (self.tw_early is None or self.tw_late is None
                                     or self.service is None or self.depot_horizon is None):
            raise ValueError("time-window variant needs tw_early, tw_late, service and depot_horizon")
        if self.attrs.limit_active and (self.duration_limit is None or self.duration_limit <= 0):
            raise ValueError("duration limit must be positive")

    @property
    def n(self) -> int:
        return self.coords.shape[0] - 1

    @property
    def variant(self) -> str:
        return self.attrs.name

    def with_(self, **changes) -> "Instance":
        return replace(self, **changes)


def build_distance_matrix(instance: Instance) -> np.ndarray:
    xy = instance.coords
    diff = xy[:, None, :] - xy[None, :, :]
    dist = np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1])
    dist.setflags(write=False)
    return dist


def validate_instance(instance: Instance) -> list[str]:
    """Return a list of broken instance invariants (empty when valid)."""
    problems = []
    xy = instance.coords
    if not np.all(np.isfinite(xy)) or xy.min() < -TOL or xy.max() > 1 + TOL:
        problems.append("coordinates outside the unit square")
    d = instance.demands
    if d[0] != 0:
        problems.append("depot demand must be 0")
    if np.any(np.abs(d) > 1 + TOL):
        problems.append("demand magnitude exceeds capacity")
    a = instance.attrs
    if a.backhaul_active and not np.any(d[1:] < 0):
        problems.append("backhaul variant without a pickup customer")
    if not a.backhaul_active and np.any(d[1:] < 0):
        problems.append("pickup customer in a variant without backhauls")
    if a.tw_active:
        e, l, T = instance.tw_early, instance.tw_late, instance.depot_horizon
        c0 = build_distance_matrix(instance)[0] / instance.speed
        if np.any(e[1:] >= l[1:]) or np.any(l[1:] > T + TOL) or np.any(e[1:] < -TOL):
            problems.append("time windows must satisfy 0 <= e < l <= T")
        if np.any(e[1:] < c0[1:] - TOL):
            problems.append("customer window opens before it can be reached")
    return problems


@dataclass(frozen=True)
class Solution:
    routes: tuple[tuple[int, ...], ...]
    instance_id: str = ""

    def __init__(self, routes, instance_id: str = ""):
        object.__setattr__(self, "routes", tuple(tuple(int(v) for v in r) for r in routes))
        object.__setattr__(self, "instance_id", instance_id)

    def to_sequence(self, closed: bool) -> list[int]:
        """Flatten to the env action sequence (depot separators, no leading depot)."""
        seq: list[int] = []
        for k, route in enumerate(self.routes):
            if k:
                seq.append(0)
            seq.extend(route)
        if closed and seq:
            seq.append(0)
        return seq

    @classmethod
    def from_sequence(cls, seq: Sequence[int], instance_id: str = "") -> "Solution":
        routes, cur = [], []
        for v in seq:
            v = int(v)
            if v == 0:
                if cur:
                    routes.append(cur)
                cur = []
            else:
                cur.append(v)
        if cur:
            routes.append(cur)
        return cls(routes, instance_id)


def solution_cost(solution: Solution, instance: Instance, dist: Optional[np.ndarray] = None) -> float:
    if dist is None:
        dist = build_distance_matrix(instance)
    n = instance.n
    total = 0.0
    for route in solution.routes:
        prev = 0
        for v in route:
            if not 1 <= v <= n:
                raise IndexError(f"node {v} out of range 1..{n}")
            total += dist[prev, v]
            prev = v
        if not instance.attrs.open_active:
            total += dist[prev, 0]
    return float(total)


@dataclass(frozen=True)
class Violation:
    kind: str          # structure | capacity | time_window | depot_return | duration_limit
    route: int
    position: int      # index within the route; len(route) for route-closing checks
    node: int
    detail: str = ""

    def __str__(self):
        return f"{self.kind} violation at route {self.route} position {self.position} (node {self.node}): {self.detail}"


def validate_solution(solution: Solution, instance: Instance,
                      dist: Optional[np.ndarray] = None) -> Optional[Violation]:
    """Replay every route and return the first violated constraint, or None if feasible."""
    if dist is None:
        dist = build_distance_matrix(instance)
    a = instance.attrs
    n = instance.n
    seen = set()
    v_inv = 1.0 / instance.speed
    for r, route in enumerate(solution.routes):
        if not route:
            return Violation("structure", r, 0, 0, "empty route")
        load = 1.0
        time = 0.0
        length = 0.0
        prev = 0
        for p, v in enumerate(route):
            if not 1 <= v <= n:
                return Violation("structure", r, p, v, f"node out of range 1..{n}")
            if v in seen:
                return Violation("structure", r, p, v, "customer visited twice")
            seen.add(v)
            leg = dist[prev, v]
            load -= instance.demands[v]
            if load < -TOL:
                return Violation("capacity", r, p, v, f"remaining capacity {load:.6g} < 0")
            if a.tw_active:
                start = max(time + leg * v_inv, instance.tw_early[v])
                if start > instance.tw_late[v] + TOL:
                    return Violation("time_window", r, p, v,
                                     f"service starts at {start:.6g} after late time {instance.tw_late[v]:.6g}")
                time = start + instance.service[v]
            length += leg
            prev = v
        if not a.open_active:
            back = dist[prev, 0]
            length += back
            if a.tw_active and time + back * v_inv > instance.depot_horizon + TOL:
                return Violation("depot_return", r, len(route), prev,
                                 f"return at {time + back * v_inv:.6g} after horizon {instance.depot_horizon:.6g}")
        if a.limit_active and length > instance.duration_limit + TOL:
            return Violation("duration_limit", r, len(route), prev,
                             f"route length {length:.6g} exceeds limit {instance.duration_limit:.6g}")
    if len(seen) != n:
        missing = sorted(set(range(1, n + 1)) - seen)
        return Violation("structure", len(solution.routes), 0, missing[0], f"customers not visited: {missing}")
    return None


def singleton_solution(instance: Instance) -> Solution:
    return Solution([[i] for i in range(1, instance.n + 1)], instance.name)


# --- JSON (de)serialization ---------------------------------------------------

def _floats(arr) -> list:
    return [float(x) for x in np.asarray(arr).ravel()]


def instance_to_dict(instance: Instance) -> dict:
    a = instance.attrs
    out: dict = {
        "name": instance.name,
        "n": instance.n,
        "attrs": a.as_dict(),
        "coords": [[float(x), float(y)] for x, y in instance.coords],
        "demands": _floats(instance.demands),
    }
    if instance.tw_early is not None:
        out["tw_early"] = _floats(instance.tw_early)
        out["tw_late"] = _floats(instance.tw_late)
        out["service"] = _floats(instance.service)
    out["capacity"] = float(instance.capacity)
    if instance.duration_limit is not None:
        out["duration_limit"] = float(instance.duration_limit)
    if instance.depot_horizon is not None:
        out["depot_horizon"] = float(instance.depot_horizon)
    out["speed"] = float(instance.speed)
    out["seed"] = instance.seed
    return out


def instance_from_dict(data: dict) -> Instance:
    at = data.get("attrs", {})
    attrs = AttributeSet(tw_active=bool(at.get("tw", False)), open_active=bool(at.get("open", False)),
                         backhaul_active=bool(at.get("backhaul", False)), limit_active=bool(at.get("limit", False)))
    coords = np.asarray(data["coords"], dtype=np.float64)
    if "n" in data and int(data["n"]) != coords.shape[0] - 1:
        raise ValueError("field n does not match the number of coordinates")
    return Instance(
        coords=coords,
        demands=np.asarray(data["demands"], dtype=np.float64),
        attrs=attrs,
        tw_early=None if "tw_early" not in data else np.asarray(data["tw_early"]),
        tw_late=None if "tw_late" not in data else np.asarray(data["tw_late"]),
        service=None if "service" not in data else np.asarray(data["service"]),
        capacity=float(data.get("capacity", 1.0)),
        duration_limit=data.get("duration_limit"),
        depot_horizon=data.get("depot_horizon"),
        speed=float(data.get("speed", 1.0)),
        name=data.get("name", ""),
        seed=data.get("seed"),
    )


def dumps_instance(instance: Instance) -> str:
    return json.dumps(instance_to_dict(instance))


def loads_instance(text: str) -> Instance:
    return instance_from_dict(json.loads(text))


def save_instance(instance: Instance, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_instance(instance))
        fh.write("\n")


def load_instance(path) -> Instance:
    with open(path) as fh:
        return loads_instance(fh.read())
