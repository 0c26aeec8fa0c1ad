"""Attribute-composition environment for a single rollout.

Each active attribute contributes an update of its entry in the attribute
vector ``(c_t, t_t, l_t, o_t)`` and a set of nodes it forbids next; the
feasibility mask is the union of the visited set and those per-attribute sets.
This is the exact 64-bit reference; ``mtvrp.batched`` mirrors it on tensors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import TOL, Instance, Solution, Violation, build_distance_matrix, solution_cost

REASONS = ("visited", "capacity", "tw", "limit", "depot")


class MaskedNodeError(RuntimeError):
    def __init__(self, node: int, step: int, reasons: Sequence[str]):
        super().__init__(f"node {node} is masked at step {step} ({', '.join(reasons) or 'unknown'})")
        self.node = node
        self.step = step
        self.reasons = tuple(reasons)


class DeadEndError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvOptions:
    # include the return leg when masking on the duration limit of closed routes
    limit_lookahead: bool = True


@dataclass(frozen=True)
class RolloutState:
    visited: frozenset
    current: int
    remaining_capacity: float
    current_time: float
    route_length: float
    open_flag: int
    step: int
    done: bool
    cost: float = 0.0
    sequence: tuple = ()


@dataclass(frozen=True)
class MaskVector:
    masked: np.ndarray                 # (n+1,) bool
    reasons: dict = field(default_factory=dict)   # node -> tuple of reason codes

    def unmasked(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~self.masked)]


class Env:
    """Binds an instance (and its distance matrix) to the pure state operations."""

    def __init__(self, instance: Instance, options: EnvOptions = EnvOptions(), dist: Optional[np.ndarray] = None):
        self.instance = instance
        self.options = options
        self.dist = build_distance_matrix(instance) if dist is None else dist

    def initial(self) -> RolloutState:
        return RolloutState(frozenset(), 0, 1.0, 0.0, 0.0, int(self.instance.attrs.open_active), 0, False)

    def reset(self, start_node: int) -> RolloutState:
        if not 1 <= start_node <= self.instance.n:
            raise ValueError(f"start node {start_node} out of range")
        return self.step(self.initial(), start_node)

    def attribute_vector(self, state: RolloutState) -> np.ndarray:
        a = self.instance.attrs
        return np.array([
            state.remaining_capacity,
            state.current_time if a.tw_active else 0.0,
            state.route_length if a.limit_active else 0.0,
            float(state.open_flag),
        ])

    def attribute_masks(self, state: RolloutState) -> dict[str, np.ndarray]:
        inst, a, dist = self.instance, self.instance.attrs, self.dist
        cur = state.current
        leg = dist[cur]
        masks: dict[str, np.ndarray] = {}
        masks["capacity"] = state.remaining_capacity - inst.demands < -TOL
        if a.tw_active:
            arrive = np.maximum(state.current_time + leg / inst.speed, inst.tw_early)
            m = arrive > inst.tw_late + TOL
            if not a.open_active:
                m |= arrive + inst.service + dist[:, 0] / inst.speed > inst.depot_horizon + TOL
            masks["tw"] = m
        if a.limit_active:
            total = state.route_length + leg
            if not a.open_active and self.options.limit_lookahead:
                total = total + dist[:, 0]
            masks["limit"] = total > inst.duration_limit + TOL
        for m in masks.values():
            m[0] = False
        return masks

    def feasible_mask(self, state: RolloutState) -> MaskVector:
        n = self.instance.n
        masked = np.zeros(n + 1, dtype=bool)
        reasons: dict[int, list] = {}
        for v in state.visited:
            masked[v] = True
            reasons.setdefault(v, []).append("visited")
        for name, m in self.attribute_masks(state).items():
            masked |= m
            for v in np.flatnonzero(m):
                reasons.setdefault(int(v), []).append(name)
        if state.done:
            masked[:] = True
            masked[0] = False
        elif state.current == 0:
            masked[0] = True
            reasons.setdefault(0, []).append("depot")
            if masked.all():
                raise DeadEndError(f"no feasible customer from the depot at step {state.step}")
        else:
            masked[0] = False
        return MaskVector(masked, {k: tuple(v) for k, v in reasons.items()})

    def step(self, state: RolloutState, node: int, check: bool = True) -> RolloutState:
        inst = self.instance
        if state.done:
            raise RuntimeError("rollout already finished")
        if check:
            mask = self.feasible_mask(state)
            if mask.masked[node]:
                raise MaskedNodeError(node, state.step, mask.reasons.get(node, ()))
        leg = self.dist[state.current, node]
        if node == 0:
            cost = state.cost + (0.0 if inst.attrs.open_active else leg)
            nxt = replace(state, current=0, remaining_capacity=1.0, current_time=0.0, route_length=0.0,
                          step=state.step + 1, cost=cost, sequence=state.sequence + (0,))
            return replace(nxt, done=len(state.visited) == inst.n)
        time = state.current_time
        if inst.attrs.tw_active:
            time = max(time + leg / inst.speed, inst.tw_early[node]) + inst.service[node]
        visited = state.visited | {node}
        done = len(visited) == inst.n and inst.attrs.open_active
        return replace(state, visited=visited, current=node,
                       remaining_capacity=state.remaining_capacity - inst.demands[node],
                       current_time=time, route_length=state.route_length + leg,
                       step=state.step + 1, done=done, cost=state.cost + leg,
                       sequence=state.sequence + (node,))

    def state_violations(self, state: RolloutState) -> list[str]:
        """Constraints broken by a state reached through ``step``."""
        inst, a = self.instance, self.instance.attrs
        out = []
        cur = state.current
        if state.remaining_capacity < -TOL:
            out.append("capacity")
        if a.tw_active and cur != 0:
            if state.current_time - inst.service[cur] > inst.tw_late[cur] + TOL:
                out.append("time_window")
            if not a.open_active and state.current_time + self.dist[cur, 0] / inst.speed > inst.depot_horizon + TOL:
                out.append("depot_return")
        if a.limit_active:
            total = state.route_length + (0.0 if a.open_active else self.dist[cur, 0])
            if total > inst.duration_limit + TOL:
                out.append("duration_limit")
        return out


@dataclass(frozen=True)
class ReplayResult:
    solution: Optional[Solution]
    cost: Optional[float]
    violation: Optional[Violation]
    step: Optional[int] = None

    @property
    def feasible(self) -> bool:
        return self.violation is None


_REASON_KIND = {"visited": "structure", "depot": "structure", "capacity": "capacity",
                "tw": "time_window", "limit": "duration_limit"}


def replay(instance: Instance, node_sequence: Sequence[int], options: EnvOptions = EnvOptions(),
           dist: Optional[np.ndarray] = None) -> ReplayResult:
    """Step the environment through ``node_sequence`` (implicit leading depot)."""
    env = Env(instance, options, dist)
    seq = [int(v) for v in node_sequence]
    n = instance.n
    state = env.initial()
    route, pos = 0, 0
    for k, node in enumerate(seq):
        if not 0 <= node <= n:
            return ReplayResult(None, None, Violation("structure", route, pos, node, f"node out of range 0..{n}"), k)
        if state.done:
            return ReplayResult(None, None, Violation("structure", route, pos, node, "steps after completion"), k)
        try:
            mask = env.feasible_mask(state)
        except DeadEndError as exc:
            return ReplayResult(None, None, Violation("structure", route, pos, node, str(exc)), k)
        if mask.masked[node]:
            reasons = mask.reasons.get(node, ())
            kind = _REASON_KIND.get(reasons[0], "structure") if reasons else "structure"
            return ReplayResult(None, None, Violation(kind, route, pos, node, ",".join(reasons)), k)
        state = env.step(state, node, check=False)
        if node == 0:
            route, pos = route + 1, 0
        else:
            pos += 1
    if not state.done:
        if len(state.visited) < n:
            missing = sorted(set(range(1, n + 1)) - set(state.visited))
            return ReplayResult(None, None, Violation("structure", route, pos, missing[0],
                                                      f"customers not visited: {missing}"), len(seq))
        # closed route that never returned to the depot: check the closing leg
        mask = env.feasible_mask(state)
        if mask.masked[0]:
            return ReplayResult(None, None, Violation("structure", route, pos, 0, "cannot return"), len(seq))
        state = env.step(state, 0, check=False)
    sol = Solution.from_sequence(state.sequence, instance.name)
    return ReplayResult(sol, solution_cost(sol, instance, env.dist), None)


def rollout(env: Env, start: int, choose) -> RolloutState:
    """Run ``choose(state, mask) -> node`` until done; returns the final state."""
    state = env.reset(start)
    while not state.done:
        mask = env.feasible_mask(state)
        state = env.step(state, choose(state, mask), check=False)
    return state
