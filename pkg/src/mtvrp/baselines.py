"""Attribute-aware insertion heuristics and an exact solver for tiny instances."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .core import TOL, Instance, Solution, build_distance_matrix, solution_cost, validate_solution
from .env import DeadEndError, Env, EnvOptions

BRUTE_FORCE_MAX_N = 9


class InfeasibleInstance(ValueError):
    pass


def route_feasible(env: Env, route: Sequence[int]) -> bool:
    """Step the environment along one route; False as soon as a masked node is chosen."""
    state = env.initial()
    for v in route:
        try:
            mask = env.feasible_mask(state)
        except DeadEndError:
            return False
        if mask.masked[v]:
            return False
        state = env.step(state, v, check=False)
    return True


def _insertion(instance: Instance, selector: str, options: EnvOptions = EnvOptions()) -> tuple[Solution, float]:
    env = Env(instance, options)
    dist = env.dist
    open_ = instance.attrs.open_active
    unrouted = set(range(1, instance.n + 1))
    routes: list[list[int]] = []
    # distance from each unrouted customer to the partial solution (depot included)
    near = dist[0].copy()
    pick = np.argmin if selector == "nearest" else np.argmax

    def choose(cands: list[int], key: np.ndarray) -> int:
        vals = key[cands]
        return cands[int(pick(vals))]

    def open_route():
        cands = sorted(unrouted)
        seed = choose(cands, dist[0])
        if not route_feasible(env, [seed]):
            raise InfeasibleInstance(f"customer {seed} has no feasible singleton route")
        routes.append([seed])
        unrouted.discard(seed)
        np.minimum(near, dist[seed], out=near)

    open_route()
    while unrouted:
        cands = sorted(unrouted)
        c = choose(cands, near)
        best = None
        for r, route in enumerate(routes):
            for p in range(len(route) + 1):
                prev = route[p - 1] if p else 0
                if p < len(route):
                    nxt = route[p]
                    delta = dist[prev, c] + dist[c, nxt] - dist[prev, nxt]
                elif open_:
                    delta = dist[prev, c]
                else:
                    delta = dist[prev, c] + dist[c, 0] - dist[prev, 0]
                if best is not None and delta >= best[0]:
                    continue
                if route_feasible(env, route[:p] + [c] + route[p:]):
                    best = (delta, r, p)
        if best is None:
            open_route()
            continue
        _, r, p = best
        routes[r].insert(p, c)
        unrouted.discard(c)
        np.minimum(near, dist[c], out=near)
    sol = Solution(routes, instance.name)
    return sol, solution_cost(sol, instance, dist)


def nearest_insertion(instance: Instance, options: EnvOptions = EnvOptions()) -> tuple[Solution, float]:
    return _insertion(instance, "nearest", options)


def farthest_insertion(instance: Instance, options: EnvOptions = EnvOptions()) -> tuple[Solution, float]:
    return _insertion(instance, "farthest", options)


def brute_force(instance: Instance) -> tuple[Solution, float]:
    """Exact optimum over all ordered partitions of the customers into routes.

    Routes are enumerated per customer subset with a label-setting search that
    keeps every Pareto-optimal (length, time) path; the best partition is then
    found by dynamic programming over subsets.  Raises ``InfeasibleInstance``
    when no feasible solution exists.
    """
    n = instance.n
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force is limited to n <= {BRUTE_FORCE_MAX_N}, got n={n}")
    a = instance.attrs
    dist = build_distance_matrix(instance)
    d = dist.tolist()
    dem = instance.demands.tolist()
    tw = a.tw_active
    if tw:
        e, l, s = instance.tw_early.tolist(), instance.tw_late.tolist(), instance.service.tolist()
        T, vinv = instance.depot_horizon, 1.0 / instance.speed
    L = instance.duration_limit if a.limit_active else math.inf
    closed = not a.open_active

    full = 1 << n
    load = [1.0] * full
    for S in range(1, full):
        low = (S & -S).bit_length()
        load[S] = load[S & (S - 1)] - dem[low]
    # labels[S][j] -> list of (length, time, path)
    labels: list[dict] = [dict() for _ in range(full)]

    def add(S, j, length, time, path):
        bucket = labels[S].setdefault(j, [])
        for lab in bucket:
            if lab[0] <= length and lab[1] <= time:
                return
        bucket[:] = [lab for lab in bucket if not (length <= lab[0] and time <= lab[1])]
        bucket.append((length, time, path))

    def extend(length, time, i, k):
        leg = d[i][k]
        length += leg
        if length + (d[k][0] if closed else 0.0) > L + TOL:
            return None
        if tw:
            start = max(time + leg * vinv, e[k])
            if start > l[k] + TOL:
                return None
            time = start + s[k]
        return length, time

    for k in range(1, n + 1):
        S = 1 << (k - 1)
        if load[S] < -TOL:
            continue
        r = extend(0.0, 0.0, 0, k)
        if r is not None:
            add(S, k, r[0], r[1], (k,))
    order = sorted(range(1, full), key=lambda S: bin(S).count("1"))
    route_cost = [math.inf] * full
    route_path: list = [None] * full
    for S in order:
        for j, bucket in labels[S].items():
            for length, time, path in bucket:
                cost = length
                if closed:
                    back = d[j][0]
                    if tw and time + back * vinv > T + TOL:
                        continue
                    cost = length + back
                    if cost > L + TOL:
                        continue
                if cost < route_cost[S]:
                    route_cost[S], route_path[S] = cost, path
                for k in range(1, n + 1):
                    bit = 1 << (k - 1)
                    if S & bit or load[S | bit] < -TOL:
                        continue
                    r = extend(length, time, j, k)
                    if r is not None:
                        add(S | bit, k, r[0], r[1], path + (k,))
    best = [math.inf] * full
    choice = [0] * full
    best[0] = 0.0
    for S in range(1, full):
        low = S & -S
        rest = S ^ low
        sub = rest
        while True:
            T_ = sub | low
            c = route_cost[T_] + best[S ^ T_]
            if c < best[S]:
                best[S], choice[S] = c, T_
            if sub == 0:
                break
            sub = (sub - 1) & rest
    if math.isinf(best[full - 1]):
        raise InfeasibleInstance("no feasible solution exists")
    routes = []
    S = full - 1
    while S:
        routes.append(list(route_path[choice[S]]))
        S ^= choice[S]
    sol = Solution(routes, instance.name)
    bad = validate_solution(sol, instance, dist)
    if bad is not None:
        raise AssertionError(f"brute force produced an infeasible solution: {bad}")
    return sol, solution_cost(sol, instance, dist)
