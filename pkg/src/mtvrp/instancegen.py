"""Seeded instance generation for every attribute combination.

Each random field draws from its own counter-based (Philox) substream keyed by
``(seed, stream)``, so turning an attribute on never shifts the draws of
another attribute.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import AttributeSet, Instance, build_distance_matrix, singleton_solution, validate_solution

STREAMS = {"coords": 1, "demands": 2, "tw": 3, "backhaul": 4, "resample": 5, "tasks": 6, "eval": 7}

MAX_RESAMPLES = 100


def substream(seed: int, stream: str, *extra: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, STREAMS[stream], *extra]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def default_capacity(n: int) -> int:
    """C=40 at n=50 and C=50 at n=100; linear (and rounded) elsewhere."""
    c = 40 + (n - 50) * (50 - 40) / 50
    return max(9, int(math.floor(c + 0.5)))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class GenConfig:
    n: int = 20
    capacity_raw: Optional[int] = None
    backhaul_ratio: float = 0.2
    duration_limit: float = 3.0
    tw_T: float = 4.6
    tw_speed: float = 1.0
    service_range: tuple[float, float] = (0.15, 0.2)
    tw_width_range: tuple[float, float] = (0.15, 0.2)
    resample_infeasible: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.capacity is not None and self.capacity < 9:
            raise ValueError("capacity_raw must be >= 9 so single demands fit")
        if not 0 <= self.backhaul_ratio <= 1:
            raise ValueError("backhaul_ratio must be in [0, 1]")
        for lo, hi in (self.service_range, self.tw_width_range):
            if lo > hi:
                raise ValueError("interval low exceeds high")

    @property
    def capacity(self) -> int:
        return self.capacity_raw if self.capacity_raw is not None else default_capacity(self.n)

    def with_seed(self, seed: int) -> "GenConfig":
        return replace(self, seed=seed)


def gen_base(config: GenConfig) -> Instance:
    n = config.n
    coords = substream(config.seed, "coords").random((n + 1, 2))
    raw = substream(config.seed, "demands").integers(1, 10, size=n)
    demands = np.concatenate([[0.0], raw / config.capacity])
    return Instance(coords=coords, demands=demands, attrs=AttributeSet(), seed=config.seed)


def add_time_windows(instance: Instance, config: GenConfig, seed: Optional[int] = None) -> Instance:
    seed = config.seed if seed is None else seed
    rng = substream(seed, "tw")
    T, v = config.tw_T, config.tw_speed
    n = instance.n
    coords = instance.coords.copy()
    s = rng.uniform(*config.service_range, size=n)
    width = rng.uniform(*config.tw_width_range, size=n)
    u = rng.random(n)
    c0 = np.sqrt(((coords[1:] - coords[0]) ** 2).sum(axis=1))
    hi = (T - s - width) / np.maximum(c0, 1e-300) * v - 1
    bad = (hi < 1) | (c0 < 1e-12)
    if bad.any():
        if not config.resample_infeasible:
            raise ValueError(f"empty time-window interval for customers {np.flatnonzero(bad) + 1}")
        rs = substream(seed, "resample")
        for i in np.flatnonzero(bad):
            for _ in range(MAX_RESAMPLES):
                coords[i + 1] = rs.random(2)
                c0[i] = math.sqrt(((coords[i + 1] - coords[0]) ** 2).sum())
                hi[i] = (T - s[i] - width[i]) / max(c0[i], 1e-300) * v - 1
                if hi[i] >= 1 and c0[i] >= 1e-12:
                    break
            else:
                raise ValueError(f"customer {i + 1}: no reachable position after {MAX_RESAMPLES} resamples")
    h = 1 + u * (hi - 1)
    early = h * c0 / v
    # the sampled window must fit the horizon even after rounding
    early = np.minimum(early, T - s - width - c0 / v)
    early = np.maximum(early, c0 / v)
    late = early + width
    return instance.with_(
        coords=coords,
        attrs=replace(instance.attrs, tw_active=True),
        tw_early=np.concatenate([[0.0], early]),
        tw_late=np.concatenate([[T], late]),
        service=np.concatenate([[0.0], s]),
        depot_horizon=T,
        speed=v,
    )


def add_backhauls(instance: Instance, ratio: float, seed: int) -> Instance:
    n = instance.n
    k = round_half_up(ratio * n)
    if k < 1:
        raise ValueError(f"backhaul ratio {ratio} selects no customer for n={n}")
    k = min(k, n)
    chosen = substream(seed, "backhaul").choice(np.arange(1, n + 1), size=k, replace=False)
    demands = instance.demands.copy()
    demands[chosen] = -np.abs(demands[chosen])
    return instance.with_(demands=demands, attrs=replace(instance.attrs, backhaul_active=True))


def add_duration_limit(instance: Instance, L: float = 3.0) -> Instance:
    if not L > 0:
        raise ValueError("duration limit must be positive")
    return instance.with_(duration_limit=float(L), attrs=replace(instance.attrs, limit_active=True))


def set_open(instance: Instance) -> Instance:
    return instance.with_(attrs=replace(instance.attrs, open_active=True))


def gen_variant(variant_name: str, config: GenConfig, check: bool = True) -> Instance:
    attrs = AttributeSet.from_name(variant_name)
    inst = gen_base(config)
    if attrs.backhaul_active:
        inst = add_backhauls(inst, config.backhaul_ratio, config.seed)
    if attrs.tw_active:
        inst = add_time_windows(inst, config, config.seed)
    if attrs.limit_active:
        inst = add_duration_limit(inst, config.duration_limit)
    if attrs.open_active:
        inst = set_open(inst)
    inst = inst.with_(name=f"{attrs.name}-n{config.n}-s{config.seed}")
    if check:
        bad = validate_solution(singleton_solution(inst), inst, build_distance_matrix(inst))
        if bad is not None:
            raise ValueError(f"generated instance has no singleton-feasible solution: {bad}")
    return inst


def instance_seed(root_seed: int, *path: int) -> int:
    """Derive a 63-bit instance seed from a root seed and an index path."""
    ss = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFFFFFFFFFF, *path])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def gen_batch(variant_name: str, config: GenConfig, count: int, root_seed: int, *path: int) -> list[Instance]:
    return [gen_variant(variant_name, config.with_seed(instance_seed(root_seed, *path, i)))
            for i in range(count)]
