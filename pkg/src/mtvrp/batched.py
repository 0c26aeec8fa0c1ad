"""Tensor version of the attribute-composition environment.

Mirrors :class:`mtvrp.env.Env` operation for operation in float64, over a
``(batch, pomo)`` grid of rollouts: ``batch`` instances of equal size, each
with ``pomo`` trajectories forced to start at distinct customers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import TOL, Instance, build_distance_matrix
from .env import DeadEndError, EnvOptions

DTYPE = torch.float64


@dataclass
class InstanceBatch:
    coords: torch.Tensor      # (B, N+1, 2)
    dist: torch.Tensor        # (B, N+1, N+1)
    demand: torch.Tensor      # (B, N+1)
    early: torch.Tensor       # (B, N+1)
    late: torch.Tensor        # (B, N+1)
    service: torch.Tensor     # (B, N+1)
    horizon: torch.Tensor     # (B,)
    limit: torch.Tensor       # (B,)
    speed: torch.Tensor       # (B,)
    tw: torch.Tensor          # (B,) bool
    open: torch.Tensor        # (B,) bool
    has_limit: torch.Tensor   # (B,) bool

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        return self.coords.shape[1] - 1

    @classmethod
    def from_instances(cls, instances: Sequence[Instance]) -> "InstanceBatch":
        n = {inst.n for inst in instances}
        if len(n) != 1:
            raise ValueError("all instances in a batch must have the same size")
        zeros = np.zeros(instances[0].n + 1)

        def arr(f):
            return torch.as_tensor(np.stack([f(i) for i in instances]), dtype=DTYPE)

        def flag(f):
            return torch.tensor([bool(f(i)) for i in instances])

        return cls(
            coords=arr(lambda i: i.coords),
            dist=arr(build_distance_matrix),
            demand=arr(lambda i: i.demands),
            early=arr(lambda i: i.tw_early if i.attrs.tw_active else zeros),
            late=arr(lambda i: i.tw_late if i.attrs.tw_active else zeros),
            service=arr(lambda i: i.service if i.attrs.tw_active else zeros),
            horizon=torch.tensor([float(i.depot_horizon or 0.0) for i in instances], dtype=DTYPE),
            limit=torch.tensor([float(i.duration_limit or 0.0) for i in instances], dtype=DTYPE),
            speed=torch.tensor([float(i.speed) for i in instances], dtype=DTYPE),
            tw=flag(lambda i: i.attrs.tw_active),
            open=flag(lambda i: i.attrs.open_active),
            has_limit=flag(lambda i: i.attrs.limit_active),
        )

    def features(self) -> torch.Tensor:
        """Node features (x, y, d, e, l); window columns are zero when TW is inactive."""
        tw = self.tw[:, None].to(DTYPE)
        return torch.stack([self.coords[..., 0], self.coords[..., 1], self.demand,
                            self.early * tw, self.late * tw], dim=-1)


class BatchEnv:
    def __init__(self, batch: InstanceBatch, pomo: int, options: EnvOptions = EnvOptions()):
        self.batch = batch
        self.options = options
        B, N1 = batch.size, batch.n + 1
        self.B, self.P, self.N1 = B, pomo, N1
        self.current = torch.zeros(B, pomo, dtype=torch.long)
        self.capacity = torch.ones(B, pomo, dtype=DTYPE)
        self.time = torch.zeros(B, pomo, dtype=DTYPE)
        self.length = torch.zeros(B, pomo, dtype=DTYPE)
        self.cost = torch.zeros(B, pomo, dtype=DTYPE)
        self.visited = torch.zeros(B, pomo, N1, dtype=torch.bool)
        self.count = torch.zeros(B, pomo, dtype=torch.long)
        self.done = torch.zeros(B, pomo, dtype=torch.bool)
        self.steps = 0
        self._bidx = torch.arange(B)[:, None].expand(B, pomo)

    def attribute_vector(self) -> torch.Tensor:
        b = self.batch
        tw = b.tw[:, None].to(DTYPE)
        lim = b.has_limit[:, None].to(DTYPE)
        op = b.open[:, None].to(DTYPE).expand(self.B, self.P)
        return torch.stack([self.capacity, self.time * tw, self.length * lim, op], dim=-1)

    def attribute_masks(self) -> dict[str, torch.Tensor]:
        b = self.batch
        leg = b.dist[self._bidx, self.current]                      # (B, P, N1)
        to_depot = b.dist[:, :, 0][:, None, :]                       # (B, 1, N1)
        closed = ~b.open[:, None, None]
        masks = {"capacity": self.capacity[..., None] - b.demand[:, None, :] < -TOL}
        speed = b.speed[:, None, None]
        arrive = torch.maximum(self.time[..., None] + leg / speed, b.early[:, None, :])
        m = arrive > b.late[:, None, :] + TOL
        back = arrive + b.service[:, None, :] + to_depot / speed > b.horizon[:, None, None] + TOL
        masks["tw"] = (m | (back & closed)) & b.tw[:, None, None]
        total = self.length[..., None] + leg
        if self.options.limit_lookahead:
            total = torch.where(closed, total + to_depot, total)
        masks["limit"] = (total > b.limit[:, None, None] + TOL) & b.has_limit[:, None, None]
        for m in masks.values():
            m[..., 0] = False
        return masks

    def feasible_mask(self) -> torch.Tensor:
        masked = self.visited.clone()
        for m in self.attribute_masks().values():
            masked |= m
        at_depot = self.current == 0
        masked[..., 0] = at_depot
        if bool(((masked.all(-1)) & ~self.done).any()):
            raise DeadEndError("a live rollout has no feasible node")
        done = self.done[..., None]
        only_depot = torch.ones_like(masked)
        only_depot[..., 0] = False
        return torch.where(done, only_depot, masked)

    def step(self, node: torch.Tensor) -> None:
        b = self.batch
        live = ~self.done
        node = torch.where(live, node, torch.zeros_like(node))
        leg = b.dist[self._bidx, self.current, node]
        depot = node == 0
        op = b.open[:, None]
        tw = b.tw[:, None]
        self.cost = torch.where(live & ~(depot & op), self.cost + leg, self.cost)
        dem = b.demand[self._bidx, node]
        e = b.early[self._bidx, node]
        s = b.service[self._bidx, node]
        arrive = torch.maximum(self.time + leg / b.speed[:, None], e) + s
        new_time = torch.where(tw, arrive, self.time)
        zero = torch.zeros_like(self.time)
        self.capacity = torch.where(live, torch.where(depot, torch.ones_like(zero), self.capacity - dem), self.capacity)
        self.time = torch.where(live, torch.where(depot, zero, new_time), self.time)
        self.length = torch.where(live, torch.where(depot, zero, self.length + leg), self.length)
        cust = live & ~depot
        self.visited[self._bidx[cust], torch.arange(self.P)[None, :].expand_as(node)[cust], node[cust]] = True
        self.count = self.count + cust.long()
        self.current = torch.where(live, node, self.current)
        finished = self.count == b.n
        self.done = self.done | (live & finished & (depot | op))
        self.steps += 1

    @property
    def all_done(self) -> bool:
        return bool(self.done.all())


def feasible_start_counts(batch: InstanceBatch, options: EnvOptions = EnvOptions()) -> torch.Tensor:
    return (~BatchEnv(batch, 1, options).feasible_mask()[:, 0, :]).sum(-1)


def first_feasible_starts(batch: InstanceBatch, pomo: int, options: EnvOptions = EnvOptions()) -> torch.Tensor:
    """The first ``pomo`` customers (by index) that are feasible as a first visit, per instance."""
    env = BatchEnv(batch, 1, options)
    masked = env.feasible_mask()[:, 0, :]                       # (B, N1)
    feasible = ~masked
    counts = feasible.sum(-1)
    if bool((counts < pomo).any()):
        raise ValueError(f"an instance has fewer than {pomo} feasible starting customers")
    order = torch.arange(batch.n + 1).expand_as(feasible)
    key = torch.where(feasible, order, order + batch.n + 1)
    return key.argsort(dim=-1)[:, :pomo]
