"""Greedy / sampled decoding and 8-fold symmetry augmentation."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .batched import InstanceBatch, feasible_start_counts, first_feasible_starts
from .core import Instance, Solution, build_distance_matrix, solution_cost, validate_solution
from .env import EnvOptions
from .policy import AttentionModel, run_rollout, trim_actions

# dihedral symmetries of the unit square, identity first
TRANSFORMS = (
    lambda x, y: (x, y),
    lambda x, y: (y, x),
    lambda x, y: (x, 1 - y),
    lambda x, y: (y, 1 - x),
    lambda x, y: (1 - x, y),
    lambda x, y: (1 - y, x),
    lambda x, y: (1 - x, 1 - y),
    lambda x, y: (1 - y, 1 - x),
)


@dataclass(frozen=True)
class InferenceConfig:
    mode: str = "greedy"
    samples: int = 1
    augment8: bool = False
    n_starts: Optional[int] = None
    seed: int = 0
    batch_size: int = 128

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError("mode must be greedy or sample")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


def augment8(instance: Instance) -> list[Instance]:
    x, y = instance.coords[:, 0], instance.coords[:, 1]
    out = []
    for k, f in enumerate(TRANSFORMS):
        nx, ny = f(x, y)
        out.append(instance.with_(coords=np.stack([nx, ny], axis=1), name=f"{instance.name}#aug{k}"))
    return out


def _n_starts(instances: Sequence[Instance], batch: InstanceBatch, config: InferenceConfig) -> int:
    want = instances[0].n if config.n_starts is None else config.n_starts
    p = min(want, int(feasible_start_counts(batch).min()))
    if p < 1:
        raise ValueError("no feasible starting customer")
    return p


def _decode(instances: Sequence[Instance], model: AttentionModel, config: InferenceConfig,
            mode: str, generator=None, options: EnvOptions = EnvOptions()):
    """Best solution per instance over its starts: list of (Solution, cost, start_index)."""
    batch = InstanceBatch.from_instances(instances)
    P = _n_starts(instances, batch, config)
    starts = first_feasible_starts(batch, P, options)
    with torch.no_grad():
        out = run_rollout(model, batch, starts, mode=mode, generator=generator, options=options)
    cost = out.cost.numpy()
    results = []
    for i, inst in enumerate(instances):
        j = int(np.argmin(cost[i]))      # first minimum = lowest start index
        seq = trim_actions(out.actions[i, j].tolist(), not inst.attrs.open_active)
        results.append((Solution.from_sequence(seq, inst.name), j))
    return results


def _grouped(instances: Sequence[Instance], size: int):
    groups = defaultdict(list)
    for k, inst in enumerate(instances):
        groups[inst.n].append(k)
    for idx in groups.values():
        for s in range(0, len(idx), size):
            yield idx[s:s + size]


def greedy_solve_many(instances: Sequence[Instance], model: AttentionModel,
                      config: InferenceConfig = InferenceConfig()) -> list[tuple[Solution, float]]:
    model.eval()
    results: list = [None] * len(instances)
    for idx in _grouped(instances, config.batch_size):
        group = [instances[k] for k in idx]
        for k, inst, (sol, _) in zip(idx, group, _decode(group, model, config, "greedy")):
            results[k] = (sol, solution_cost(sol, inst))
    return results


def greedy_solve(instance: Instance, model: AttentionModel,
                 config: InferenceConfig = InferenceConfig()) -> tuple[Solution, float]:
    return greedy_solve_many([instance], model, config)[0]


def solve_aug8_many(instances: Sequence[Instance], model: AttentionModel,
                    config: InferenceConfig = InferenceConfig()) -> list[tuple[Solution, float]]:
    """Greedy on all 8 symmetric copies; best solution, costed on the original instance."""
    model.eval()
    results: list = [None] * len(instances)
    per_group = max(1, config.batch_size // 8)
    for idx in _grouped(instances, per_group):
        group = [instances[k] for k in idx]
        augmented = [a for inst in group for a in augment8(inst)]
        decoded = _decode(augmented, model, config, "greedy")
        for g, (k, inst) in enumerate(zip(idx, group)):
            dist = build_distance_matrix(inst)
            best = None
            for t in range(8):
                sol = Solution(decoded[8 * g + t][0].routes, inst.name)
                if t and validate_solution(sol, inst, dist) is not None:
                    continue
                c = solution_cost(sol, inst, dist)
                if best is None or c < best[1]:
                    best = (sol, c)
            results[k] = best
    return results


def solve_aug8(instance: Instance, model: AttentionModel,
               config: InferenceConfig = InferenceConfig()) -> tuple[Solution, float]:
    return solve_aug8_many([instance], model, config)[0]


def sample_solve_many(instances: Sequence[Instance], model: AttentionModel,
                      config: InferenceConfig = InferenceConfig(mode="sample")) -> list[tuple[Solution, float]]:
    """Best of ``config.samples`` sampled rollouts per start; round r always uses seed (seed, r)."""
    model.eval()
    best: list = [None] * len(instances)
    for r in range(config.samples):
        gen = torch.Generator().manual_seed(int(config.seed) * 1_000_003 + r)
        for idx in _grouped(instances, config.batch_size):
            group = [instances[k] for k in idx]
            for k, inst, (sol, _) in zip(idx, group, _decode(group, model, config, "sample", gen)):
                c = solution_cost(sol, inst)
                if best[k] is None or c < best[k][1]:
                    best[k] = (sol, c)
    return best


def sample_solve(instance: Instance, model: AttentionModel,
                 config: InferenceConfig = InferenceConfig(mode="sample")) -> tuple[Solution, float]:
    return sample_solve_many([instance], model, config)[0]


def solve(instance: Instance, model: AttentionModel, config: InferenceConfig) -> tuple[Solution, float]:
    if config.mode == "sample":
        return sample_solve(instance, model, config)
    if config.augment8:
        return solve_aug8(instance, model, config)
    return greedy_solve(instance, model, config)
