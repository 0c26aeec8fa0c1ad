"""Multi-task REINFORCE with a shared multi-start baseline, plus fine-tuning."""
from __future__ import annotations

import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .batched import InstanceBatch, first_feasible_starts
from .core import AttributeSet, Instance
from .env import EnvOptions
from .instancegen import GenConfig, gen_variant, instance_seed, substream
from .policy import AttentionModel, RolloutOutput, run_rollout

log = logging.getLogger(__name__)

FINETUNE_MODES = ("off", "decoder_only", "full")


@dataclass(frozen=True)
class TrainConfig:
    tasks: tuple[str, ...] = ("CVRP", "VRPTW", "OVRP", "VRPB", "VRPL")
    n: int = 20
    instances_per_epoch: int = 10_000
    batch_size: int = 64
    epochs: int = 10_000
    lr: float = 1e-4
    weight_decay: float = 1e-6
    n_starts: Optional[int] = None      # defaults to n
    seed: int = 1234
    finetune_mode: str = "off"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(AttributeSet.from_name(t).name for t in self.tasks))
        if not self.tasks:
            raise ValueError("at least one task is required")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_starts is not None and not 1 <= self.n_starts <= self.n:
            raise ValueError("n_starts must be in 1..n")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ValueError(f"finetune_mode must be one of {FINETUNE_MODES}")

    @property
    def starts(self) -> int:
        return self.n if self.n_starts is None else self.n_starts

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.instances_per_epoch / self.batch_size)

    def gen_config(self, seed: int = 0) -> GenConfig:
        return GenConfig(n=self.n, seed=seed)


@dataclass
class RolloutBatch:
    instances: list
    output: RolloutOutput
    mode: str

    @property
    def rewards(self) -> torch.Tensor:
        return -self.output.cost

    @property
    def log_prob(self) -> torch.Tensor:
        return self.output.log_prob


def multistart_rollout(instances: Sequence[Instance], model: AttentionModel, n_starts: int,
                       mode: str = "sample", generator: Optional[torch.Generator] = None,
                       options: EnvOptions = EnvOptions()) -> RolloutBatch:
    """One trajectory per distinct forced starting customer, for every instance."""
    batch = InstanceBatch.from_instances(instances)
    try:
        starts = first_feasible_starts(batch, n_starts, options)
    except ValueError as exc:
        raise ValueError(f"no feasible start: {exc}") from None
    out = run_rollout(model, batch, starts, mode=mode, generator=generator, options=options)
    return RolloutBatch(list(instances), out, mode)


def shared_baseline(rewards) -> tuple[float, np.ndarray]:
    """Mean reward over one instance's trajectories and the resulting advantages."""
    r = np.asarray(rewards, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("need at least one reward")
    b = math.fsum(r) / r.size
    return b, r - b


def advantages(rewards: torch.Tensor) -> torch.Tensor:
    # rewards (B, P) -> (B, P), rows mean-centered in float64
    r = rewards.to(torch.float64)
    return r - r.mean(dim=-1, keepdim=True)


def reinforce_loss(batch: RolloutBatch) -> torch.Tensor:
    """Negated policy-gradient surrogate; minimizing it ascends the expected reward."""
    if batch.mode != "sample":
        raise ValueError("REINFORCE needs sampled trajectories, got a greedy batch")
    adv = advantages(batch.rewards).to(batch.log_prob.dtype)
    B, P = adv.shape
    return -(adv * batch.log_prob).sum() / (B * P)


def reinforce_gradient(batch: RolloutBatch, model: AttentionModel) -> dict[str, torch.Tensor]:
    """Ascent direction (1/(nB)) sum (R - b) grad log p for every parameter."""
    model.zero_grad(set_to_none=True)
    loss = reinforce_loss(batch)
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad
        grads[name] = torch.zeros_like(p) if g is None else -g.detach().clone()
    model.zero_grad(set_to_none=True)
    return grads


def task_schedule(config: TrainConfig, epoch: int, n_batches: Optional[int] = None) -> list[str]:
    n_batches = config.batches_per_epoch if n_batches is None else n_batches
    rng = substream(config.seed, "tasks", epoch)
    idx = rng.integers(0, len(config.tasks), size=n_batches)
    return [config.tasks[i] for i in idx]


def batch_instances(config: TrainConfig, task: str, epoch: int, batch_idx: int, count: int) -> list[Instance]:
    gen = config.gen_config()
    return [gen_variant(task, gen.with_seed(instance_seed(config.seed, epoch, batch_idx, i))) for i in range(count)]


def make_optimizer(model: AttentionModel, config: TrainConfig) -> torch.optim.Optimizer:
    if config.finetune_mode == "decoder_only":
        for p in model.encoder_parameters():
            p.requires_grad_(False)
        params = list(model.decoder.parameters())
    else:
        for p in model.parameters():
            p.requires_grad_(True)
        params = list(model.parameters())
    return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)


def train_epoch(model: AttentionModel, optimizer: torch.optim.Optimizer, config: TrainConfig,
                epoch: int) -> dict:
    """One epoch: each batch draws one task uniformly and B fresh instances of it."""
    t0 = time.perf_counter()
    model.train()
    costs = defaultdict(list)
    adv_norms = []
    remaining = config.instances_per_epoch
    for k, task in enumerate(task_schedule(config, epoch)):
        count = min(config.batch_size, remaining)
        remaining -= count
        instances = batch_instances(config, task, epoch, k, count)
        gen = torch.Generator().manual_seed(instance_seed(config.seed, epoch, k, 0x5A))
        try:
            batch = multistart_rollout(instances, model, config.starts, "sample", gen)
        except Exception as exc:
            raise RuntimeError(f"rollout failed in epoch {epoch} batch {k} ({task}): {exc}") from exc
        loss = reinforce_loss(batch)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        costs[task].append(float(batch.output.cost.mean()))
        adv_norms.append(float(advantages(batch.rewards).norm(dim=-1).mean()))
    per_task = {t: float(np.mean(v)) for t, v in sorted(costs.items())}
    all_costs = [c for v in costs.values() for c in v]
    return {
        "epoch": epoch,
        "task_cost": per_task,
        "mean_cost": float(np.mean(all_costs)) if all_costs else float("nan"),
        "mean_advantage_norm": float(np.mean(adv_norms)) if adv_norms else 0.0,
        "wall_time": time.perf_counter() - t0,
    }


def train(model: AttentionModel, config: TrainConfig, metrics_path=None, start_epoch: int = 0,
          callback=None) -> list[dict]:
    optimizer = make_optimizer(model, config)
    history = []
    fh = open(metrics_path, "a") if metrics_path else None
    try:
        for epoch in range(start_epoch, start_epoch + config.epochs):
            m = train_epoch(model, optimizer, config, epoch)
            history.append(m)
            log.info("epoch %d mean cost %.4f (%.1fs)", epoch, m["mean_cost"], m["wall_time"])
            if fh:
                fh.write(json.dumps(m) + "\n")
                fh.flush()
            if callback:
                callback(epoch, m)
    finally:
        if fh:
            fh.close()
    for p in model.parameters():
        p.requires_grad_(True)
    model.pretrained = True
    return history


def finetune(model: AttentionModel, config: TrainConfig, mode: str = "decoder_only",
             lr: float = 1e-5, weight_decay: float = 1e-6, epochs: int = 200,
             metrics_path=None) -> list[dict]:
    """Continue training on ``config.tasks``; ``decoder_only`` keeps the encoder frozen."""
    if mode not in ("decoder_only", "full"):
        raise ValueError("mode must be decoder_only or full")
    if not model.pretrained:
        raise ValueError("fine-tuning needs a pretrained model")
    ft = replace(config, finetune_mode=mode, lr=lr, weight_decay=weight_decay, epochs=epochs)
    return train(model, ft, metrics_path)
