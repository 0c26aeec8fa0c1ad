"""Attention encoder/decoder policy shared by every routing variant."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .batched import BatchEnv, InstanceBatch
from .core import Instance
from .env import EnvOptions

ATTR_DIM = 4
MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    n_layers: int = 6
    n_heads: int = 8
    ff_hidden: int = 512
    clip: float = 10.0
    norm_mode: str = "instance"
    feature_dim: int = 5

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.norm_mode not in ("none", "instance"):
            raise ValueError(f"unknown norm_mode {self.norm_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Scaled dot-product attention; ``mask`` is True where a key is forbidden."""
    u = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        u = u.masked_fill(mask, MASK_FILL)
    return torch.softmax(u, dim=-1) @ v


def split_heads(x: torch.Tensor, h: int) -> torch.Tensor:
    # (..., L, h*dk) -> (..., h, L, dk)
    *lead, L, d = x.shape
    return x.reshape(*lead, L, h, d // h).transpose(-3, -2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, L, dk = x.shape
    return x.transpose(-3, -2).reshape(*lead, L, h * dk)


class MultiHeadAttention(nn.Module):
    def __init__(self, embed_dim: int, n_heads: int, query_dim: Optional[int] = None):
        super().__init__()
        self.n_heads = n_heads
        self.W_query = nn.Linear(query_dim or embed_dim, embed_dim, bias=False)
        self.W_key = nn.Linear(embed_dim, embed_dim, bias=False)
        self.W_val = nn.Linear(embed_dim, embed_dim, bias=False)
        self.W_out = nn.Linear(embed_dim, embed_dim, bias=False)

    def forward(self, q_in, kv_in, mask=None):
        h = self.n_heads
        q = split_heads(self.W_query(q_in), h)
        k = split_heads(self.W_key(kv_in), h)
        v = split_heads(self.W_val(kv_in), h)
        if mask is not None:
            mask = mask.unsqueeze(-3)
        return self.W_out(merge_heads(attention(q, k, v, mask)))


def mha(q_in: torch.Tensor, kv_in: torch.Tensor, module: MultiHeadAttention, mask=None) -> torch.Tensor:
    return module(q_in, kv_in, mask)


class InstanceNorm(nn.Module):
    """Per-channel normalization over the node axis of each instance."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.InstanceNorm1d(dim, affine=True, track_running_stats=False)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mha = MultiHeadAttention(cfg.embed_dim, cfg.n_heads)
        self.ff = nn.Sequential(nn.Linear(cfg.embed_dim, cfg.ff_hidden), nn.ReLU(),
                                nn.Linear(cfg.ff_hidden, cfg.embed_dim))
        if cfg.norm_mode == "instance":
            self.norm1, self.norm2 = InstanceNorm(cfg.embed_dim), InstanceNorm(cfg.embed_dim)
        else:
            self.norm1 = self.norm2 = nn.Identity()

    def forward(self, h):
        h = self.norm1(h + self.mha(h, h))
        return self.norm2(h + self.ff(h))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.mha = MultiHeadAttention(cfg.embed_dim, cfg.n_heads, query_dim=cfg.embed_dim + ATTR_DIM)
        self.W_logit = nn.Linear(cfg.embed_dim, cfg.embed_dim, bias=False)

    def precompute(self, emb: torch.Tensor):
        h = self.cfg.n_heads
        return (split_heads(self.mha.W_key(emb), h), split_heads(self.mha.W_val(emb), h), self.W_logit(emb))

    def forward(self, cache, emb, current, attr_vec, mask, return_context: bool = False):
        """Log-probabilities over nodes for every (batch, pomo) rollout.

        emb (B, N1, d); current (B, P); attr_vec (B, P, 4); mask (B, P, N1) True = forbidden.
        """
        K, V, L = cache
        B, P = current.shape
        h_cur = emb.gather(1, current[..., None].expand(B, P, emb.shape[-1]))
        ctx = torch.cat([h_cur, attr_vec.to(emb.dtype)], dim=-1)
        q = split_heads(self.mha.W_query(ctx), self.cfg.n_heads)
        glimpse = self.mha.W_out(merge_heads(attention(q, K, V, mask.unsqueeze(1))))
        u = glimpse @ L.transpose(1, 2) / math.sqrt(self.cfg.embed_dim)
        u = self.cfg.clip * torch.tanh(u)
        logp = torch.log_softmax(u.masked_fill(mask, MASK_FILL), dim=-1)
        if return_context:
            return logp, glimpse, u
        return logp


class AttentionModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.init_embed = nn.Linear(cfg.feature_dim, cfg.embed_dim)
        self.layers = nn.ModuleList([EncoderLayer(cfg) for _ in range(cfg.n_layers)])
        self.decoder = Decoder(cfg)
        # set once weights come from training or a checkpoint
        self.pretrained = False

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        h = self.init_embed(features.to(self.dtype))
        for layer in self.layers:
            h = layer(h)
        return h

    @property
    def dtype(self):
        return self.init_embed.weight.dtype

    def encoder_parameters(self):
        yield from self.init_embed.parameters()
        yield from self.layers.parameters()


def encode(features: torch.Tensor, model: AttentionModel) -> torch.Tensor:
    return model.encode(features)


def decode_step(model: AttentionModel, emb: torch.Tensor, current: torch.Tensor,
                attr_vec: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Probability vector over nodes; masked entries are exactly zero."""
    if bool(mask.all(-1).any()):
        raise ValueError("fully masked decoding step")
    logp = model.decoder(model.decoder.precompute(emb), emb, current, attr_vec, mask)
    return logp.exp().masked_fill(mask, 0.0)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> AttentionModel:
    gen = torch.Generator().manual_seed(int(seed))
    model = AttentionModel(cfg)
    bound = 1.0 / math.sqrt(cfg.embed_dim)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".norm." in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            else:
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
    return model.to(dtype)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def param_count_formula(cfg: ModelConfig) -> int:
    d, f, F_ = cfg.embed_dim, cfg.ff_hidden, cfg.feature_dim
    per_layer = 4 * d * d + (d * f + f) + (f * d + d)
    if cfg.norm_mode == "instance":
        per_layer += 4 * d
    decoder = (d + ATTR_DIM) * d + 3 * d * d + d * d
    return (F_ * d + d) + cfg.n_layers * per_layer + decoder


# --- rollouts -------------------------------------------------------------------

@dataclass
class RolloutOutput:
    actions: torch.Tensor        # (B, P, T) long, includes the forced start
    log_prob: torch.Tensor       # (B, P) sum of log-probabilities of non-forced choices
    cost: torch.Tensor           # (B, P) float64
    contexts: Optional[list] = None


def run_rollout(model: AttentionModel, batch: InstanceBatch, starts: torch.Tensor, mode: str = "greedy",
                forced: Optional[torch.Tensor] = None, generator: Optional[torch.Generator] = None,
                options: EnvOptions = EnvOptions(), keep_contexts: bool = False) -> RolloutOutput:
    """Decode ``starts.shape[1]`` trajectories per instance.

    ``mode`` is "greedy" (argmax, lowest index on ties), "sample", or "forced"
    (teacher forcing along ``forced`` of shape (B, P, T) after the start column).
    """
    B, P = starts.shape
    env = BatchEnv(batch, P, options)
    env.step(starts)
    emb = model.encode(batch.features())
    cache = model.decoder.precompute(emb)
    actions = [starts]
    logps = []
    contexts = [] if keep_contexts else None
    t = 1
    while not env.all_done:
        mask = env.feasible_mask()
        out = model.decoder(cache, emb, env.current, env.attribute_vector(), mask, return_context=keep_contexts)
        logp = out[0] if keep_contexts else out
        if keep_contexts:
            contexts.append((out[1].detach(), (~env.done).clone()))
        if mode == "greedy":
            node = logp.argmax(-1)
        elif mode == "sample":
            probs = logp.detach().exp().masked_fill(mask, 0.0).reshape(B * P, -1)
            node = torch.multinomial(probs, 1, generator=generator).reshape(B, P)
        elif mode == "forced":
            node = forced[:, :, t] if t < forced.shape[2] else torch.zeros_like(starts)
            if bool(mask.gather(-1, node[..., None]).squeeze(-1).any()):
                raise ValueError(f"forced sequence selects a masked node at step {t}")
        else:
            raise ValueError(f"unknown mode {mode!r}")
        live = ~env.done
        node = torch.where(live, node, torch.zeros_like(node))
        chosen = logp.gather(-1, node[..., None]).squeeze(-1)
        logps.append(torch.where(live, chosen, torch.zeros_like(chosen)))
        env.step(node)
        actions.append(node)
        t += 1
        if t > 4 * (batch.n + 2):
            raise RuntimeError("rollout did not terminate")
    total = torch.stack(logps, -1).sum(-1) if logps else torch.zeros(B, P, dtype=model.dtype)
    return RolloutOutput(torch.stack(actions, -1), total, env.cost, contexts)


def trim_actions(row: Sequence[int], closed: bool) -> list[int]:
    """Drop the depot padding emitted after a rollout finished."""
    seq = [int(v) for v in row]
    while seq and seq[-1] == 0:
        seq.pop()
    if closed:
        seq.append(0)
    return seq


def log_prob_and_grad(instance: Instance, node_sequence: Sequence[int], model: AttentionModel,
                      options: EnvOptions = EnvOptions()) -> tuple[float, dict[str, torch.Tensor]]:
    """log p(sequence) under the policy, with the start node treated as forced, and its gradient."""
    seq = [int(v) for v in node_sequence]
    if not seq or seq[0] == 0:
        raise ValueError("sequence must start at a customer")
    batch = InstanceBatch.from_instances([instance])
    forced = torch.tensor(seq, dtype=torch.long)[None, None, :]
    model.zero_grad(set_to_none=True)
    out = run_rollout(model, batch, forced[:, :, 0], mode="forced", forced=forced, options=options)
    if out.actions.shape[2] < len(seq) or out.actions[0, 0, :len(seq)].tolist() != seq:
        raise ValueError("sequence does not match a complete rollout")
    lp = out.log_prob.sum()
    grads = {}
    if lp.requires_grad:
        lp.backward()
    for name, p in model.named_parameters():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return float(lp.detach()), grads


# --- checkpoints ----------------------------------------------------------------

MAGIC = b"MTVRPCK1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: AttentionModel, meta: Optional[dict] = None) -> bytes:
    tensors = []
    blobs = []
    offset = 0
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy()
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        tensors.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    body = b"".join(blobs)
    header = {"version": FORMAT_VERSION, "config": asdict(model.cfg), "tensors": tensors,
              "meta": meta or {}, "sha256": hashlib.sha256(body).hexdigest()}
    hdr = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(hdr)) + hdr + body


def save_checkpoint(model: AttentionModel, path, meta: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, meta))


def read_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise CheckpointError("bad magic at offset 0")
    if len(data) < 16:
        raise CheckpointError("truncated header length at offset 8")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointError(f"header of {hlen} bytes runs past end of file at offset 16")
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt header at offset 16: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    base = 16 + hlen
    body = data[base:]
    arrays = {}
    for t in header["tensors"]:
        start, end = t["offset"], t["offset"] + t["nbytes"]
        if end > len(body):
            raise CheckpointError(f"tensor {t['name']} truncated at offset {base + len(body)} "
                                  f"(expected end {base + end})")
        arrays[t["name"]] = np.frombuffer(body[start:end], dtype=t["dtype"]).reshape(t["shape"])
    if hashlib.sha256(body).hexdigest() != header["sha256"]:
        raise CheckpointError(f"payload checksum mismatch in bytes {base}..{len(data)}")
    return header, arrays


def load_checkpoint(path) -> tuple[AttentionModel, dict]:
    with open(path, "rb") as fh:
        header, arrays = read_checkpoint(fh.read())
    cfg = ModelConfig(**header["config"])
    dtype = torch.float64 if next(iter(arrays.values())).dtype == np.float64 else torch.float32
    model = AttentionModel(cfg).to(dtype)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.pretrained = True
    return model, header


def encoder_checksum(model: AttentionModel) -> str:
    h = hashlib.sha256()
    for p in model.encoder_parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
