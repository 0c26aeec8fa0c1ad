"""Benchmark harness: CVRPLib ingestion, gaps, embedding similarity and reports."""
from __future__ import annotations

import csv
import json
import math
import re
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .baselines import BRUTE_FORCE_MAX_N, brute_force, farthest_insertion, nearest_insertion
from .batched import InstanceBatch, first_feasible_starts
from .core import AttributeSet, Instance, validate_solution
from .infer import InferenceConfig, greedy_solve_many, sample_solve_many, solve_aug8_many
from .instancegen import GenConfig, gen_batch, substream
from .policy import AttentionModel, run_rollout

REFERENCE_SOURCES = ("HGS", "LKH3", "BKS", "paper-table")


class CVRPLibError(ValueError):
    pass


class MissingReference(LookupError):
    pass


# --- references -----------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceRecord:
    source: str
    variant: str
    n: int
    value: float
    provenance: str

    def __post_init__(self):
        if self.source not in REFERENCE_SOURCES:
            raise ValueError(f"unknown reference source {self.source!r}")
        if not self.value > 0:
            raise ValueError("reference value must be positive")
        if not self.provenance:
            raise ValueError("reference provenance is required")


def load_references(path=None) -> list[ReferenceRecord]:
    if path is None:
        text = resources.files("mtvrp").joinpath("data/references.json").read_text()
    else:
        text = Path(path).read_text()
    return [ReferenceRecord(**r) for r in json.loads(text)["records"]]


def reference_value(records: Sequence[ReferenceRecord], source: str, variant: str, n: int) -> float:
    for r in records:
        if r.source == source and r.variant == variant and r.n == n:
            return r.value
    raise MissingReference(f"no {source} reference for {variant} n={n}")


# --- CVRPLib --------------------------------------------------------------------

_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION")


def parse_cvrplib(text: str) -> Instance:
    """Parse a CVRPLIB file into a unit-square CVRP instance with the depot as node 0.

    Coordinates are shifted by the bounding-box minimum and divided by its
    larger side, which maps into [0,1]² without distorting distances.
    """
    header: dict[str, str] = {}
    sections: dict[str, list[list[str]]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        key = line.split()[0].rstrip(":")
        if key in _SECTIONS:
            current = key
            sections[key] = []
            continue
        m = re.match(r"^([A-Z_]+)\s*:\s*(.*)$", line)
        if m:
            header[m.group(1)] = m.group(2).strip()
            current = None
            continue
        if current is None:
            raise CVRPLibError(f"unexpected line outside a section: {line!r}")
        sections[current].append(line.split())
    for key in ("DIMENSION", "CAPACITY"):
        if key not in header:
            raise CVRPLibError(f"missing {key}")
    for key in _SECTIONS:
        if key not in sections:
            raise CVRPLibError(f"missing {key}")
    dim = int(header["DIMENSION"])
    capacity = float(header["CAPACITY"])
    if capacity <= 0:
        raise CVRPLibError("CAPACITY must be positive")

    coords = {}
    for row in sections["NODE_COORD_SECTION"]:
        if len(row) != 3:
            raise CVRPLibError(f"bad coordinate row {row}")
        coords[int(row[0])] = (float(row[1]), float(row[2]))
    demands = {}
    for row in sections["DEMAND_SECTION"]:
        if len(row) != 2:
            raise CVRPLibError(f"bad demand row {row}")
        try:
            demands[int(row[0])] = int(row[1])
        except ValueError:
            raise CVRPLibError(f"non-integer demand {row[1]!r} for node {row[0]}") from None
    depots = []
    for row in sections["DEPOT_SECTION"]:
        for tok in row:
            v = int(tok)
            if v == -1:
                break
            depots.append(v)
    if len(depots) != 1:
        raise CVRPLibError(f"expected exactly one depot, got {len(depots)}")
    ids = sorted(coords)
    if len(ids) != dim or sorted(demands) != ids:
        raise CVRPLibError("DIMENSION does not match the coordinate/demand sections")
    depot = depots[0]
    if depot not in coords:
        raise CVRPLibError(f"depot {depot} has no coordinates")
    order = [depot] + [i for i in ids if i != depot]
    xy = np.array([coords[i] for i in order], dtype=np.float64)
    lo = xy.min(axis=0)
    span = float((xy.max(axis=0) - lo).max())
    xy = (xy - lo) / span if span > 0 else xy - lo
    dem = np.array([demands[i] for i in order], dtype=np.float64)
    if dem[0] != 0:
        raise CVRPLibError("depot demand must be 0")
    if np.any(dem[1:] <= 0) or np.any(dem > capacity):
        raise CVRPLibError("customer demands must lie in (0, CAPACITY]")
    return Instance(coords=xy, demands=dem / capacity, attrs=AttributeSet(),
                    name=header.get("NAME", ""))


def load_cvrplib(path) -> Instance:
    return parse_cvrplib(Path(path).read_text())


# --- metrics --------------------------------------------------------------------

def gap(cost: float, reference: float) -> float:
    if not reference > 0:
        raise ValueError("reference must be positive")
    return 100.0 * (cost - reference) / reference


def hausdorff(set_a, set_b) -> float:
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("hausdorff distance needs two nonempty sets")
    d = cdist(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


@dataclass(frozen=True)
class EmbeddingSample:
    variant: str
    vector: np.ndarray


def collect_embeddings(model: AttentionModel, instances: Sequence[Instance], k: int = 1000,
                       seed: int = 0, batch_size: int = 64) -> list[EmbeddingSample]:
    """k decoder context vectors per variant, drawn uniformly over greedy decoding steps."""
    by_variant: dict[str, list[Instance]] = {}
    for inst in instances:
        by_variant.setdefault(inst.variant, []).append(inst)
    model.eval()
    out = []
    for vi, (variant, group) in enumerate(sorted(by_variant.items())):
        pool = []
        for s in range(0, len(group), batch_size):
            chunk = group[s:s + batch_size]
            batch = InstanceBatch.from_instances(chunk)
            starts = first_feasible_starts(batch, 1)
            with torch.no_grad():
                ro = run_rollout(model, batch, starts, mode="greedy", keep_contexts=True)
            for glimpse, live in ro.contexts:
                pool.append(glimpse[live].to(torch.float64).numpy())
        vecs = np.concatenate(pool)
        rng = substream(seed, "eval", vi)
        idx = rng.choice(len(vecs), size=k, replace=len(vecs) < k)
        out.extend(EmbeddingSample(variant, vecs[i].copy()) for i in np.sort(idx))
    return out


def embedding_distances(samples: Sequence[EmbeddingSample]) -> dict[tuple[str, str], float]:
    groups: dict[str, list] = {}
    for s in samples:
        groups.setdefault(s.variant, []).append(s.vector)
    names = sorted(groups)
    return {(a, b): hausdorff(groups[a], groups[b]) for a in names for b in names}


# --- evaluation -----------------------------------------------------------------

MODEL_SOLVERS = ("greedy", "aug8", "sample")
HEURISTIC_SOLVERS = ("ni", "fi", "bruteforce")
SOLVERS = MODEL_SOLVERS + HEURISTIC_SOLVERS


def run_solver(name: str, instances: Sequence[Instance], model: Optional[AttentionModel] = None,
               config: InferenceConfig = InferenceConfig()) -> list:
    if name in MODEL_SOLVERS and model is None:
        raise ValueError(f"solver {name} needs a model checkpoint")
    if name == "greedy":
        return greedy_solve_many(instances, model, config)
    if name == "aug8":
        return solve_aug8_many(instances, model, config)
    if name == "sample":
        samples = config.samples if config.mode == "sample" else 16
        return sample_solve_many(instances, model, InferenceConfig(mode="sample", samples=samples,
                                                                   seed=config.seed))
    fn: Callable = {"ni": nearest_insertion, "fi": farthest_insertion, "bruteforce": brute_force}[name]
    if name == "bruteforce" and any(i.n > BRUTE_FORCE_MAX_N for i in instances):
        raise ValueError(f"bruteforce is limited to n <= {BRUTE_FORCE_MAX_N}")
    return [fn(inst) for inst in instances]


@dataclass
class Report:
    rows: list[dict]          # one per (variant, solver, instance)
    summary: list[dict]       # one per (variant, solver)
    reference: str

    def to_json(self) -> str:
        return json.dumps({"reference": self.reference, "summary": self.summary, "rows": self.rows}, indent=1)

    def write(self, out_dir) -> tuple[Path, Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = out / "report.json", out / "summary.csv", out / "rows.csv"
        paths[0].write_text(self.to_json())
        for path, table in ((paths[1], self.summary), (paths[2], self.rows)):
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(table[0]) if table else [])
                w.writeheader()
                w.writerows(table)
        return paths


def eval_suite(model: Optional[AttentionModel], variants: Sequence[str], n: int, count: int,
               solvers: Sequence[str], reference: str = "bruteforce", seed: int = 0,
               config: InferenceConfig = InferenceConfig(),
               references: Optional[Sequence[ReferenceRecord]] = None) -> Report:
    """Mean cost, gap and wall time per (variant, solver) on ``count`` seeded instances.

    ``reference`` is either one of ``solvers`` or ``"table:<source>"`` to use a
    published constant for (variant, n).
    """
    unknown = [s for s in solvers if s not in SOLVERS]
    if unknown:
        raise ValueError(f"unknown solvers {unknown}")
    if reference.startswith("table:"):
        records = load_references() if references is None else references
        source = reference.split(":", 1)[1]
        ref_values = {v: reference_value(records, source, AttributeSet.from_name(v).name, n) for v in variants}
    elif reference not in solvers:
        raise MissingReference(f"reference solver {reference!r} is not among {list(solvers)}")
    else:
        ref_values = None
    rows, summary = [], []
    gen = GenConfig(n=n)
    for vi, variant in enumerate(variants):
        name = AttributeSet.from_name(variant).name
        instances = gen_batch(name, gen, count, seed, vi)
        means = {}
        stats = {}
        for solver in solvers:
            t0 = time.perf_counter()
            results = run_solver(solver, instances, model, config)
            wall = time.perf_counter() - t0
            costs = []
            for k, (inst, (sol, cost)) in enumerate(zip(instances, results)):
                feasible = validate_solution(sol, inst) is None
                rows.append({"variant": name, "solver": solver, "instance": k, "cost": cost,
                             "feasible": feasible})
                costs.append(cost)
            means[solver] = math.fsum(costs) / len(costs)
            stats[solver] = wall
        ref = ref_values[variant] if ref_values else means[reference]
        for solver in solvers:
            summary.append({"variant": name, "n": n, "solver": solver, "count": count,
                            "mean_cost": means[solver], "gap_pct": gap(means[solver], ref),
                            "wall_s": stats[solver]})
    return Report(rows, summary, reference)


def plot_gaps(summary: Sequence[dict], path) -> Path:
    """Grouped bar chart of gap per variant and solver."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    variants = list(dict.fromkeys(r["variant"] for r in summary))
    solvers = list(dict.fromkeys(r["solver"] for r in summary))
    val = {(r["variant"], r["solver"]): r["gap_pct"] for r in summary}
    width = 0.8 / max(1, len(solvers))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(variants)), 4))
    for j, s in enumerate(solvers):
        xs = [i + j * width for i in range(len(variants))]
        ax.bar(xs, [val.get((v, s), float("nan")) for v in variants], width, label=s)
    ax.set_xticks([i + width * (len(solvers) - 1) / 2 for i in range(len(variants))])
    ax.set_xticklabels(variants, rotation=30, ha="right")
    ax.set_ylabel("gap (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
