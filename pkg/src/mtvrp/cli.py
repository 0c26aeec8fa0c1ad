"""Command-line entry point: generate, train, finetune, solve, bench, inspect."""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .core import (AttributeSet, Instance, Solution, build_distance_matrix, load_instance, save_instance,
                   solution_cost, validate_instance, validate_solution)

log = logging.getLogger("mtvrp")

DATA_DIR_ENV = "MTVRP_DATA_DIR"

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_IO, EXIT_INTERNAL = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "mtvrp-data"))


def _build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """One JSON record per run: command, config, seeds, build id, timestamps and outputs."""

    def __init__(self, command: str, args: argparse.Namespace, argv: Sequence[str]):
        self.data = {
            "command": command,
            "argv": list(argv),
            "config": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
            "seeds": {"root": args.seed},
            "build": _build_id(),
            "started": _now(),
            "finished": None,
            "outputs": [],
            "exit_code": None,
        }

    def output(self, path) -> None:
        self.data["outputs"].append(str(path))

    def write(self, path, exit_code: int) -> Path:
        self.data["finished"] = _now()
        self.data["exit_code"] = exit_code
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.data, indent=1, default=str) + "\n")
        return path


# --- helpers --------------------------------------------------------------------

def _read_instance(path) -> Instance:
    path = Path(path)
    if path.suffix.lower() in (".vrp", ".txt"):
        from .bench import load_cvrplib
        return load_cvrplib(path)
    return load_instance(path)


def _load_model(path):
    from .policy import load_checkpoint
    return load_checkpoint(path)[0]


def _model_config(args):
    from .policy import ModelConfig
    return ModelConfig(embed_dim=args.embed_dim, n_layers=args.layers, n_heads=args.heads,
                       ff_hidden=args.ff_hidden)


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n")
    return path


# --- subcommands ----------------------------------------------------------------

def cmd_generate(args, manifest: RunManifest) -> int:
    from .instancegen import GenConfig, gen_batch
    name = AttributeSet.from_name(args.variant).name
    config = GenConfig(n=args.n, capacity_raw=args.capacity)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, inst in enumerate(gen_batch(name, config, args.count, args.seed)):
        path = out / f"{name}_n{args.n}_{k:05d}.json"
        save_instance(inst.with_(name=path.stem), path)
        manifest.output(path)
    log.info("wrote %d %s instances to %s", args.count, name, out)
    return EXIT_OK


def _train_config(args):
    from .train import TrainConfig
    return TrainConfig(tasks=tuple(args.tasks), n=args.n, instances_per_epoch=args.instances_per_epoch,
                       batch_size=args.batch_size, epochs=args.epochs, lr=args.lr,
                       weight_decay=args.weight_decay, seed=args.seed)


def cmd_train(args, manifest: RunManifest) -> int:
    from .policy import init_params, save_checkpoint
    from .train import train
    config = _train_config(args)
    model = init_params(_model_config(args), args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = out.with_suffix(".metrics.jsonl")
    if metrics.exists():
        metrics.unlink()
    train(model, config, metrics_path=metrics)
    save_checkpoint(model, out, meta={"command": "train", "seed": args.seed, "tasks": list(config.tasks)})
    manifest.output(out)
    manifest.output(metrics)
    return EXIT_OK


def cmd_finetune(args, manifest: RunManifest) -> int:
    from .policy import encoder_checksum, save_checkpoint
    from .train import finetune
    model = _load_model(args.checkpoint)
    before = encoder_checksum(model)
    config = _train_config(args)
    mode = {"decoder": "decoder_only", "decoder_only": "decoder_only", "full": "full"}[args.mode]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = out.with_suffix(".metrics.jsonl")
    if metrics.exists():
        metrics.unlink()
    finetune(model, config, mode=mode, lr=args.lr, weight_decay=args.weight_decay, epochs=args.epochs,
             metrics_path=metrics)
    after = encoder_checksum(model)
    if mode == "decoder_only" and after != before:
        raise AssertionError("encoder changed during decoder-only fine-tuning")
    save_checkpoint(model, out, meta={"command": "finetune", "mode": mode, "seed": args.seed,
                                      "encoder_sha256": after})
    manifest.data["encoder_checksum"] = {"before": before, "after": after}
    manifest.output(out)
    manifest.output(metrics)
    print(json.dumps({"encoder_before": before, "encoder_after": after}))
    return EXIT_OK


def _trace(instance: Instance, solution: Solution) -> None:
    from .env import Env
    env = Env(instance)
    state = env.initial()
    for node in solution.to_sequence(not instance.attrs.open_active):
        state = env.step(state, node)
        c, t, l, o = env.attribute_vector(state)
        print(f"step {state.step:3d} node {node:3d} c={c:.4f} t={t:.4f} l={l:.4f} open={int(o)} "
              f"cost={state.cost:.6f}", file=sys.stderr)


def cmd_solve(args, manifest: RunManifest) -> int:
    from .baselines import BRUTE_FORCE_MAX_N, brute_force, farthest_insertion, nearest_insertion
    from .infer import InferenceConfig, solve
    if args.aug8 and args.solver != "model":
        raise UsageError(f"--aug8 conflicts with --solver {args.solver}")
    if args.mode == "sample" and args.aug8:
        raise UsageError("--aug8 is a greedy decoding option and conflicts with --mode sample")
    if args.solver == "model" and not args.checkpoint:
        raise UsageError("--solver model needs --checkpoint")
    instance = _read_instance(args.instance)
    problems = validate_instance(instance)
    if problems:
        raise ValidationFailure("invalid instance: " + "; ".join(problems))
    if args.solver == "bruteforce" and instance.n > BRUTE_FORCE_MAX_N:
        raise UsageError(f"bruteforce is limited to n <= {BRUTE_FORCE_MAX_N}; instance has n={instance.n}")
    t0 = time.perf_counter()
    if args.solver == "model":
        model = _load_model(args.checkpoint)
        config = InferenceConfig(mode=args.mode, samples=args.samples, augment8=args.aug8, seed=args.seed)
        sol, cost = solve(instance, model, config)
    else:
        fn = {"ni": nearest_insertion, "fi": farthest_insertion, "bruteforce": brute_force}[args.solver]
        sol, cost = fn(instance)
    wall_ms = 1000.0 * (time.perf_counter() - t0)
    bad = validate_solution(sol, instance)
    if bad is not None:
        raise ValidationFailure(f"solver returned an infeasible solution: {bad}")
    if args.trace:
        _trace(instance, sol)
    record = {"routes": [list(r) for r in sol.routes], "cost": cost, "variant": instance.variant,
              "wall_ms": wall_ms, "instance": str(Path(args.instance).resolve())}
    if args.out:
        manifest.output(_write_json(args.out, record))
    else:
        print(json.dumps(record))
    return EXIT_OK


def cmd_bench(args, manifest: RunManifest) -> int:
    from .bench import MODEL_SOLVERS, eval_suite, plot_gaps
    from .infer import InferenceConfig
    model = None
    if any(s in MODEL_SOLVERS for s in args.solvers):
        if not args.checkpoint:
            raise UsageError("model solvers need --checkpoint")
        model = _load_model(args.checkpoint)
    report = eval_suite(model, args.variants, args.n, args.count, args.solvers, reference=args.reference,
                        seed=args.seed, config=InferenceConfig(seed=args.seed))
    for path in report.write(args.out):
        manifest.output(path)
    if args.plot:
        manifest.output(plot_gaps(report.summary, args.plot))
    for row in report.summary:
        print(f"{row['variant']:<9} {row['solver']:<10} cost {row['mean_cost']:.4f} "
              f"gap {row['gap_pct']:6.2f}% time {row['wall_s']:.2f}s")
    infeasible = sum(not r["feasible"] for r in report.rows)
    if infeasible:
        raise ValidationFailure(f"{infeasible} infeasible solutions in the report")
    return EXIT_OK


def _inspect_checkpoint(data: bytes) -> dict:
    from .policy import read_checkpoint
    header, arrays = read_checkpoint(data)
    params = sum(int(a.size) for a in arrays.values())
    return {"kind": "checkpoint", "version": header["version"], "config": header["config"],
            "params": params, "tensors": {k: list(v.shape) for k, v in arrays.items()},
            "meta": header["meta"], "sha256": header["sha256"]}


def _inspect_json(obj: dict, path: Path) -> dict:
    if "routes" in obj:
        src = obj.get("instance")
        if not src:
            raise ValidationFailure("solution file does not name its instance")
        instance = _read_instance(src)
        sol = Solution(obj["routes"], instance.name)
        bad = validate_solution(sol, instance)
        cost = solution_cost(sol, instance)
        return {"kind": "solution", "variant": instance.variant, "routes": len(sol.routes),
                "stored_cost": obj.get("cost"), "recomputed_cost": cost,
                "cost_matches": obj.get("cost") is not None and abs(cost - obj["cost"]) <= 1e-9,
                "feasible": bad is None, "violation": None if bad is None else str(bad)}
    inst = load_instance(path)
    d = build_distance_matrix(inst)
    return {"kind": "instance", "name": inst.name, "variant": inst.variant, "n": inst.n,
            "total_linehaul": float(inst.demands[inst.demands > 0].sum()),
            "backhauls": int((inst.demands < 0).sum()), "mean_depot_distance": float(d[0, 1:].mean()),
            "problems": validate_instance(inst)}


def cmd_inspect(args, manifest: RunManifest) -> int:
    from .policy import MAGIC
    path = Path(args.path)
    data = path.read_bytes()
    if data[:len(MAGIC)] == MAGIC:
        info = _inspect_checkpoint(data)
    elif path.suffix.lower() in (".vrp", ".txt"):
        inst = _read_instance(path)
        info = {"kind": "instance", "name": inst.name, "variant": inst.variant, "n": inst.n,
                "problems": validate_instance(inst)}
    else:
        try:
            obj = json.loads(data)
        except ValueError as exc:
            raise ValueError(f"{path}: not a checkpoint, instance or solution ({exc})") from None
        info = _inspect_json(obj, path)
    print(json.dumps(info, indent=1))
    if info["kind"] == "solution" and not (info["feasible"] and info["cost_matches"]):
        return EXIT_INFEASIBLE
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtvrp", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="torch intra-op threads (default: all cores; 1 is bit-deterministic)")
    common.add_argument("--manifest", default=None, help="manifest path (default derived from outputs)")
    common.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write seeded instance files")
    g.add_argument("--variant", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--capacity", type=float, default=None)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_generate)

    def model_args(q):
        q.add_argument("--embed-dim", type=int, default=128)
        q.add_argument("--layers", type=int, default=6)
        q.add_argument("--heads", type=int, default=8)
        q.add_argument("--ff-hidden", type=int, default=512)

    def train_args(q, lr, epochs):
        q.add_argument("--tasks", nargs="+", default=["CVRP", "VRPTW", "OVRP", "VRPB", "VRPL"])
        q.add_argument("--n", type=int, default=50)
        q.add_argument("--epochs", type=int, default=epochs)
        q.add_argument("--instances-per-epoch", type=int, default=10_000)
        q.add_argument("--batch-size", type=int, default=64)
        q.add_argument("--lr", type=float, default=lr)
        q.add_argument("--weight-decay", type=float, default=1e-6)
        q.add_argument("--out", default=None)

    t = sub.add_parser("train", parents=[common], help="multi-task REINFORCE training")
    train_args(t, 1e-4, 10_000)
    model_args(t)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", parents=[common], help="fine-tune a checkpoint on target variants")
    train_args(f, 1e-5, 200)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--mode", choices=["decoder", "decoder_only", "full"], default="decoder")
    f.set_defaults(func=cmd_finetune)

    s = sub.add_parser("solve", parents=[common], help="solve one instance file")
    s.add_argument("--instance", required=True, help="instance JSON or CVRPLIB .vrp file")
    s.add_argument("--solver", choices=["model", "ni", "fi", "bruteforce"], default="model")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--aug8", action="store_true")
    s.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    s.add_argument("--samples", type=int, default=1)
    s.add_argument("--trace", action="store_true", help="print the attribute state after every step to stderr")
    s.add_argument("--out", default=None, help="solution JSON path (default: stdout)")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", parents=[common], help="evaluate solvers on seeded instances")
    b.add_argument("--checkpoint", default=None)
    b.add_argument("--variants", nargs="+", default=["CVRP", "VRPTW", "OVRP", "VRPB", "VRPL"])
    b.add_argument("--n", type=int, default=50)
    b.add_argument("--count", type=int, default=5000)
    b.add_argument("--solvers", nargs="+", default=["ni", "fi", "greedy", "aug8"])
    b.add_argument("--reference", default="fi",
                   help="a solver name, or table:HGS / table:LKH3 / table:paper-table for published values")
    b.add_argument("--plot", default=None, help="also render gap bars to this image path")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect", parents=[common], help="summarize a checkpoint, instance or solution")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def _default_outputs(args) -> None:
    base = data_dir()
    stamp = f"{args.command}-seed{args.seed}"
    if args.command == "generate" and args.out is None:
        args.out = str(base / "instances" / f"{AttributeSet.from_name(args.variant).name}_n{args.n}")
    elif args.command in ("train", "finetune") and args.out is None:
        args.out = str(base / "checkpoints" / f"{stamp}.ckpt")
    elif args.command == "bench" and args.out is None:
        args.out = str(base / "reports" / stamp)
    if args.manifest is None:
        if args.command in ("generate", "bench"):
            args.manifest = str(Path(args.out) / "manifest.json")
        elif args.command in ("train", "finetune") or (args.command == "solve" and args.out):
            args.manifest = str(Path(args.out).with_suffix(".manifest.json"))
        else:
            args.manifest = str(base / "manifests" / f"{stamp}-{os.getpid()}.json")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        import torch
        torch.set_num_threads(args.threads)
    _default_outputs(args)
    manifest = RunManifest(args.command, args, argv)
    code = _run(args, manifest)
    try:
        manifest.write(args.manifest, code)
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_IO
    return code


def _run(args, manifest: RunManifest) -> int:
    from .baselines import InfeasibleInstance
    from .bench import CVRPLibError, MissingReference
    from .policy import CheckpointError
    try:
        return args.func(args, manifest)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationFailure, InfeasibleInstance) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, CheckpointError, CVRPLibError, json.JSONDecodeError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MissingReference, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # invariant breach
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
