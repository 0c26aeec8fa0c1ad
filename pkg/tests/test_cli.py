import json

import pytest

from mtvrp.cli import main
from mtvrp.core import load_instance
from mtvrp.policy import ModelConfig, init_params, load_checkpoint, encoder_checksum, save_checkpoint


@pytest.fixture(autouse=True)
def data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("MTVRP_DATA_DIR", str(tmp_path / "data"))
    return tmp_path / "data"


def _gen(tmp_path, variant="VRPBTW", n=6, count=2, seed=7, out="inst"):
    out = tmp_path / out
    assert main(["generate", "--variant", variant, "--n", str(n), "--count", str(count),
                 "--seed", str(seed), "--out", str(out), "--threads", "1"]) == 0
    return sorted(out.glob("*.json"))


def test_generate_writes_files_and_manifest(tmp_path):
    files = _gen(tmp_path, "VRPTW", 20, 10)
    instances = [f for f in files if f.name != "manifest.json"]
    assert len(instances) == 10
    assert load_instance(instances[0]).variant == "VRPTW"
    manifest = json.loads((tmp_path / "inst" / "manifest.json").read_text())
    assert manifest["command"] == "generate" and manifest["exit_code"] == 0
    assert manifest["seeds"] == {"root": 7} and len(manifest["outputs"]) == 10


def test_generate_is_reproducible_from_manifest(tmp_path):
    _gen(tmp_path, out="a")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    argv = [str(tmp_path / "b") if a == str(tmp_path / "a") else a for a in manifest["argv"]]
    assert main(argv) == 0
    for f in (tmp_path / "a").glob("VRPBTW*.json"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_default_output_dir_uses_env(data_dir):
    assert main(["generate", "--variant", "CVRP", "--n", "5"]) == 0
    assert (data_dir / "instances" / "CVRP_n5" / "manifest.json").exists()


def test_usage_errors(tmp_path, capsys):
    inst = [f for f in _gen(tmp_path) if f.name != "manifest.json"][0]
    assert main(["solve", "--instance", str(inst), "--solver", "ni", "--aug8"]) == 2
    assert "conflicts" in capsys.readouterr().err
    assert main(["solve", "--instance", str(inst), "--bogus"]) == 2
    assert main(["frobnicate"]) == 2
    big = [f for f in _gen(tmp_path, "CVRP", 12, 1, out="big") if f.name != "manifest.json"][0]
    assert main(["solve", "--instance", str(big), "--solver", "bruteforce"]) == 2
    assert "n <= 9" in capsys.readouterr().err


def test_solve_and_inspect_solution(tmp_path, capsys):
    inst = [f for f in _gen(tmp_path) if f.name != "manifest.json"][0]
    out = tmp_path / "sol.json"
    assert main(["solve", "--instance", str(inst), "--solver", "bruteforce", "--out", str(out)]) == 0
    sol = json.loads(out.read_text())
    assert set(sol) >= {"routes", "cost", "variant", "wall_ms"}
    assert (tmp_path / "sol.manifest.json").exists()
    capsys.readouterr()
    assert main(["inspect", str(out)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["cost_matches"] and info["feasible"]
    sol["cost"] += 1.0
    out.write_text(json.dumps(sol))
    assert main(["inspect", str(out)]) == 3


def test_inspect_checkpoint_and_corruption(tmp_path, capsys):
    path = tmp_path / "d.ckpt"
    save_checkpoint(init_params(ModelConfig(), 0), path)
    assert main(["inspect", str(path)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["params"] == 1_269_760
    (tmp_path / "bad.ckpt").write_bytes(path.read_bytes()[:500])
    assert main(["inspect", str(tmp_path / "bad.ckpt")]) == 4
    assert "offset" in capsys.readouterr().err
    assert main(["inspect", str(tmp_path / "missing.ckpt")]) == 4


def test_inspect_instance(tmp_path, capsys):
    inst = [f for f in _gen(tmp_path, "OVRPL") if f.name != "manifest.json"][0]
    capsys.readouterr()
    assert main(["inspect", str(inst)]) == 0
    assert json.loads(capsys.readouterr().out)["variant"] == "OVRPL"


def test_train_then_finetune_decoder_keeps_encoder(tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    tiny = ["--embed-dim", "16", "--layers", "1", "--heads", "2", "--ff-hidden", "32"]
    assert main(["train", "--n", "6", "--epochs", "1", "--instances-per-epoch", "8", "--batch-size", "4",
                 "--out", str(ckpt), "--threads", "1"] + tiny) == 0
    before = encoder_checksum(load_checkpoint(ckpt)[0])
    ft = tmp_path / "ft.ckpt"
    capsys.readouterr()
    assert main(["finetune", "--checkpoint", str(ckpt), "--mode", "decoder", "--tasks", "OVRPLTW", "--n", "6",
                 "--epochs", "1", "--instances-per-epoch", "8", "--batch-size", "4", "--out", str(ft)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["encoder_before"] == printed["encoder_after"]
    assert encoder_checksum(load_checkpoint(ft)[0]) == before
    inst = [f for f in _gen(tmp_path, "OVRPLTW") if f.name != "manifest.json"][0]
    assert main(["solve", "--instance", str(inst), "--checkpoint", str(ft), "--aug8"]) == 0
    assert main(["solve", "--instance", str(inst), "--checkpoint", str(ft), "--mode", "sample",
                 "--samples", "4"]) == 0


def test_bench_command(tmp_path):
    out = tmp_path / "rep"
    assert main(["bench", "--variants", "CVRP", "VRPL", "--n", "6", "--count", "2", "--solvers", "ni", "fi",
                 "bruteforce", "--reference", "bruteforce", "--out", str(out), "--plot",
                 str(tmp_path / "g.png")]) == 0
    assert (out / "summary.csv").exists() and (out / "manifest.json").exists()
    assert (tmp_path / "g.png").exists()
    assert main(["bench", "--solvers", "greedy", "--n", "6", "--count", "1"]) == 2
