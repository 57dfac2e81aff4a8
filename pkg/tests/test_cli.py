import json
import subprocess
import sys

import numpy as np
import pytest

from suslab import checkpoint, packed, sparsity
from suslab.cli import main, read_manifest

SMALL = """
[dataset]
kind = synthetic_digits
size = 1600

[model]
dims = 64,32,16,10

[attack]
variant = {variant}
phase1_epochs = 4
phase2_epochs = 4

[victim]
finetune_epochs = {ft}
"""


def write_config(tmp_path, variant="sus-f", ft=1, name="run.ini"):
    path = tmp_path / name
    path.write_text(SMALL.format(variant=variant, ft=ft))
    return path


@pytest.fixture(scope="module")
def sus_f_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_f")
    cfg = write_config(tmp)
    assert main(["attack", "--config", str(cfg), "--out", str(tmp / "run")]) == 0
    return cfg, tmp / "run"


def test_attack_writes_outputs(sus_f_run):
    _, out = sus_f_run
    for name in ("initial.ckpt", "backdoored.ckpt", "released.ckpt", "config.ini", "manifest.txt"):
        assert (out / name).exists()
    man = read_manifest(out / "manifest.txt")
    assert man["status"] == "complete" and man["variant"] == "SUS_F"
    assert checkpoint.load(out / "released.ckpt").config_hash == man["config_hash"]


def test_attack_is_deterministic(sus_f_run, tmp_path):
    cfg, out = sus_f_run
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    for name in ("initial.ckpt", "backdoored.ckpt", "released.ckpt"):
        assert (tmp_path / "again" / name).read_bytes() == (out / name).read_bytes()


def test_sparsify_and_packed_dumps(sus_f_run, tmp_path, capsys):
    _, out = sus_f_run
    assert main(["sparsify", str(out / "released.ckpt"), "--out", str(tmp_path)]) == 0
    ck = checkpoint.load(tmp_path / "sparse.ckpt")
    assert ck.phase == "sparse"
    for k, (layer, m) in enumerate(zip(ck.net.layers, ck.masks)):
        assert sparsity.is_24_mask(m)
        pk = packed.load(tmp_path / f"layer{k}.p24")
        assert packed.unpack(pk).tobytes() == layer.weight.tobytes()


def test_sparsify_sus_r_logs_identity(tmp_path, capsys):
    cfg = write_config(tmp_path, "sus-r")
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    assert main(["sparsify", str(tmp_path / "r" / "released.ckpt"), "--permute"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("layer")]
    assert len(lines) == 3
    assert all("identity permutation" in l and "non-identity" not in l for l in lines)
    assert all("mag_r=1.0000" in l for l in lines)


def test_eval_json_and_report(sus_f_run, tmp_path, capsys):
    cfg, out = sus_f_run
    assert main(["sparsify", str(out / "released.ckpt"), "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert main(["eval", str(out / "released.ckpt"), str(tmp_path / "sparse.ckpt"),
                 "--config", str(cfg), "--json"]) == 0
    records = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [r["label"] for r in records] == ["released", "sparse"]
    assert records[1]["asr"] > records[0]["asr"]
    assert len(records[1]["per_layer_mag_r"]) == 3
    (tmp_path / "records.jsonl").write_text("\n".join(json.dumps(r) for r in records))
    assert main(["report", str(tmp_path / "records.jsonl"), "--tsv"]) == 0
    tsv = capsys.readouterr().out
    (tmp_path / "records.tsv").write_text(tsv)
    assert main(["report", str(tmp_path / "records.tsv")]) == 0
    table = capsys.readouterr().out
    assert "released" in table and "sparse" in table and "mag_r" in table


def test_finetune_zero_epochs_matches_eval(sus_f_run, tmp_path, capsys):
    _, out = sus_f_run
    cfg = write_config(tmp_path, ft=0)
    assert main(["sparsify", str(out / "released.ckpt"), "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert main(["finetune", str(tmp_path / "sparse.ckpt"), "--config", str(cfg), "--json"]) == 0
    tuned = json.loads(capsys.readouterr().out)
    assert main(["eval", str(tmp_path / "sparse.ckpt"), "--config", str(cfg), "--json"]) == 0
    base = json.loads(capsys.readouterr().out)
    assert {k: tuned[k] for k in ("acc", "asr", "mag_r")} == {k: base[k] for k in ("acc", "asr", "mag_r")}
    a = checkpoint.load(tmp_path / "finetuned.ckpt")
    b = checkpoint.load(tmp_path / "sparse.ckpt")
    assert all(x.weight.tobytes() == y.weight.tobytes() for x, y in zip(a.net.layers, b.net.layers))


def test_finetune_needs_sparse_checkpoint(sus_f_run, capsys):
    cfg, out = sus_f_run
    assert main(["finetune", str(out / "released.ckpt"), "--config", str(cfg)]) == 2


def test_missing_required_field_exit_1(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(SMALL.format(variant="sus-f", ft=1).replace("dims = 64,32,16,10\n", ""))
    assert main(["attack", "--config", str(path), "--out", str(tmp_path / "x")]) == 1
    assert "model.dims" in capsys.readouterr().err


def test_mismatched_dims_exit_1(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(SMALL.format(variant="sus-f", ft=1).replace("64,32,16,10", "64,32,16,7"))
    assert main(["attack", "--config", str(path), "--out", str(tmp_path / "x")]) == 1
    assert "model.dims" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["attack"]) == 1
    assert main(["sparsify", "x.ckpt", "--bogus"]) == 1


def test_runtime_failure_exit_2(tmp_path, capsys):
    assert main(["sparsify", str(tmp_path / "missing.ckpt")]) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert main(["sparsify", str(tmp_path / "junk.ckpt")]) == 2


def test_module_entry_point_and_thread_env(tmp_path):
    env = {"SUS_LAB_THREADS": "1", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "suslab", "report", str(tmp_path / "none.tsv")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 2
    proc = subprocess.run([sys.executable, "-m", "suslab", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "attack" in proc.stdout


def test_variant_and_seed_overrides(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["attack", "--config", str(cfg), "--variant", "sus-r", "--seed", "3",
                 "--out", str(tmp_path / "o")]) == 0
    man = read_manifest(tmp_path / "o" / "manifest.txt")
    assert man["variant"] == "SUS_R" and man["train_seed"] == "3"
    ck = checkpoint.load(tmp_path / "o" / "released.ckpt")
    assert np.isfinite(ck.net.layers[0].weight).all()
