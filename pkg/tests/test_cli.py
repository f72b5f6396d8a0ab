import json
import subprocess
import sys

import pytest
import yaml

from facelora.cli import RunConfig, derive_seed, resolve_config, run

TOY = """\
seed: 3
vit: {image_size: 28, patch_size: 7, d_model: 16, n_heads: 2, n_layers: 2}
train: {epochs: 2, batch_size: 8, base_lr: 1.0e-3, rank: 4, alpha: 4}
synth: {identities: 8, per_id: 4, heldout_images: 3, image_size: 28, pairs_per_fold: 4}
"""


@pytest.fixture
def toy(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "toy.yaml").write_text(TOY)
    return tmp_path


def _last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_empty_config_resolves_to_preset_defaults(tmp_path):
    (tmp_path / "empty.yaml").write_text("")
    cfg = resolve_config("train", tmp_path / "empty.yaml")
    t = cfg.train
    assert (t.rank, t.alpha, t.scaling_mode, t.margin, t.scale, t.base_lr, t.weight_decay) == (
        16, 16.0, "rank_stabilized", 0.3, 64.0, 1e-4, 0.05,
    )
    assert t.seed == derive_seed(0, "train")


def test_same_file_twice_same_snapshot(toy):
    a = resolve_config("train", toy / "toy.yaml").snapshot()
    assert a == resolve_config("train", toy / "toy.yaml").snapshot()
    # the snapshot itself resolves to the same config
    (toy / "snap.yaml").write_text(a)
    assert resolve_config("train", toy / "snap.yaml").snapshot() == a


def test_validate_print(toy, capsys):
    assert run(["validate", "--config", "toy.yaml", "--command-for", "synth", "--print"]) == 0
    printed = yaml.safe_load(capsys.readouterr().out)
    assert printed["train"]["rank"] == 4 and printed["command"] == "synth"


@pytest.mark.parametrize(
    "text,needle",
    [
        ("train:\n  rank: -1\n", "train.rank"),
        ("train:\n  epochs: 3\n  bogus: 1\n", ":3: unknown key train.bogus"),
        ("train:\n  rank: two\n", ":2: train.rank: expected an integer"),
        ("train:\n  scaling_mode: linear\n", "train.scaling_mode"),
        ("vit:\n  image_size: 30\n", "vit.image_size"),
        ("extras: 1\n", "unknown top-level key"),
        ("train: [1, 2]\n", "expected a mapping"),
        ("train: {rank: 4\n", "invalid YAML"),
        ("subset:\n  depth_mode: deepest\n", "subset.depth_mode"),
    ],
)
def test_config_errors_exit_2_and_name_the_field(tmp_path, capsys, text, needle):
    (tmp_path / "bad.yaml").write_text(text)
    assert run(["validate", "--config", str(tmp_path / "bad.yaml"), "--command-for", "synth"]) == 2
    assert needle in capsys.readouterr().err


def test_flag_errors_point_at_the_flag(toy, capsys):
    assert run(["synth", "--config", "toy.yaml", "--per-id", "0"]) == 2
    assert "--per-id" in capsys.readouterr().err


def test_unknown_command_and_missing_inputs(toy, capsys):
    assert run(["fly"]) == 2
    assert run(["train", "--config", "toy.yaml"]) == 2
    assert "paths.manifest" in capsys.readouterr().err
    assert run(["train", "--config", "toy.yaml", "--manifest", "nope.csv"]) == 2
    assert "does not exist" in capsys.readouterr().err


def test_runtime_failure_exits_1(toy, capsys):
    (toy / "junk.npz").write_bytes(b"junk")
    (toy / "pairs.csv").write_text("pathA,pathB,label\na,b,genuine\n")
    assert run(["evaluate", "--weights", "junk.npz", "--protocol", "pairs.csv", "--out", "ev"]) == 1
    assert "evaluate failed" in capsys.readouterr().err


def test_report_bias_baseline_row(capsys):
    assert run(["report-bias", "--accuracies", "75.25,75.68,84.75,78.58"]) == 0
    assert capsys.readouterr().out.strip() == "avg 78.57  STD 4.38  SER 1.62"
    assert run(["report-bias", "--accuracies", "75,x"]) == 2
    assert run(["report-bias"]) == 2


def test_seed_chain():
    assert derive_seed(0, "train") == derive_seed(0, "train")
    assert len({derive_seed(0, n) for n in ("train", "subset", "synth", "pairs", "backbone")}) == 5
    assert derive_seed(0, "train") != derive_seed(1, "train")
    assert 0 <= derive_seed(7, "x") < 2**32


def test_run_root_env(toy, monkeypatch, capsys):
    monkeypatch.setenv("FACELORA_RUN_ROOT", str(toy / "root"))
    assert run(["synth", "--config", "toy.yaml"]) == 0
    out = _last_json(capsys)["run_dir"]
    assert out.startswith(str(toy / "root" / "synth-"))
    assert (toy / "root").exists() and yaml.safe_load(open(f"{out}/resolved_config.yaml"))["command"] == "synth"


def test_full_pipeline(toy, capsys):
    assert run(["synth", "--config", "toy.yaml", "--out", "syn"]) == 0
    syn = _last_json(capsys)
    assert syn["images"] == 32 and syn["pairs"] == 80
    assert run(["train", "--config", "toy.yaml", "--manifest", "syn/manifest.csv", "--out", "tr"]) == 0
    summary = _last_json(capsys)
    assert summary["steps"] == 8
    assert (toy / "tr" / "resolved_config.yaml").exists() and (toy / "tr" / "base.npz").exists()
    assert run(["merge", "--checkpoint", "tr/adapters.npz", "--out", "mg"]) == 0
    capsys.readouterr()
    args = ["--protocol", "syn/pairs.csv", "--manifest", "syn/eval_manifest.csv"]
    assert run(["evaluate", "--weights", "mg/merged.npz", *args, "--out", "ev"]) == 0
    report = json.loads((toy / "ev" / "report.json").read_text())
    assert 0 <= report["accuracy"] <= 100 and report["bias"] is not None
    capsys.readouterr()
    assert run(["report-bias", "--report", "ev/report.json"]) == 0
    assert capsys.readouterr().out.startswith("avg ")
    assert run(["subset", "--manifest", "syn/manifest.csv", "--width", "3", "--out", "sub"]) == 0
    assert _last_json(capsys)["identities"] == 3

    # the snapshot alone reproduces the run bit for bit
    assert run(["train", "--config", "tr/resolved_config.yaml", "--out", "tr2"]) == 0
    for name in ("adapters.npz", "checkpoint_002.npz", "base.npz"):
        assert (toy / "tr" / name).read_bytes() == (toy / "tr2" / name).read_bytes()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "facelora", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("facelora ")


def test_run_config_snapshot_is_plain_yaml():
    snap = yaml.safe_load(RunConfig(command="train").snapshot())
    assert snap["subset"]["depth_mode"] == "random_identities"
    assert snap["train"]["betas"] == [0.9, 0.999]
