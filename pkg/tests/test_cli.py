import json
import subprocess
import sys

import pytest

from pestlpn.cli import EXIT_CODES, build_parser, run

from conftest import mini_config

SUBCOMMANDS = ["fixture", "scan", "train", "eval", "classify", "recommend", "export-protos"]


def error_of(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def write_run_config(path, **training):
    params = dict(meta_episodes=2, epochs_per_episode=2, k_range=[2, 3], n_range=[1, 2],
                  query_count=3, seed=0, augment=False)
    params.update(training)
    path.write_text(json.dumps({"backbone": mini_config().to_dict(), "training": params}))
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["fixture", "--out", str(root / "data"), "--classes", "4", "--per-class", "8",
                "--size", "16", "--seed", "1"]) == 0
    write_run_config(root / "run.json")
    assert run(["train", "--config", str(root / "run.json"), "--data", str(root / "data"),
                "--out", str(root / "model")]) == 0
    return root


def test_fixture_then_scan(tmp_path, capsys):
    assert run(["fixture", "--out", str(tmp_path / "d"), "--classes", "5", "--per-class", "30",
                "--size", "12"]) == 0
    capsys.readouterr()
    assert run(["scan", "--root", str(tmp_path / "d"), "--out", str(tmp_path / "i.csv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "images: 150"
    assert "fixture/pest_00\t30" in out
    assert (tmp_path / "i.csv").read_text().count("\n") == 151


def test_recommend_chlorpyrifos(capsys):
    code = run(["recommend", "--crop", "sugarcane", "--pest", "Cutting Weevil", "--stage",
                "early_growth", "--condition", "high_humidity"])
    assert code == 0
    out = capsys.readouterr().out
    assert "recommendation: Mild insecticide (e.g., Chlorpyrifos)" in out
    assert "status: match" in out and "caveat:" in out


def test_recommend_no_rule(capsys):
    code = run(["recommend", "--crop", "wheat", "--pest", "Rice Bug", "--stage", "vegetative",
                "--condition", "dry"])
    assert code == EXIT_CODES["no_rule"]
    assert error_of(capsys)["error"] == "no_rule"


def test_unknown_flag_is_usage_error(capsys):
    assert run(["recommend", "--crop", "wheat", "--pest", "x", "--bogus"]) == 2
    err = error_of(capsys)
    assert err["error"] == "usage" and err["exit_code"] == 2


def test_unknown_condition_is_config_error(capsys):
    code = run(["recommend", "--crop", "wheat", "--pest", "Termites", "--condition", "foggy"])
    assert code == EXIT_CODES["config"]
    error_of(capsys)


def test_missing_files(tmp_path, capsys):
    assert run(["scan", "--root", str(tmp_path / "none")]) == EXIT_CODES["missing_file"]
    error_of(capsys)
    assert run(["train", "--config", str(tmp_path / "none.json"), "--data", str(tmp_path),
                "--out", str(tmp_path / "o")]) == EXIT_CODES["missing_file"]
    error_of(capsys)
    assert not (tmp_path / "o").exists()


def test_bad_config_is_config_error(tmp_path, capsys):
    (tmp_path / "run.json").write_text('{"training": {"learning_rate": -1}}')
    code = run(["train", "--config", str(tmp_path / "run.json"), "--data", str(tmp_path),
                "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["config"]
    error_of(capsys)


def test_fixture_collision_is_data_error(tmp_path, capsys):
    args = ["fixture", "--out", str(tmp_path), "--classes", "1", "--per-class", "1", "--size", "8"]
    assert run(args) == 0
    assert run(args) == EXIT_CODES["data"]
    error_of(capsys)


def test_corrupt_checkpoint_exit_code(tmp_path, capsys):
    (tmp_path / "bad.pt").write_bytes(b"nope")
    (tmp_path / "img.png").write_bytes(b"")
    code = run(["export-protos", "--checkpoint", str(tmp_path / "bad.pt"), "--supports",
                str(tmp_path), "--out", str(tmp_path / "p.txt")])
    assert code == EXIT_CODES["checkpoint"]
    error_of(capsys)


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_help_exits_zero_and_lists_flags(command, capsys):
    assert run([command, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
    assert "exit codes" in text


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "pestlpn.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    assert all(c in out for c in SUBCOMMANDS)


def test_train_outputs(small_run):
    assert (small_run / "model" / "checkpoint.pt").is_file()
    log = (small_run / "model" / "training_log.csv").read_text().splitlines()
    assert log[0] == "episode,epoch,loss,k,n,seconds"
    assert len(log) == 1 + 2 * 2


def test_train_seed_twice_identical_checkpoints(small_run, tmp_path):
    for name in ("a", "b"):
        assert run(["train", "--config", str(small_run / "run.json"), "--data",
                    str(small_run / "data"), "--out", str(tmp_path / name), "--seed", "7"]) == 0
    assert (tmp_path / "a" / "checkpoint.pt").read_bytes() == \
        (tmp_path / "b" / "checkpoint.pt").read_bytes()


def test_eval_writes_report(small_run, tmp_path, capsys):
    ckpt = str(small_run / "model" / "checkpoint.pt")
    code = run(["eval", "--checkpoint", ckpt, "--checkpoint", ckpt, "--name", "m1", "--name",
                "m2", "--data", str(small_run / "data"), "--out", str(tmp_path / "r")])
    assert code == 0
    out = capsys.readouterr().out
    assert "m1\t5-shot\taccuracy" in out and "m1 vs m2\t1-shot" in out
    names = sorted(p.name for p in (tmp_path / "r").iterdir())
    assert names == ["accuracy_table.csv", "metrics.csv", "recall_precision_series.csv",
                     "significance.csv"]
    # identical models: every paired difference is zero
    sig = (tmp_path / "r" / "significance.csv").read_text().splitlines()
    assert len(sig) == 4 and all(",1.0,9," in row for row in sig[1:])


def test_export_protos_and_classify(small_run, tmp_path, capsys):
    ckpt = str(small_run / "model" / "checkpoint.pt")
    supports = small_run / "data" / "fixture"
    assert run(["export-protos", "--checkpoint", ckpt, "--supports", str(supports), "--out",
                str(tmp_path / "p.txt")]) == 0
    assert (tmp_path / "p.txt").read_text().startswith("protoset v1 4 16\n")
    image = str(supports / "pest_02" / "000.png")
    capsys.readouterr()
    assert run(["classify", "--checkpoint", ckpt, "--image", image, "--protoset",
                str(tmp_path / "p.txt")]) == 0
    via_file = capsys.readouterr().out
    assert run(["classify", "--checkpoint", ckpt, "--image", image, "--supports",
                str(supports)]) == 0
    via_dir = capsys.readouterr().out
    assert via_file.splitlines()[-1] == via_dir.splitlines()[-1]
    assert via_file.splitlines()[-1].startswith("prediction: pest_")
    probs = [float(line.split("\t")[1]) for line in via_file.splitlines()[:4]]
    assert abs(sum(probs) - 1) < 1e-5


def test_classify_with_recommendation(small_run, tmp_path, capsys):
    ckpt = str(small_run / "model" / "checkpoint.pt")
    supports = tmp_path / "s"
    for i, pest in enumerate(["Cutworms", "Termites"]):
        (supports / pest).mkdir(parents=True)
        src = small_run / "data" / "fixture" / f"pest_0{i}"
        for f in sorted(src.iterdir())[:3]:
            (supports / pest / f.name).write_bytes(f.read_bytes())
    image = str(small_run / "data" / "fixture" / "pest_01" / "005.png")
    code = run(["classify", "--checkpoint", ckpt, "--image", image, "--supports", str(supports),
                "--crop", "wheat", "--stage", "vegetative", "--condition", "dry_soil"])
    out = capsys.readouterr().out
    assert code == 0
    assert "recommendation:" in out
    # a single support class forces the prediction; it has no rule for the crop
    only = tmp_path / "only" / "Rice Bug"
    only.mkdir(parents=True)
    (only / "000.png").write_bytes((supports / "Termites" / "000.png").read_bytes())
    code = run(["classify", "--checkpoint", ckpt, "--image", image, "--supports",
                str(tmp_path / "only"), "--crop", "wheat"])
    assert code == EXIT_CODES["no_rule"]
    captured = capsys.readouterr()
    assert "prediction: Rice Bug" in captured.out
    assert json.loads(captured.err.strip())["error"] == "no_rule"
