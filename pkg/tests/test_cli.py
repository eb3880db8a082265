import json

import pytest

from stvad.cli import build_parser, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, synth_dir):
    """Synthetic data plus one small trained checkpoint, shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    train_cfg = root / "train.json"
    train_cfg.write_text(json.dumps({
        "epochs": 6, "batch_size": 4, "seed": 3, "top_patches": 6, "context_len": 3,
    }))
    run = root / "run"
    code = main([
        "train", "--manifest", str(synth_dir / "train_manifest.json"),
        "--config", str(train_cfg), "--out", str(run),
    ])
    assert code == 0
    return {"root": root, "synth": synth_dir, "ckpt": run / "checkpoint.stpc", "train_cfg": train_cfg}


def test_every_subcommand_has_help(capsys):
    parser = build_parser()
    for command in ("gen-synth", "train", "infer", "localize", "evaluate", "grad-check", "print-defaults"):
        with pytest.raises(SystemExit) as exc:
            parser.parse_args([command, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--help" in out


def test_usage_error_exits_one():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["train"])  # missing required flags
    assert exc.value.code == 1


def test_unknown_command_exits_one():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["frobnicate"])
    assert exc.value.code == 1


def test_print_defaults_carries_stock_values(capsys):
    assert main(["print-defaults"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["train"]["learning_rate"] == 1e-4
    assert doc["train"]["batch_size"] == 64
    assert doc["train"]["max_video_len"] == 256
    assert doc["train"]["top_patches"] == 12
    assert doc["train"]["context_len"] == 8
    assert doc["train"]["alpha"] == 0.9
    assert doc["train"]["beta"] == 2.0
    assert doc["localize"]["scales"] == [[32, 32], [80, 48]]
    assert doc["loss_weights"]["k_divisor"] == 16


def test_gen_synth_seed_override_and_determinism(tmp_path, capsys):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({
        "train_videos": 4, "test_videos": 2, "t_range": [8, 10], "d": 6, "h": 3, "w": 3,
        "c": 2, "extent_range": [1, 2], "span_range": [3, 5],
    }))
    assert main(["gen-synth", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-synth", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "streams" / "train_0000.stpk").read_bytes()
    b = (tmp_path / "b" / "streams" / "train_0000.stpk").read_bytes()
    assert a == b


def test_gen_synth_rejects_unknown_field(tmp_path, capsys):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "unknown" in capsys.readouterr().err


def test_missing_manifest_exits_two(tmp_path, capsys):
    assert main(["train", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_infer_idempotent(workspace, tmp_path, capsys):
    manifest = str(workspace["synth"] / "test_manifest.json")
    ckpt = str(workspace["ckpt"])
    out1, out2 = tmp_path / "i1", tmp_path / "i2"
    assert main(["infer", "--manifest", manifest, "--checkpoint", ckpt, "--out", str(out1)]) == 0
    assert main(["infer", "--manifest", manifest, "--checkpoint", ckpt, "--out", str(out2)]) == 0
    assert (out1 / "scores.csv").read_bytes() == (out2 / "scores.csv").read_bytes()
    lines = (out1 / "scores.csv").read_text().splitlines()
    assert lines[0] == "video_id,frame,score"
    assert len(lines) > 1


def test_full_pipeline_round_trip(workspace, tmp_path, capsys):
    manifest = str(workspace["synth"] / "test_manifest.json")
    ckpt = str(workspace["ckpt"])
    queries = str(workspace["synth"] / "queries.json")
    scores_dir = tmp_path / "scores"
    boxes_dir = tmp_path / "boxes"
    eval_dir = tmp_path / "eval"
    assert main(["infer", "--manifest", manifest, "--checkpoint", ckpt, "--out", str(scores_dir)]) == 0
    assert main([
        "localize", "--manifest", manifest, "--queries", queries,
        "--scales", "44x44", "--out", str(boxes_dir), "--save-heatmaps",
    ]) == 0
    assert main([
        "evaluate", "--manifest", manifest, "--scores", str(scores_dir / "scores.csv"),
        "--boxes", str(boxes_dir / "boxes.csv"), "--out", str(eval_dir), "--roc-csv",
    ]) == 0
    report = json.loads((eval_dir / "report.json").read_text())
    assert 0.0 <= report["auc"] <= 1.0
    assert report["tiou"] is not None and 0.0 <= report["tiou"] <= 1.0
    assert (eval_dir / "roc.csv").exists()
    assert any((boxes_dir / "heatmaps").iterdir())
    out = capsys.readouterr().out
    assert "frame AUC" in out and "TIoU" in out


def test_localize_config_file_with_flag_override(workspace, tmp_path):
    manifest = str(workspace["synth"] / "test_manifest.json")
    queries = str(workspace["synth"] / "queries.json")
    cfg = tmp_path / "loc.json"
    cfg.write_text(json.dumps({"scales": [[44, 44]], "threshold": 0.9}))
    out_a = tmp_path / "a"
    assert main(["localize", "--manifest", manifest, "--queries", queries,
                 "--config", str(cfg), "--out", str(out_a)]) == 0
    # flag overrides the file threshold; a looser one can only add boxes
    out_b = tmp_path / "b"
    assert main(["localize", "--manifest", manifest, "--queries", queries,
                 "--config", str(cfg), "--threshold", "0.3", "--out", str(out_b)]) == 0
    n_a = len((out_a / "boxes.csv").read_text().splitlines())
    n_b = len((out_b / "boxes.csv").read_text().splitlines())
    assert n_b >= n_a


def test_localize_with_checkpoint_trigger(workspace, tmp_path):
    manifest = str(workspace["synth"] / "test_manifest.json")
    queries = str(workspace["synth"] / "queries.json")
    out_all = tmp_path / "all"
    out_trig = tmp_path / "trig"
    assert main(["localize", "--manifest", manifest, "--queries", queries,
                 "--scales", "44x44", "--out", str(out_all)]) == 0
    assert main(["localize", "--manifest", manifest, "--queries", queries,
                 "--scales", "44x44", "--out", str(out_trig),
                 "--checkpoint", str(workspace["ckpt"]), "--trigger", "0.99"]) == 0
    n_all = len((out_all / "boxes.csv").read_text().splitlines())
    n_trig = len((out_trig / "boxes.csv").read_text().splitlines())
    assert n_trig <= n_all


def test_evaluate_rejects_mismatched_ids(workspace, tmp_path, capsys):
    manifest = str(workspace["synth"] / "test_manifest.json")
    bad = tmp_path / "scores.csv"
    bad.write_text("video_id,frame,score\nghost,0,0.5\n")
    assert main(["evaluate", "--manifest", manifest, "--scores", str(bad),
                 "--out", str(tmp_path / "e")]) == 2
    assert "disagree" in capsys.readouterr().err


def test_evaluate_rejects_duplicate_score_rows(workspace, tmp_path, capsys):
    manifest = str(workspace["synth"] / "test_manifest.json")
    bad = tmp_path / "scores.csv"
    bad.write_text("video_id,frame,score\ntest_0000,0,0.5\ntest_0000,0,0.6\n")
    assert main(["evaluate", "--manifest", manifest, "--scores", str(bad),
                 "--out", str(tmp_path / "e")]) == 2
    assert "duplicate" in capsys.readouterr().err


def test_evaluate_rejects_incomplete_frames(workspace, tmp_path, capsys):
    manifest_path = workspace["synth"] / "test_manifest.json"
    doc = json.loads(manifest_path.read_text())
    ids = [e["video_id"] for e in doc["entries"]]
    rows = ["video_id,frame,score"] + [f"{vid},0,0.5" for vid in ids]
    bad = tmp_path / "scores.csv"
    bad.write_text("\n".join(rows) + "\n")
    assert main(["evaluate", "--manifest", str(manifest_path), "--scores", str(bad),
                 "--out", str(tmp_path / "e")]) == 2
    assert "cover frames" in capsys.readouterr().err


def test_grad_check_cli_passes(capsys):
    assert main(["grad-check", "--instances", "2", "--seed", "5"]) == 0
    out = capsys.readouterr().out
    assert "gradient audit PASS" in out


def test_grad_check_cli_fails_at_unreachable_tolerance(capsys):
    assert main(["grad-check", "--instances", "1", "--seed", "5", "--tolerance", "1e-14"]) == 3
    assert "gradient audit FAIL" in capsys.readouterr().out


def test_train_flag_overrides_config(workspace, tmp_path, capsys):
    manifest = str(workspace["synth"] / "train_manifest.json")
    out = tmp_path / "r"
    assert main(["train", "--manifest", manifest, "--config", str(workspace["train_cfg"]),
                 "--epochs", "2", "--out", str(out)]) == 0
    log = (out / "loss_log.csv").read_text().splitlines()
    assert len(log) == 3  # header + 2 epochs
