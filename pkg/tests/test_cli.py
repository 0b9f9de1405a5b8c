"""Command-line dispatch: exit codes, determinism, end-to-end runs."""

import csv
import filecmp
import os

import numpy as np
import pytest

from ddmc.cli import _parse_grid, main
from ddmc.errors import ValidationError

FAST = ["--set", "data.size=32", "--set", "data.n_train=4",
        "--set", "data.n_val=2", "--set", "data.n_test=2",
        "--set", "data.n_structures=3",
        "--set", "train.max_epochs=2", "--set", "train.patience=2",
        "--set", "train.batch_size=2",
        "--set", "model.base_channels=4", "--set", "model.depth=2",
        "--set", "model.reg_channels=4,4", "--set", "model.reg_fc_hidden=8"]


def run(argv):
    return main([str(a) for a in argv])


def dirs_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(
        a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(dirs_equal(os.path.join(a, d), os.path.join(b, d))
               for d in cmp.common_dirs)


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--help"])
    assert exc.value.code == 0
    assert "gen-data" in capsys.readouterr().out


def test_subcommand_help_exits_zero():
    for cmd in ("gen-data", "make-masks", "train", "eval", "ablate",
                "render"):
        with pytest.raises(SystemExit) as exc:
            run([cmd, "--help"])
        assert exc.value.code == 0


def test_print_defaults(capsys):
    assert run(["--print-defaults"]) == 0
    out = capsys.readouterr().out
    assert "[run]" in out and "seed = 0" in out


def test_no_command_is_usage_error(capsys):
    assert run([]) == 1
    assert capsys.readouterr().err.startswith("ddmc: usage:")


def test_unknown_command_is_usage_error(capsys):
    assert run(["frobnicate", "--out", "/tmp/x"]) == 1
    assert "ddmc: usage:" in capsys.readouterr().err


def test_bad_override_is_validation_error(tmp_path, capsys):
    rc = run(["gen-data", "--out", tmp_path / "d",
              "--set", "data.bogus=1"])
    assert rc == 2
    assert capsys.readouterr().err.startswith("ddmc: validation:")


def test_missing_config_file_is_io_error(tmp_path, capsys):
    rc = run(["gen-data", "--out", tmp_path / "d",
              "--config", tmp_path / "nope.cfg"])
    assert rc == 3
    assert capsys.readouterr().err.startswith("ddmc: io:")


def test_gen_data_deterministic_and_no_clobber(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["gen-data", "--out", out] + FAST) == 0
    assert dirs_equal(str(a), str(b))
    assert run(["gen-data", "--out", a, "--no-clobber"] + FAST) == 2
    assert "refus" in capsys.readouterr().err


def test_gen_data_seed_changes_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["gen-data", "--out", a] + FAST) == 0
    assert run(["gen-data", "--out", b, "--seed", 3] + FAST) == 0
    assert not dirs_equal(str(a), str(b))


def test_make_masks(tmp_path):
    out = tmp_path / "masks"
    assert run(["make-masks", "--out", out, "--height", 64,
                "--accel", 4, "--accel", 8] + FAST) == 0
    for r, n in ((4, 16), (8, 8)):
        path = out / ("mask_h64_r%d.txt" % r)
        rows = path.read_text().splitlines()[1].split()
        assert len(rows) == n
    assert run(["make-masks", "--out", out / "bad", "--height", 16,
                "--accel", 8] + FAST) == 2


def test_grid_parsing():
    assert _parse_grid(["dual,fused,4x"]) == [("fused", "dual", 4)]
    assert _parse_grid(["image,single,8x;dual,concat,4x"]) == [
        ("single", "image", 8), ("concat", "dual", 4)]
    for bad in ("dual,fused", "dual,fused,x4", "tri,fused,4x",
                "dual,mixed,4x", "dual,fused,0x"):
        with pytest.raises(ValidationError):
            _parse_grid([bad])


def test_out_of_order_train_names_missing_stage(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(["gen-data", "--out", data] + FAST) == 0
    rc = run(["train", "--data", data, "--out", tmp_path / "run",
              "--stage", "reconstruction"] + FAST)
    assert rc == 2
    err = capsys.readouterr().err
    assert "synthesis" in err


def test_train_eval_render_ablate_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    run_dir = tmp_path / "run"
    assert run(["gen-data", "--out", data] + FAST) == 0

    single = FAST + ["--set", "train.contrast_mode=single"]
    assert run(["train", "--data", data, "--out", run_dir] + single) == 0
    assert (run_dir / "reconstruction.ckpt").exists()
    assert (run_dir / "config_resolved.cfg").exists()
    assert (run_dir / "run.json").exists()

    eval_dir = tmp_path / "eval"
    assert run(["eval", "--data", data, "--ckpt-dir", run_dir,
                "--out", eval_dir, "--split", "test"] + single) == 0
    with open(eval_dir / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0][0] == "cell"
    assert len(rows) > 1

    render_dir = tmp_path / "render"
    assert run(["render", "--data", data, "--ckpt-dir", run_dir,
                "--out", render_dir, "--split", "test"] + single) == 0
    pgms = [p for p in os.listdir(render_dir) if p.endswith(".pgm")]
    assert pgms and (render_dir / "report.csv").exists()

    ab_dir = tmp_path / "ablate"
    assert run(["ablate", "--data", data, "--out", ab_dir,
                "--grid", "dual,single,4x"] + FAST) == 0
    with open(ab_dir / "summary.csv") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 2
    assert rows[1][0] == "single-dual-4x"

    # rerunning the eval reproduces its CSVs byte for byte
    eval2 = tmp_path / "eval2"
    assert run(["eval", "--data", data, "--ckpt-dir", run_dir,
                "--out", eval2, "--split", "test"] + single) == 0
    assert (eval_dir / "metrics.csv").read_bytes() == \
        (eval2 / "metrics.csv").read_bytes()


def test_eval_without_checkpoints_is_validation_error(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(["gen-data", "--out", data] + FAST) == 0
    rc = run(["eval", "--data", data, "--ckpt-dir", tmp_path / "empty",
              "--out", tmp_path / "eval"] + FAST)
    assert rc == 2


def test_missing_data_dir_is_io_error(tmp_path, capsys):
    rc = run(["train", "--data", tmp_path / "nope",
              "--out", tmp_path / "run"] + FAST)
    assert rc == 3
