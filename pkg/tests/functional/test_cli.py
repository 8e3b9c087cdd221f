"""Test the commands end to end with the click runner."""

import json
from dataclasses import replace

import numpy as np

from cardioquant.dataset import MANIFEST, write_dataset
from cardioquant.filesystem import read_csv
from cardioquant.geometry import MYOCARDIUM
from cardioquant.settings import SNAPSHOT_NAME


def _error_codes(result):
    return [
        line.split(":", 1)[0]
        for line in result.output.splitlines()
        if line.startswith("E_")
    ]


def _tree(root):
    return {
        path.relative_to(root).as_posix(): path.read_bytes()
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }


def test_phantom_writes_dataset(cli_runner, tmp_path):
    """The phantom command writes the configured number of subjects."""
    result = cli_runner("phantom", "--out", tmp_path / "data")
    assert result.exit_code == 0, result.output
    rows = read_csv(tmp_path / "data" / MANIFEST)
    assert [row["subject_id"] for row in rows] == [
        "sub-001",
        "sub-002",
        "sub-003",
        "sub-004",
    ]
    assert (tmp_path / "data" / "sub-001" / "indices.csv").is_file()
    snapshot = json.loads((tmp_path / "data" / SNAPSHOT_NAME).read_text())
    assert snapshot["run"]["seed"] == 3


def test_phantom_is_reproducible(cli_runner, tmp_path):
    """Equal seeds give byte-identical datasets."""
    cli_runner("--seed", 8, "phantom", "--out", tmp_path / "a")
    cli_runner("--seed", 8, "phantom", "--out", tmp_path / "b")
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_snapshot_reproduces_run(cli_runner, tmp_path):
    """Rerunning from a resolved config gives the same outputs."""
    cli_runner("phantom", "--subjects", 2, "--out", tmp_path / "a")
    result = cli_runner(
        "--config",
        tmp_path / "a" / SNAPSHOT_NAME,
        "phantom",
        "--out",
        tmp_path / "b",
    )
    assert result.exit_code == 0, result.output
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_phantom_bad_range(cli_runner, tmp_path):
    """A reversed range is reported as a phantom error."""
    config = tmp_path / "bad.toml"
    config.write_text("[phantom]\nr_ed = [9.0, 7.0]\n")
    result = cli_runner(
        "--config",
        config,
        "phantom",
        "--out",
        tmp_path / "data",
    )
    assert result.exit_code == 1
    assert _error_codes(result) == ["E_PHANTOM"]


def test_unknown_config_key(cli_runner, tmp_path):
    """Unknown keys stop the run before any command starts."""
    config = tmp_path / "bad.toml"
    config.write_text("[train]\nlearning_rate = 1.0\n")
    result = cli_runner("--config", config, "phantom", "--out", tmp_path)
    assert result.exit_code == 1
    assert _error_codes(result) == ["E_CONFIG"]


def test_refuses_non_empty_output(cli_runner, tmp_path):
    """An occupied --out needs --force."""
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "notes.txt").write_text("keep")
    result = cli_runner("phantom", "--out", tmp_path / "data")
    assert result.exit_code == 1
    assert _error_codes(result) == ["E_OUTPUT_DIR"]

    result = cli_runner("phantom", "--out", tmp_path / "data", "--force")
    assert result.exit_code == 0, result.output
    assert (tmp_path / "data" / "notes.txt").read_text() == "keep"


def test_quantify_from_masks(cli_runner, dataset_dir, tmp_path):
    """Stored masks quantify to the indices stored with them."""
    result = cli_runner(
        "quantify",
        "--from-masks",
        "--dataset",
        dataset_dir,
        "--out",
        tmp_path / "out",
    )
    assert result.exit_code == 0, result.output
    for subject_dir in sorted(dataset_dir.glob("sub-*")):
        written = tmp_path / "out" / subject_dir.name / "indices.csv"
        assert written.read_bytes() == (
            subject_dir / "indices.csv"
        ).read_bytes()


def test_quantify_needs_one_source(cli_runner, dataset_dir, tmp_path):
    """Exactly one of --checkpoint and --from-masks is accepted."""
    result = cli_runner(
        "quantify",
        "--dataset",
        dataset_dir,
        "--out",
        tmp_path / "out",
    )
    assert result.exit_code == 1
    assert _error_codes(result) == ["E_CONFIG"]


def test_train_quantify_and_score(cli_runner, dataset_dir, tmp_path):
    """Checkpoints from train drive quantify and eval."""
    run = tmp_path / "run"
    result = cli_runner("train", "--dataset", dataset_dir, "--out", run)
    assert result.exit_code == 0, result.output
    assert (run / "segmenter.cqt").is_file()
    assert (run / "quantifier.cqt").is_file()
    assert (run / SNAPSHOT_NAME).is_file()
    assert len(read_csv(run / "train_log.csv")) == 4

    checkpoints = ["--checkpoint", run / "segmenter.cqt"]
    checkpoints += ["--checkpoint", run / "quantifier.cqt"]
    result = cli_runner(
        "quantify",
        *checkpoints,
        "--dataset",
        dataset_dir,
        "--out",
        tmp_path / "quantified",
    )
    if result.exit_code != 0:
        assert _error_codes(result) == ["E_GEOMETRY"]
    assert (tmp_path / "quantified" / SNAPSHOT_NAME).is_file()

    result = cli_runner(
        "eval",
        *checkpoints,
        "--dataset",
        dataset_dir,
        "--out",
        tmp_path / "scored",
    )
    assert result.exit_code == 0, result.output
    assert len(read_csv(tmp_path / "scored" / "curves.csv")) == 4 * 8


def test_kfold_eval_and_report(cli_runner, dataset_dir, tmp_path):
    """The k-fold run prints its summary and report re-renders it."""
    out = tmp_path / "eval"
    result = cli_runner(
        "eval",
        "--folds",
        2,
        "--dataset",
        dataset_dir,
        "--out",
        out,
    )
    assert result.exit_code == 0, result.output
    summary = (out / "summary.txt").read_text()
    assert summary in result.output
    assert (out / "fold-0" / "metrics.csv").is_file()
    assert (out / "fold-1" / "metrics.csv").is_file()

    result = cli_runner("report", out)
    assert result.exit_code == 0, result.output
    assert "RWT6" in result.output


def test_train_without_dataset(cli_runner, tmp_path):
    """A dataset must be named on the command line or in the config."""
    result = cli_runner("train", "--out", tmp_path / "run")
    assert result.exit_code == 1
    assert _error_codes(result) == ["E_CONFIG"]


def test_gradcheck_command(cli_runner, tmp_path):
    """The suite passes and writes its table as CSV."""
    config = tmp_path / "small.toml"
    config.write_text("[gradcheck]\nsize = 8\nsamples = 2\n")
    result = cli_runner(
        "--config",
        config,
        "gradcheck",
        "--out",
        tmp_path / "check",
    )
    assert result.exit_code == 0, result.output
    rows = read_csv(tmp_path / "check" / "gradcheck.csv")
    assert all(row["passed"] == "1" for row in rows)
    assert "conv2d" in result.output


def test_quantify_reports_unmeasurable_masks(cli_runner, subjects, tmp_path):
    """Masks without myocardium end the command with a geometry error."""
    broken = []
    for subject in subjects:
        labels = np.where(
            subject.masks.labels == MYOCARDIUM,
            0,
            subject.masks.labels,
        )
        broken.append(
            replace(subject, masks=replace(subject.masks, labels=labels)),
        )
    dataset = write_dataset(tmp_path / "broken", broken)
    result = cli_runner(
        "quantify",
        "--from-masks",
        "--dataset",
        dataset,
        "--out",
        tmp_path / "out",
    )
    assert result.exit_code == 1
    assert _error_codes(result) == ["E_GEOMETRY"]
    assert "sub-004 (frame 0)" in result.output
    assert not list((tmp_path / "out").glob("sub-*/indices.csv"))
