import hashlib
import json
from pathlib import Path

import pytest

from rbcscope.cli import main

# small end-to-end pipeline config shared by the CLI and acceptance suites
CLI_CONFIG = {
    "dataset": {"n_scenes": 24, "seed": 5},
    "detector": {"epochs": 10},
    "heads": {"epochs": 15},
    "eval": {"k": 3, "detector_train_scenes": 18, "detector_test_scenes": 6},
}


def tree_digest(root) -> dict:
    """sha256 of every file under ``root``, keyed by relative path."""
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run_pipeline(base: Path, config_path: Path) -> dict:
    """synth, train --stage all and the three evals into ``base``; returns the output dirs."""
    dirs = {k: base / k for k in ("data", "models", "reports")}
    cfg = ["--config", str(config_path)]
    assert main(["synth", *cfg, "--out", str(dirs["data"])]) == 0
    assert main(["train", *cfg, "--stage", "all", "--data", str(dirs["data"]), "--out", str(dirs["models"])]) == 0
    for exp in ("model_a", "model_b", "detector"):
        assert main(["eval", *cfg, "--experiment", exp, "--data", str(dirs["data"]),
                     "--models", str(dirs["models"]), "--out", str(dirs["reports"])]) == 0
    return dirs


@pytest.fixture(scope="session")
def cli_config(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(CLI_CONFIG))
    return path


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory, cli_config):
    """Two independent runs of the same config."""
    return [run_pipeline(tmp_path_factory.mktemp(f"run{i}"), cli_config) for i in range(2)]


# one PASS/FAIL line per acceptance criterion, echoed after the test session
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
