from __future__ import annotations

import contextlib
import io
import json
import os
from pathlib import Path

import pytest

from ckflow import SAMPLES_PATH, init_registry
from ckflow.cli import main

SAMPLE_REPO = Path(SAMPLES_PATH) / "ck-crowdtuning"


@pytest.fixture
def home(tmp_path) -> Path:
    return tmp_path / "ckhome"


@pytest.fixture
def registry(home):
    return init_registry(home)


@pytest.fixture
def sample_registry(registry):
    registry.pull_repo(str(SAMPLE_REPO))
    return registry


def run_cli(home: Path, *argv: str) -> tuple[int, str, str]:
    """Run the CLI in-process against ``home``; returns (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([*argv, f"--repo_dir={home}"])
    return code, out.getvalue(), err.getvalue()


def run_cli_json(home: Path, *argv: str) -> tuple[int, dict]:
    code, out, _ = run_cli(home, *argv, "--out=json")
    return code, json.loads(out)


def add_program(registry, name: str, meta: dict, files: dict[str, str] | None = None, tmp: Path | None = None):
    """Add ``program:<name>`` to local with the given payload files."""
    payload = None
    if files:
        payload = (tmp or Path(os.environ.get("TMPDIR", "/tmp"))) / f"payload-{name}"
        payload.mkdir(parents=True, exist_ok=True)
        for fname, text in files.items():
            (payload / fname).write_text(text)
    return registry.add(f"local:program:{name}", meta, payload_from=payload)


# sh program echoing its choices/env into the metrics file
ECHO_SCRIPT = """#!/bin/sh
x="${1:-0}"
if [ "$x" = "${FAIL_ON:-none}" ]; then exit 3; fi
printf '{"cost": %d, "x": %d, "ops_per_s": 123}\\n' "$(( (x - 3) * (x - 3) + 1 ))" "$x" > tmp-ck-output.json
echo "threads=${OMP_NUM_THREADS:-unset}"
"""


@pytest.fixture
def echo_program(registry, tmp_path):
    meta = {
        "tags": "program,fixture",
        "run_cmds": {"default": {"cmd": "sh {src_dir}/echo.sh {choice.x}"}},
        "exposed_choices": {"x": {"domain": {"from": 0, "to": 5}, "default": 0}},
    }
    return add_program(registry, "echo-fixture", meta, {"echo.sh": ECHO_SCRIPT}, tmp_path)


# -- acceptance reporting: one PASS/FAIL line per criterion -----------------------

_CRITERIA: list[tuple[int, str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA.append((marker.args[0], marker.args[1], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, status, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"[{status}] #{num} {name}" + (f" ({detail})" if detail else ""))
