"""Shared helper: run the ``ck`` CLI against a throwaway home and echo each command."""

from __future__ import annotations

import os
import subprocess
import sys
import tempfile
from pathlib import Path

from ckflow import SAMPLES_PATH

SAMPLE_REPO = Path(SAMPLES_PATH) / "ck-crowdtuning"


def make_home() -> Path:
    return Path(tempfile.mkdtemp(prefix="ckdemo-")) / "home"


def ck(home: Path, *argv: str, check: bool = True) -> subprocess.CompletedProcess:
    print(f"$ ck {' '.join(argv)}")
    proc = subprocess.run([sys.executable, "-m", "ckflow", *argv, f"--repo_dir={home}"],
                          capture_output=True, text=True, env={**os.environ, "NO_COLOR": "1"})
    text = (proc.stdout + proc.stderr).rstrip()
    lines = text.splitlines()
    if len(lines) > 12:
        lines = lines[:12] + [f"... ({len(lines) - 12} more lines)"]
    for line in lines:
        print(f"  {line}")
    print(f"  [exit {proc.returncode}]")
    if check and proc.returncode != 0:
        raise SystemExit(proc.returncode)
    return proc
