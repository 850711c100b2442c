"""Sweep a small design space exhaustively, then sample it with a fixed seed, and write an HTML report.

    python demos/autotune_report.py
"""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from _common import SAMPLE_REPO, ck, make_home


def main() -> None:
    home = make_home()
    ck(home, "pull", "repo", f"--url={SAMPLE_REPO}")

    spec = Path(tempfile.mkdtemp()) / "sweep.yaml"
    spec.write_text("space:\n  x: {from: 0, to: 5}\nobjective: cost:min,size:max\n")
    ck(home, "tune", "program:tune-quadratic", f"@{spec}", "--record_name=quad-sweep")

    seeded = Path(spec.parent) / "seeded.json"
    seeded.write_text(json.dumps({"space": {"x": {"from": 0, "to": 5}}, "objective": "cost:min",
                                  "strategy": {"random": {"n": 3, "seed": 7}}}))
    ck(home, "tune", "program:tune-quadratic", f"@{seeded}", "--record_name=quad-random")

    ck(home, "pareto", "experiment:quad-sweep", "--metrics=cost:min,size:max")
    out = spec.parent / "report"
    out.mkdir()
    ck(home, "report", "experiment:quad-sweep", "--metrics=cost:min,size:max", f"--out_dir={out}")
    print(f"\nopen {out / 'report.html'}")


if __name__ == "__main__":
    main()
