"""Pull the sample repository, build and run a program, record a benchmark and replay it.

    python demos/quickstart.py
"""

from __future__ import annotations

from _common import SAMPLE_REPO, ck, make_home


def main() -> None:
    home = make_home()
    ck(home, "pull", "repo", f"--url={SAMPLE_REPO}")
    ck(home, "search", "dataset", "--tags=jpeg")
    ck(home, "search", "program:cbench-automotive-*")
    ck(home, "help", "program")
    ck(home, "compile", "program:cbench-automotive-susan", "--speed")
    ck(home, "run", "program:cbench-automotive-susan", "--env.OMP_NUM_THREADS=4")
    ck(home, "cp", "program:cbench-automotive-susan", "local:program:my-susan")
    ck(home, "benchmark", "program:my-susan", "--record", "--record_uoa=my-test", "--repetitions=3")
    # wall time may drift on a busy machine; integer metrics and dep versions must not
    ck(home, "replay", "experiment:my-test", check=False)
    print(f"\nregistry home: {home}")


if __name__ == "__main__":
    main()
