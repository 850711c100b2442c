"""Detect the host Python, install a sample package, and build a program that uses it.

    python demos/dependencies.py
"""

from __future__ import annotations

from _common import SAMPLE_REPO, ck, make_home


def main() -> None:
    home = make_home()
    ck(home, "pull", "repo", f"--url={SAMPLE_REPO}")
    ck(home, "search", "soft")
    ck(home, "detect", "soft:lang.python")
    ck(home, "resolve", "package", "--deps.py.tags=lang-python")
    # compiling resolves the demo-tool dependency and installs its package on first use
    ck(home, "compile", "program:uses-demo-tool")
    ck(home, "run", "program:uses-demo-tool")
    ck(home, "search", "env")
    # a dependency nothing can satisfy fails with exit code 32
    ck(home, "resolve", "package", "--deps.x.tags=no-such-tool", check=False)


if __name__ == "__main__":
    main()
