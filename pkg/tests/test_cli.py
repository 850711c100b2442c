from __future__ import annotations

import json
import subprocess
import sys

import pytest
from hypothesis import given, strategies as st

from ckflow.cli import parse_argv, render_result
from ckflow.errors import CKError
from ckflow.registry import ComponentRef

from conftest import SAMPLE_REPO, run_cli, run_cli_json


def test_parse_run_with_env():
    cmd = parse_argv(["run", "program:cbench-automotive-susan", "--env.OMP_NUM_THREADS=4"])
    assert cmd.action == "run"
    assert cmd.ref == ComponentRef("program", "cbench-automotive-susan")
    assert cmd.params == {"env": {"OMP_NUM_THREADS": "4"}}


def test_parse_cp_target():
    cmd = parse_argv(["cp", "program:x", "local:program:y"])
    assert cmd.extra_ref() == ComponentRef("program", "y", "local")


def test_flag_beats_file(tmp_path):
    f = tmp_path / "in.json"
    f.write_text('{"a": 1, "b": {"c": 2}}')
    cmd = parse_argv(["run", "program:x", f"@{f}", "--a=2", "--b.d"])
    assert cmd.params == {"a": "2", "b": {"c": 2, "d": True}}
    assert cmd.input_files == [str(f)]


def test_yaml_input_and_deep_nesting(tmp_path):
    f = tmp_path / "in.yaml"
    f.write_text("space:\n  x: [1, 2]\n")
    cmd = parse_argv(["tune", "program:x", f"@{f}", "--a.b.c=1"])
    assert cmd.params == {"space": {"x": [1, 2]}, "a": {"b": {"c": "1"}}}


def test_later_flag_wins():
    assert parse_argv(["run", "program:x", "--k=1", "--k=2"]).params == {"k": "2"}


@pytest.mark.parametrize("argv", [[], ["--flag"], ["run"], ["run", "--x=1"]])
def test_usage_errors(argv):
    with pytest.raises(CKError) as exc:
        parse_argv(argv)
    assert exc.value.code == 1
    assert "usage" in exc.value.message


def test_file_errors(tmp_path):
    with pytest.raises(CKError) as exc:
        parse_argv(["run", "program:x", f"@{tmp_path / 'missing.json'}"])
    assert exc.value.code == 16
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1, 2\nb: 3\n")
    with pytest.raises(CKError) as exc:
        parse_argv(["run", "program:x", f"@{bad}"])
    assert exc.value.code == 1
    assert "line" in exc.value.message


def test_malformed_flag():
    with pytest.raises(CKError):
        parse_argv(["run", "program:x", "--a..b=1"])


ident = st.from_regex(r"[a-z][a-z0-9_-]{0,6}", fullmatch=True)
refs = st.one_of(st.builds(lambda m: m, ident), st.builds(lambda m, d: f"{m}:{d}", ident, ident),
                 st.builds(lambda r, m, d: f"{r}:{m}:{d}", ident, ident, ident))
flag_values = st.one_of(st.just(True), st.text(st.characters(blacklist_categories=("Cs",)), max_size=8))
flags = st.dictionaries(st.lists(ident, min_size=1, max_size=3).map(".".join), flag_values, max_size=4)


@given(ident, refs, flags, st.lists(ident, max_size=2))
def test_round_trip(action, ref, flagmap, extra):
    argv = [action, ref, *extra]
    argv += [f"--{k}" if v is True else f"--{k}={v}" for k, v in flagmap.items()]
    cmd = parse_argv(argv)
    assert parse_argv(cmd.to_argv()) == cmd


def test_render_result_codes():
    assert render_result({"return": 0, "x": 1})[0] == 0
    code, out, err = render_result({"return": 8, "error": "entry not found: x"})
    assert code == 8 and "entry not found" in err and out == ""
    assert render_result({"return": 300, "error": "big"})[0] == 125
    code, out, _ = render_result({"return": 8, "error": "e"}, fmt="json")
    assert json.loads(out) == {"return": 8, "error": "e"}


def test_color_only_when_asked():
    assert "\033[" in render_result({"return": 1, "error": "e"}, color=True)[2]
    assert "\033[" not in render_result({"return": 1, "error": "e"}, color=False)[2]


def test_cli_json_load(home):
    run_cli(home, "pull", "repo", f"--url={SAMPLE_REPO}")
    code, doc = run_cli_json(home, "load", "program:hello-benchmark")
    assert code == 0 and doc["return"] == 0


def test_cli_exit_code_and_stderr(home):
    code, out, err = run_cli(home, "load", "program:ghost")
    assert code == 8
    assert "entry not found" in err


def test_cli_human_outputs(home):
    run_cli(home, "pull", "repo", f"--url={SAMPLE_REPO}")
    code, out, _ = run_cli(home, "search", "dataset", "--tags=jpeg")
    assert out.split() == ["ck-crowdtuning:dataset:image-jpeg-0001", "ck-crowdtuning:dataset:image-jpeg-0002"]
    code, out, _ = run_cli(home, "find", "program:hello-benchmark")
    assert out.strip().endswith("program/hello-benchmark")


def test_module_entry_point(home):
    proc = subprocess.run([sys.executable, "-m", "ckflow", "help", "program", f"--repo_dir={home}"],
                          capture_output=True, text=True, env={"NO_COLOR": "1", "PATH": "/usr/bin:/bin"})
    assert proc.returncode == 0
    assert "compile" in proc.stdout and "\033[" not in proc.stderr
