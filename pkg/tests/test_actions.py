"""Unified access: dispatch, envelope and error codes."""

from __future__ import annotations

import json

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from ckflow import Kernel, access
from ckflow.actions import GENERIC_ACTIONS, MODULE_ACTIONS


@pytest.fixture
def kernel(sample_registry):
    return Kernel(sample_registry)


def check_envelope(res):
    assert isinstance(res, dict)
    assert isinstance(res["return"], int) and res["return"] >= 0
    assert (res["return"] > 0) == bool(res.get("error"))
    json.dumps(res, allow_nan=False)


def test_load_existing(kernel):
    res = kernel.access({"action": "load", "module_uoa": "program", "data_uoa": "cbench-automotive-susan"})
    assert res["return"] == 0
    assert "run_cmds" in res["meta"]


def test_load_missing(kernel):
    res = kernel.access({"action": "load", "module_uoa": "program", "data_uoa": "ghost"})
    assert res["return"] == 8
    assert res["error"]
    assert set(res) == {"return", "error"}


def test_compile_with_speed_string(kernel):
    res = kernel.access({"action": "compile", "module_uoa": "program", "data_uoa": "cbench-automotive-susan",
                         "speed": "yes"})
    assert res["return"] == 0, res
    assert res["build"]["choices"]["opt_level"] == 4


def test_unknown_module_and_action(kernel):
    res = kernel.access({"action": "load", "module_uoa": "nonsense"})
    assert res["return"] == 4 and "module not found" in res["error"]
    res = kernel.access({"action": "explode", "module_uoa": "program"})
    assert res["return"] == 4 and "action not implemented" in res["error"]


def test_help_lists_actions(kernel):
    res = kernel.access({"action": "help", "module_uoa": "program"})
    names = {a["name"] for a in res["actions"]}
    assert {"compile", "run", "benchmark", "load", "search"} <= names
    res = kernel.access({"action": "help", "module_uoa": "experiment"})
    assert "replay" in {a["name"] for a in res["actions"]}
    assert kernel.access({"action": "help", "module_uoa": "zzz"})["return"] == 4


def test_action_help_flag(kernel):
    res = kernel.access({"action": "run", "module_uoa": "program", "help": True})
    assert res["return"] == 0 and res["action"] == "run" and res["help"]


def test_aliases(kernel):
    kernel.access({"action": "add", "module_uoa": "program", "data_uoa": "a", "meta": {"x": 1}})
    res = kernel.access({"action": "mv", "module_uoa": "program", "data_uoa": "a", "new_data_uoa": "b"})
    assert res["return"] == 0 and res["data_uoa"] == "b"
    assert kernel.access({"action": "delete", "module_uoa": "program", "data_uoa": "b"})["return"] == 0


def test_user_defined_module(kernel):
    kernel.registry.add("local:module:widget", {"actions": {"load": "show a widget"}})
    kernel.registry.add("local:widget:w1", {"tags": "blue"})
    assert kernel.access({"action": "load", "module_uoa": "widget", "data_uoa": "w1"})["return"] == 0
    helps = {a["name"]: a["help"] for a in kernel.access({"action": "help", "module_uoa": "widget"})["actions"]}
    assert helps["load"] == "show a widget"


def test_run_all_failing_is_64(kernel, echo_program):
    res = kernel.access({"action": "run", "module_uoa": "program", "data_uoa": "echo-fixture",
                         "env": {"FAIL_ON": "1"}, "choices": {"x": "1"}, "repetitions": "2"})
    assert res["return"] == 64
    assert len(res["runs"]) == 2


def test_dependency_error_payload(kernel):
    kernel.registry.add("local:program:needy", {"deps": {"x": {"tags": "no-such-thing"}}, "build_cmds": ["true"],
                                                "run_cmds": {"default": "true"}})
    res = kernel.access({"action": "compile", "module_uoa": "program", "data_uoa": "needy"})
    assert res["return"] == 32
    assert res["unsatisfied"] == "x"


def test_bad_param_types(kernel):
    res = kernel.access({"action": "run", "module_uoa": "program", "data_uoa": "hello-benchmark",
                         "repetitions": "many"})
    assert res["return"] == 1
    res = kernel.access({"action": "run", "module_uoa": "program", "data_uoa": "hello-benchmark", "env": "x"})
    assert res["return"] == 1


def test_module_level_access(home):
    res = access({"action": "search", "module_uoa": "soft"}, config_dir=home)
    assert res["return"] == 0 and res["lst"]


def test_non_mapping_request(kernel):
    for bad in (None, [], "load", {"action": 5}):
        check_envelope(kernel.access(bad))


names = st.sampled_from(sorted(set(GENERIC_ACTIONS) | {a for m in MODULE_ACTIONS.values() for a in m}) + ["zap"])
modules = st.sampled_from(sorted(MODULE_ACTIONS) + ["module", "nope"])
values = st.recursive(st.one_of(st.none(), st.booleans(), st.integers(), st.floats(), st.text(max_size=10)),
                      lambda inner: st.one_of(st.lists(inner, max_size=3),
                                              st.dictionaries(st.text(max_size=5), inner, max_size=3)),
                      max_leaves=6)


@settings(max_examples=300, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(names, modules, st.one_of(st.none(), st.text(max_size=12), st.integers()),
       st.dictionaries(st.sampled_from(["tags", "env", "choices", "repetitions", "meta", "cmd_key",
                                        "metrics", "deps", "new_data_uoa", "extra_args", "speed", "uid"]),
                       values, max_size=3))
def test_envelope_never_escaped(kernel, action, module, data, params):
    req = {"action": action, "module_uoa": module, "data_uoa": data, **params}
    check_envelope(kernel.access(req))
