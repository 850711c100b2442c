"""Command line front end.

Grammar::

    ck <action> <module>[:<data>] [more refs...] [--key=value] [--flag] [@input.json|@input.yaml]
    ck <action> <repo>:<module>:<data> ...

``@files`` are deep-merged first (maps merge, lists replace), then flags
apply left to right. Dotted flag names nest: ``--env.OMP_NUM_THREADS=4``
becomes ``{"env": {"OMP_NUM_THREADS": "4"}}``. Flag values stay strings.

Global flags: ``--out=human|json`` and ``--repo_dir=<config dir>``.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field

from . import jsonio
from .actions import Kernel, default_config_dir
from .errors import GENERIC, CKError
from .registry import ComponentRef

USAGE = "usage: ck <action> <module>[:<data>] [--key=value ...] [@input.json|@input.yaml]"
GLOBAL_FLAGS = ("out", "repo_dir")


@dataclass
class ParsedCommand:
    action: str
    ref: ComponentRef
    params: dict = field(default_factory=dict)
    input_files: list[str] = field(default_factory=list)

    def extra_ref(self, index: int = 0) -> ComponentRef | None:
        """A later positional read as a component ref (the target of ``cp``)."""
        extra = self.params.get("extra_args") or []
        return ComponentRef.parse(extra[index]) if len(extra) > index else None

    def to_argv(self) -> list[str]:
        """An argv that parses back to an equal command."""
        argv = [self.action, str(self.ref)]
        extra = self.params.get("extra_args")
        if isinstance(extra, list):
            argv += [str(x) for x in extra]
        argv += [f"@{f}" for f in self.input_files]
        for key, value in _leaves(self.params):
            if key == ("extra_args",):
                continue
            name = ".".join(key)
            if value is True:
                argv.append(f"--{name}")
            elif isinstance(value, str):
                argv.append(f"--{name}={value}")
        return argv


def _leaves(doc: dict, prefix: tuple = ()):
    for key, value in doc.items():
        if isinstance(value, dict) and value:
            yield from _leaves(value, prefix + (key,))
        else:
            yield prefix + (key,), value


def _set_path(doc: dict, path: list[str], value) -> None:
    cur = doc
    for part in path[:-1]:
        nxt = cur.get(part)
        if not isinstance(nxt, dict):
            nxt = cur[part] = {}
        cur = nxt
    cur[path[-1]] = value


def parse_argv(argv: list[str]) -> ParsedCommand:
    if not argv:
        raise CKError(GENERIC, f"missing action\n{USAGE}")
    action, rest = argv[0], list(argv[1:])
    if not action or action.startswith(("-", "@")):
        raise CKError(GENERIC, f"missing action\n{USAGE}")

    positional, files, flags = [], [], []
    only_positional = False
    for tok in rest:
        if only_positional:
            positional.append(tok)
        elif tok == "--":
            only_positional = True
        elif tok.startswith("--"):
            flags.append(tok[2:])
        elif tok in ("-h", "-?"):
            flags.append("help")
        elif tok.startswith("@") and len(tok) > 1:
            files.append(tok[1:])
        else:
            positional.append(tok)
    if not positional:
        raise CKError(GENERIC, f"missing component reference\n{USAGE}")
    ref = ComponentRef.parse(positional[0])

    params: dict = {}
    for path in files:
        params = jsonio.deep_merge(params, jsonio.load_document(path))
    for flag in flags:
        key, eq, value = flag.partition("=")
        parts = key.split(".")
        if not key or any(not p for p in parts):
            raise CKError(GENERIC, f"malformed flag --{flag}")
        _set_path(params, parts, value if eq else True)
    if len(positional) > 1:
        params["extra_args"] = positional[1:]
    return ParsedCommand(action=action, ref=ref, params=params, input_files=files)


def _use_color(stream) -> bool:
    return "NO_COLOR" not in os.environ and hasattr(stream, "isatty") and stream.isatty()


def _human(result: dict) -> str:
    if "lst" in result:
        return "\n".join(item["ref"] for item in result["lst"])
    if "path" in result and set(result) <= {"return", "path", "repo_uoa", "data_uid"}:
        return result["path"]
    if "actions" in result:
        width = max((len(a["name"]) for a in result["actions"]), default=0)
        return "\n".join(f"{a['name']:<{width}}  {a['help']}" for a in result["actions"])
    if "help" in result and "action" in result:
        return f"{result['module']} {result['action']}: {result['help']}"
    body = {k: v for k, v in result.items() if k not in ("return", "error")}
    return json.dumps(body, indent=2, sort_keys=True) if body else ""


def render_result(result: dict, fmt: str = "human", color: bool = False) -> tuple[int, str, str]:
    """(exit code, stdout text, stderr text) for an action result."""
    code = int(result.get("return", 1))
    exit_code = min(max(code, 0), 125)
    if fmt == "json":
        return exit_code, json.dumps(result, indent=2, sort_keys=True) + "\n", ""
    out = _human(result) if code == 0 else ""
    err = ""
    if code > 0:
        msg = f"error ({code}): {result.get('error', 'unknown error')}"
        err = f"\033[31m{msg}\033[0m\n" if color else msg + "\n"
        detail = {k: v for k, v in result.items() if k not in ("return", "error")}
        if detail:
            out = json.dumps(detail, indent=2, sort_keys=True)
    return exit_code, (out + "\n") if out else "", err


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    fmt = "human"
    try:
        cmd = parse_argv(argv)
        fmt = str(cmd.params.pop("out", "human"))
        if fmt not in ("human", "json"):
            raise CKError(GENERIC, f"--out must be human or json, not {fmt!r}")
        repo_dir = cmd.params.pop("repo_dir", None)
        kernel = Kernel.open(repo_dir if isinstance(repo_dir, str) else default_config_dir())
        request = {"action": cmd.action, "module_uoa": cmd.ref.module, **cmd.params}
        if cmd.ref.data:
            request["data_uoa"] = cmd.ref.data
        if cmd.ref.repo:
            request["repo_uoa"] = cmd.ref.repo
        result = kernel.access(request)
    except CKError as exc:
        result = {"return": exc.code, "error": exc.message}
    code, out, err = render_result(result, fmt, color=_use_color(sys.stderr))
    if out:
        sys.stdout.write(out)
    if err:
        sys.stderr.write(err)
    return code


if __name__ == "__main__":
    sys.exit(main())
