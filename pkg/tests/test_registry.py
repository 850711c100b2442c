"""Registry: repositories, component CRUD, addressing and on-disk layout."""

from __future__ import annotations

import json
import os
import shutil
import zipfile

import pytest

from ckflow import ComponentRef, init_registry
from ckflow.errors import CKError
from ckflow.registry import UID_RE, parse_tags

from conftest import SAMPLE_REPO


def test_fresh_home_has_default_and_local(home):
    reg = init_registry(home)
    assert [r.name for r in reg.repos()] == ["default", "local"]
    assert reg.repo("default").readonly
    assert not reg.repo("local").readonly
    assert (home / "local" / ".ckr.json").is_file()


def test_init_is_idempotent(home):
    init_registry(home)
    before = {p: p.read_bytes() for p in home.rglob("*") if p.is_file()}
    init_registry(home)
    after = {p: p.read_bytes() for p in home.rglob("*") if p.is_file()}
    assert before == after


def test_unwritable_config_dir(tmp_path):
    # running as root defeats chmod, so put the home under a regular file
    blocker = tmp_path / "plain-file"
    blocker.write_text("x")
    with pytest.raises(CKError) as exc:
        init_registry(blocker / "home")
    assert exc.value.code == 16
    assert "cannot create local repository" in exc.value.message


def test_pull_registers_and_is_idempotent(registry):
    first = registry.pull_repo(str(SAMPLE_REPO))
    assert first["repo"].name == "ck-crowdtuning"
    assert not first["already_registered"]
    assert any("ck-autotuning" in w for w in first["warnings"])
    index = (registry.index_path).read_text()
    second = registry.pull_repo(str(SAMPLE_REPO))
    assert second["already_registered"]
    assert registry.index_path.read_text() == index


def test_pull_zip_archive(registry, tmp_path):
    archive = tmp_path / "repo.zip"
    with zipfile.ZipFile(archive, "w") as zf:
        for p in SAMPLE_REPO.rglob("*"):
            if p.is_file():
                zf.write(p, "ck-crowdtuning-master/" + str(p.relative_to(SAMPLE_REPO)))
    res = registry.pull_repo(str(archive))
    assert res["repo"].name == "ck-crowdtuning"
    assert registry.load("program:hello-benchmark").repo == "ck-crowdtuning"


def test_pull_without_ckr_leaves_registry_unchanged(registry, tmp_path):
    bad = tmp_path / "bad"
    (bad / "program" / "x").mkdir(parents=True)
    index = registry.index_path.read_text()
    with pytest.raises(CKError, match="not a component repository"):
        registry.pull_repo(str(bad))
    assert registry.index_path.read_text() == index
    assert [r.name for r in registry.repos()] == ["default", "local"]


def test_pull_name_conflict(registry, tmp_path):
    registry.pull_repo(str(SAMPLE_REPO))
    other = tmp_path / "other"
    other.mkdir()
    (other / ".ckr.json").write_text(json.dumps({"name": "ck-crowdtuning", "uid": "0123456789abcdef",
                                                 "deps": [], "format_version": 1}))
    with pytest.raises(CKError, match="repository name conflict"):
        registry.pull_repo(str(other))


def test_add_and_load_round_trip(registry):
    registry.add("program:my-bench", {"tags": "demo"})
    comp = registry.load("program:my-bench")
    assert comp.meta == {"tags": "demo"}
    assert comp.repo == "local"
    assert UID_RE.match(comp.uid)


def test_add_twice_keeps_first(registry):
    registry.add("program:my-bench", {"tags": "first"})
    with pytest.raises(CKError, match="entry already exists"):
        registry.add("program:my-bench", {"tags": "second"})
    assert registry.load("program:my-bench").meta == {"tags": "first"}


def test_add_with_explicit_uid(registry):
    comp = registry.add("program:my-bench", {}, uid="29db2248aba45e59")
    assert comp.uid == "29db2248aba45e59"
    assert registry.load("program:29db2248aba45e59").data_name == "my-bench"


def test_default_repo_is_read_only(registry):
    with pytest.raises(CKError, match="repository is read-only") as exc:
        registry.add("default:program:nope", {})
    assert exc.value.code == 16


def test_canonical_meta_on_disk(registry):
    comp = registry.add("program:canon", {"b": 1, "a": {"z": 2, "y": 3}})
    text = (comp.payload_dir / ".cm" / "meta.json").read_text()
    assert text == json.dumps({"a": {"y": 3, "z": 2}, "b": 1}, indent=2, sort_keys=True) + "\n"
    lock = json.loads((comp.payload_dir / ".cm" / "meta-lock.json").read_text())
    assert lock == {"alias": "canon", "uid": comp.uid}
    assert "created_iso8601" in comp.info


def test_rename_keeps_uid(registry):
    comp = registry.add("program:old-name", {"tags": "x"})
    registry.rename("program:old-name", "new-name")
    again = registry.load(f"program:{comp.uid}")
    assert again.data_name == "new-name"
    assert again.uid == comp.uid
    with pytest.raises(CKError) as exc:
        registry.load("program:old-name")
    assert exc.value.code == 8


def test_copy_gets_new_uid(sample_registry):
    src = sample_registry.load("program:hello-benchmark")
    dst = sample_registry.copy("program:hello-benchmark", "local:program:new-program-workflow")
    assert dst.meta == src.meta
    assert dst.uid != src.uid
    assert dst.info["copied_from_uid"] == src.uid
    assert (dst.payload_dir / "hello.sh").is_file()
    with pytest.raises(CKError, match="entry already exists"):
        sample_registry.copy("program:hello-benchmark", "local:program:new-program-workflow")


def test_copy_missing_source(registry):
    with pytest.raises(CKError) as exc:
        registry.copy("program:ghost", "local:program:x")
    assert exc.value.code == 8


def test_remove(registry):
    registry.add("program:doomed", {})
    registry.remove("program:doomed")
    with pytest.raises(CKError) as exc:
        registry.load("program:doomed")
    assert exc.value.code == 8
    assert not list((registry.repo("local").path / "program").iterdir())


def test_load_missing_is_code_8(registry):
    with pytest.raises(CKError) as exc:
        registry.load("program:nothing-here")
    assert exc.value.code == 8
    assert "entry not found" in exc.value.message


def test_glob_load_ambiguous(sample_registry):
    with pytest.raises(CKError, match="more than one match"):
        sample_registry.load("program:cbench-automotive-*")
    assert sample_registry.load("program:cbench-automotive-s*").data_name == "cbench-automotive-susan"


def test_search_by_tags(sample_registry):
    refs = sample_registry.search("dataset", tags="jpeg")
    assert [r.data for r in refs] == ["image-jpeg-0001", "image-jpeg-0002"]
    assert sample_registry.search("dataset", tags=["jpeg", "raw"]) == []
    assert len(sample_registry.search("dataset", name_glob="*")) == 3


def test_search_order_follows_registration(sample_registry):
    sample_registry.add("local:dataset:image-jpeg-local", {"tags": "dataset,jpeg"})
    refs = sample_registry.search("dataset", tags="jpeg")
    assert [r.repo for r in refs] == ["local", "ck-crowdtuning", "ck-crowdtuning"]


def test_local_shadows_pulled(sample_registry):
    sample_registry.add("local:program:hello-benchmark", {"tags": "shadow"})
    assert sample_registry.load("program:hello-benchmark").repo == "local"
    assert sample_registry.load("ck-crowdtuning:program:hello-benchmark").meta["tags"] != "shadow"


def test_default_repo_modules(registry):
    described = {r.data for r in registry.search("module")}
    assert {"program", "experiment", "env", "package", "soft", "repo", "dataset"} <= described
    assert {"module", "soft"} <= set(registry.modules())
    assert registry.load("soft:lang.python").repo == "default"


def test_invalid_names_rejected(registry):
    for bad in ("Upper", "has space", ".hidden", "a/b", ""):
        with pytest.raises(CKError):
            registry.add(ComponentRef("program", bad or None, "local"), {})


def test_parse_tags():
    assert parse_tags("a, B ,c") == frozenset({"a", "b", "c"})
    assert parse_tags(["x", "y"]) == frozenset({"x", "y"})
    assert parse_tags(None) == frozenset()


def test_ref_parse_and_str():
    assert ComponentRef.parse("local:program:y") == ComponentRef("program", "y", "local")
    assert ComponentRef.parse("program") == ComponentRef("program")
    for text in ("program", "program:x", "local:program:x"):
        assert str(ComponentRef.parse(text)) == text
    with pytest.raises(CKError):
        ComponentRef.parse("a:b:c:d")


def test_read_only_repo_uses_local_scratch(registry):
    comp = registry.load("soft:lang.python")
    work = registry.work_dir(comp)
    assert str(work).startswith(str(registry.repo("local").path))


def test_no_leftover_staging_after_failed_copy(registry, tmp_path, monkeypatch):
    registry.add("program:src", {})
    real = shutil.copytree

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(shutil, "copytree", boom)
    with pytest.raises(CKError):
        registry.copy("program:src", "local:program:dst")
    monkeypatch.setattr(shutil, "copytree", real)
    assert os.listdir(registry.repo("local").path / "program") == ["src"]
