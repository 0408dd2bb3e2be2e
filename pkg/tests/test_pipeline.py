"""Bundle packaging, store scanning, update decisions, and status records."""

from __future__ import annotations

import tarfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from flagforge.errors import ManifestError, PipelineError, VersionConflictError
from flagforge.model import ProbeSpec
from flagforge.pipeline import (
    ArtifactManifest,
    PipelineReport,
    StatusRecord,
    decide_updates,
    extract_payload,
    package_artifact,
    parse_manifest,
    read_status,
    run_pipeline,
    scan_store,
    write_status,
)

T1 = "2024-01-01T00:00:00+00:00"
T2 = "2024-02-01T00:00:00+00:00"
T3 = "2024-03-01T00:00:00+00:00"


def write_source(root: Path, name: str, version: str, files: dict[str, str],
                 created_at: str | None = None,
                 run: str = "python3 server.py {PORT}") -> Path:
    source = root / f"{name}-{version}-src"
    source.mkdir(parents=True, exist_ok=True)
    lines = [
        f"challenge={name}",
        f"version={version}",
        "replicas=3",
        "internal_port=7000",
        "external_port=9001",
        f"run={run}",
    ]
    if created_at is not None:
        lines.append(f"created_at={created_at}")
    (source / "challenge.meta").write_text("\n".join(lines) + "\n")
    for relative, content in files.items():
        target = source / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content)
    return source


def mk_manifest(challenge: str = "web-pwn", version: str = "1",
                created_at: str = T1, checksum: str = "0" * 64,
                ) -> ArtifactManifest:
    return ArtifactManifest(
        challenge=challenge, version=version, created_at=created_at,
        checksum=checksum, replicas=3, internal_port=7000, external_port=9001,
        run_command="python3 server.py {PORT}", probe=ProbeSpec())


@dataclass
class FakeDeployer:
    deployed: list[tuple[str, str]] = field(default_factory=list)
    fail: set[str] = field(default_factory=set)

    def deploy(self, manifest: ArtifactManifest) -> None:
        if manifest.challenge in self.fail:
            raise PipelineError(f"injected failure for {manifest.challenge}")
        self.deployed.append((manifest.challenge, manifest.version))


# --- packaging ----------------------------------------------------------------


def test_package_creates_named_bundle(tmp_path):
    source = write_source(tmp_path, "web-pwn", "1",
                          {"server.py": "print('hi')\n", "data/flag.txt": "F\n"},
                          created_at=T1)
    store = tmp_path / "store"
    bundle = package_artifact(source, store)
    assert bundle == store / "web-pwn-1.bundle"
    with tarfile.open(bundle) as tar:
        names = [m.name for m in tar.getmembers()]
        assert names[0] == "manifest"
        assert sorted(names[1:]) == ["data/flag.txt", "server.py"]
        manifest = parse_manifest(tar.extractfile("manifest").read().decode())
    assert manifest.challenge == "web-pwn"
    assert manifest.version == "1"
    assert manifest.created_at == T1
    assert manifest.replicas == 3
    assert manifest.probe == ProbeSpec()
    scanned, skipped = scan_store(store)
    assert skipped == [] and scanned == [manifest]


def test_package_identical_content_is_noop(tmp_path):
    store = tmp_path / "store"
    first = write_source(tmp_path / "a", "web-pwn", "1", {"server.py": "x\n"})
    package_artifact(first, store)
    original = (store / "web-pwn-1.bundle").read_bytes()
    second = write_source(tmp_path / "b", "web-pwn", "1", {"server.py": "x\n"})
    package_artifact(second, store)
    assert (store / "web-pwn-1.bundle").read_bytes() == original


def test_package_refuses_changed_content_same_version(tmp_path):
    store = tmp_path / "store"
    package_artifact(
        write_source(tmp_path / "a", "web-pwn", "1", {"server.py": "x\n"}),
        store)
    changed = write_source(tmp_path / "b", "web-pwn", "1", {"server.py": "y\n"})
    with pytest.raises(VersionConflictError,
                       match="version 1 already exists with different checksum"):
        package_artifact(changed, store)


def test_package_missing_mandatory_keys(tmp_path):
    source = tmp_path / "src"
    source.mkdir()
    (source / "challenge.meta").write_text("challenge=web-pwn\nversion=1\n")
    with pytest.raises(ManifestError, match="missing keys") as excinfo:
        package_artifact(source, tmp_path / "store")
    assert "run" in str(excinfo.value)


def test_package_rejects_unsafe_version(tmp_path):
    source = write_source(tmp_path, "web-pwn", "../1", {"server.py": "x\n"})
    with pytest.raises(ManifestError, match="bad version"):
        package_artifact(source, tmp_path / "store")


def test_extract_payload_round_trip(tmp_path):
    files = {"server.py": "print('hi')\n", "data/flag.txt": "F\n"}
    bundle = package_artifact(
        write_source(tmp_path, "web-pwn", "1", files), tmp_path / "store")
    target = tmp_path / "materialized"
    manifest = extract_payload(bundle, target)
    assert manifest.challenge == "web-pwn"
    for relative, content in files.items():
        assert (target / relative).read_text() == content
    assert not (target / "challenge.meta").exists()


# --- scanning -------------------------------------------------------------------


def test_scan_empty_store(tmp_path):
    assert scan_store(tmp_path) == ([], [])
    assert scan_store(tmp_path / "absent") == ([], [])


def test_scan_orders_by_challenge_then_created_at(tmp_path):
    store = tmp_path / "store"
    package_artifact(write_source(tmp_path / "a", "web-pwn", "2",
                                  {"s.py": "b\n"}, created_at=T2), store)
    package_artifact(write_source(tmp_path / "b", "web-pwn", "1",
                                  {"s.py": "a\n"}, created_at=T1), store)
    package_artifact(write_source(tmp_path / "c", "crypto", "9",
                                  {"s.py": "c\n"}, created_at=T3), store)
    manifests, skipped = scan_store(store)
    assert skipped == []
    assert [(m.challenge, m.version) for m in manifests] == [
        ("crypto", "9"), ("web-pwn", "1"), ("web-pwn", "2")]


def test_scan_skips_corrupt_bundles(tmp_path):
    store = tmp_path / "store"
    for name in ("alpha", "beta", "gamma"):
        package_artifact(
            write_source(tmp_path / name, name, "1",
                         {"server.py": f"MARKER {name}\n" * 40}),
            store)
    # cut into the payload member's data region
    victim = store / "beta-1.bundle"
    victim.write_bytes(victim.read_bytes()[:1024 + 600])
    # flip payload bytes without changing any size
    tampered = bytearray((store / "gamma-1.bundle").read_bytes())
    index = tampered.index(b"MARKER gamma")
    tampered[index:index + 6] = b"DOCTOR"
    (store / "gamma-1.bundle").write_bytes(bytes(tampered))

    manifests, skipped = scan_store(store)
    assert [m.challenge for m in manifests] == ["alpha"]
    assert len(skipped) == 2
    assert any("beta-1.bundle" in reason for reason in skipped)
    assert any("gamma-1.bundle" in reason and "checksum mismatch" in reason
               for reason in skipped)


def test_scan_ignores_non_bundle_files(tmp_path):
    store = tmp_path / "store"
    store.mkdir()
    (store / "notes.txt").write_text("not a bundle\n")
    assert scan_store(store) == ([], [])


# --- update decisions -----------------------------------------------------------


def test_decide_no_update_when_newest_deployed():
    v1 = mk_manifest(version="1", created_at=T1, checksum="a" * 64)
    v2 = mk_manifest(version="2", created_at=T2, checksum="b" * 64)
    assert decide_updates([v1, v2], {"web-pwn": "b" * 64}) == []


def test_decide_updates_to_newest():
    v1 = mk_manifest(version="1", created_at=T1, checksum="a" * 64)
    v2 = mk_manifest(version="2", created_at=T2, checksum="b" * 64)
    assert decide_updates([v1, v2], {"web-pwn": "a" * 64}) == [("web-pwn", v2)]
    assert decide_updates([v2, v1], {"web-pwn": "a" * 64}) == [("web-pwn", v2)]


def test_decide_checksum_difference_alone_triggers():
    # same version label, different payload (foreign store)
    local = mk_manifest(version="1", created_at=T1, checksum="a" * 64)
    foreign = mk_manifest(version="1", created_at=T2, checksum="c" * 64)
    assert decide_updates([local, foreign], {"web-pwn": "a" * 64}) \
        == [("web-pwn", foreign)]


def test_decide_created_at_tie_breaks_on_checksum():
    low = mk_manifest(version="1", created_at=T1, checksum="a" * 64)
    high = mk_manifest(version="1b", created_at=T1, checksum="f" * 64)
    assert decide_updates([low, high], {"web-pwn": "a" * 64}) \
        == [("web-pwn", high)]


def test_decide_unknown_provenance_always_updates():
    v1 = mk_manifest(version="1", created_at=T1, checksum="a" * 64)
    assert decide_updates([v1], {"web-pwn": None}) == [("web-pwn", v1)]


def test_decide_undeployed_only_when_asked():
    v1 = mk_manifest(version="1", created_at=T1, checksum="a" * 64)
    assert decide_updates([v1], {}) == []
    assert decide_updates([v1], {}, include_undeployed=True) \
        == [("web-pwn", v1)]


# --- status file ----------------------------------------------------------------


def test_status_line_format():
    record = StatusRecord("web-pwn", "backend-1", "v2", "deployed", T1)
    assert record.render() == (
        "challenge=web-pwn backend=backend-1 version=v2 "
        f"state=deployed ts={T1}")


def test_status_write_read_single(tmp_path):
    path = tmp_path / "latest-build.txt"
    record = StatusRecord("web-pwn", "backend-1", "v2", "deployed", T1)
    write_status([record], path)
    assert path.read_text() == record.render() + "\n"
    assert read_status(path) == ([record], [])


def test_status_upsert_keeps_newest(tmp_path):
    path = tmp_path / "latest-build.txt"
    old = StatusRecord("web-pwn", "backend-1", "v1", "deployed", T1)
    new = StatusRecord("web-pwn", "backend-1", "v2", "deployed", T2)
    write_status([old], path)
    write_status([new], path)
    assert read_status(path)[0] == [new]
    # an older record never overwrites a newer one
    write_status([old], path)
    assert read_status(path)[0] == [new]


def test_status_one_line_per_challenge_backend(tmp_path):
    path = tmp_path / "latest-build.txt"
    write_status([
        StatusRecord("web-pwn", "backend-1", "v1", "deployed", T1),
        StatusRecord("web-pwn", "backend-2", "v1", "pending", T1),
        StatusRecord("crypto", "backend-1", "v3", "failed", T1),
    ], path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert lines == sorted(lines)  # deterministic (challenge, backend) order


def test_status_read_skips_malformed(tmp_path):
    path = tmp_path / "latest-build.txt"
    good = StatusRecord("web-pwn", "backend-1", "v1", "deployed", T1)
    path.write_text(
        good.render() + "\n"
        "challenge=web-pwn backend=backend-1 version=v1 state=wat ts=" + T1 + "\n"
        "complete nonsense\n")
    records, skipped = read_status(path)
    assert records == [good]
    assert len(skipped) == 2
    assert skipped[0].startswith("line 2:") and "wat" in skipped[0]
    assert skipped[1].startswith("line 3:")


names = st.text(alphabet="abcdefghij-0123456789", min_size=1, max_size=8)
versions = st.text(alphabet="abcdefv0123456789._", min_size=1, max_size=8)
states = st.sampled_from(["pending", "deployed", "failed"])
timestamps = st.integers(min_value=0, max_value=2 ** 31).map(
    lambda s: datetime.fromtimestamp(s, timezone.utc).isoformat())


@given(st.lists(
    st.tuples(names, names, versions, states, timestamps),
    max_size=30, unique_by=lambda t: (t[0], t[1])))
def test_status_round_trip_property(tmp_path_factory, rows):
    records = [StatusRecord(*row) for row in rows]
    path = tmp_path_factory.mktemp("status") / "latest-build.txt"
    write_status(records, path)
    read_back, skipped = read_status(path)
    assert skipped == []
    assert sorted(read_back, key=lambda r: (r.challenge, r.backend)) \
        == sorted(records, key=lambda r: (r.challenge, r.backend))


# --- promotion loop -------------------------------------------------------------


def seed_store(tmp_path, specs) -> Path:
    store = tmp_path / "store"
    for name, version, created_at, content in specs:
        package_artifact(
            write_source(tmp_path / f"{name}-{version}", name, version,
                         {"server.py": content}, created_at=created_at),
            store)
    return store


def test_pipeline_dev_nothing_new(tmp_path):
    store = seed_store(tmp_path, [("web-pwn", "1", T1, "x\n")])
    manifests, _ = scan_store(store)
    status = tmp_path / "latest-build.txt"
    write_status([StatusRecord("web-pwn", "backend-1", "1", "deployed", T1)],
                 status)
    before = status.stat()

    deployer = FakeDeployer()
    report = run_pipeline("dev", store, deployer,
                          deployed_view={"web-pwn": manifests[0].checksum},
                          status_path=status, backend="backend-1")
    assert report.render() == "0 updates"
    assert deployer.deployed == []
    after = status.stat()
    assert (before.st_ino, before.st_mtime_ns) == (after.st_ino, after.st_mtime_ns)


def test_pipeline_dev_updates_only_stale_challenge(tmp_path):
    store = seed_store(tmp_path, [
        ("alpha", "1", T1, "a1\n"), ("alpha", "2", T2, "a2\n"),
        ("beta", "1", T1, "b1\n"),
        ("gamma", "1", T1, "c1\n"),
    ])
    manifests, _ = scan_store(store)
    by_key = {(m.challenge, m.version): m for m in manifests}
    deployed = {
        "alpha": by_key[("alpha", "1")].checksum,
        "beta": by_key[("beta", "1")].checksum,
        "gamma": by_key[("gamma", "1")].checksum,
    }
    status = tmp_path / "latest-build.txt"
    deployer = FakeDeployer()
    report = run_pipeline("dev", store, deployer, deployed_view=deployed,
                          status_path=status, backend="backend-1")
    assert deployer.deployed == [("alpha", "2")]
    assert report.updates == 1
    records, _ = read_status(status)
    assert records == [StatusRecord("alpha", "backend-1", "2", "deployed",
                                    records[0].timestamp)]


def test_pipeline_failure_is_isolated(tmp_path):
    store = seed_store(tmp_path, [
        ("alpha", "2", T2, "a2\n"), ("beta", "2", T2, "b2\n")])
    status = tmp_path / "latest-build.txt"
    deployer = FakeDeployer(fail={"alpha"})
    report = run_pipeline("dev", store, deployer,
                          deployed_view={"alpha": None, "beta": None},
                          status_path=status, backend="backend-1")
    assert deployer.deployed == [("beta", "2")]
    states = {o.challenge: o.state for o in report.outcomes}
    assert states == {"alpha": "failed", "beta": "deployed"}
    records, _ = read_status(status)
    by_challenge = {r.challenge: r for r in records}
    assert by_challenge["alpha"].state == "failed"
    assert by_challenge["beta"].state == "deployed"


def test_pipeline_deploy_requires_selection(tmp_path):
    store = seed_store(tmp_path, [("alpha", "1", T1, "a\n")])
    with pytest.raises(PipelineError, match="selection"):
        run_pipeline("deploy", store, FakeDeployer(), deployed_view={})
    with pytest.raises(PipelineError, match="mode"):
        run_pipeline("prod", store, FakeDeployer(), deployed_view={})


def test_pipeline_deploy_provisions_selected_only(tmp_path):
    store = seed_store(tmp_path, [
        (name, "1", T1, f"{name}\n")
        for name in ("alpha", "beta", "gamma", "delta", "epsilon")])
    deployer = FakeDeployer()
    report = run_pipeline("deploy", store, deployer, deployed_view={},
                          select=["beta", "delta"])
    assert sorted(deployer.deployed) == [("beta", "1"), ("delta", "1")]
    assert report.updates == 2


def test_pipeline_deploy_reports_missing_selection(tmp_path):
    store = seed_store(tmp_path, [("alpha", "1", T1, "a\n")])
    deployer = FakeDeployer()
    report = run_pipeline("deploy", store, deployer, deployed_view={},
                          select=["alpha", "ghost"])
    assert deployer.deployed == [("alpha", "1")]
    outcomes = {o.challenge: o for o in report.outcomes}
    assert outcomes["ghost"].state == "failed"
    assert outcomes["ghost"].detail == "no bundle in store"


def test_pipeline_report_render_lists_outcomes(tmp_path):
    store = seed_store(tmp_path, [("alpha", "2", T2, "a2\n")])
    report = run_pipeline("dev", store, FakeDeployer(),
                          deployed_view={"alpha": None})
    assert report.render() == "1 updates\nalpha 2 deployed"
