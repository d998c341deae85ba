"""Transfer engine: expansion, scheduling, integrity, retries, markers,
cancellation, resume, and journal replay."""

import hashlib
import threading
import time

import pytest

from conftest import tree_digests, write_random_tree
from xferkit.connectors import (LOCAL_USER, MockCloudProfile, get_connector,
                                mockcloud_connector, register_connector)
from xferkit.engine import (Engine, FileState, Integrity, TaskState,
                            TransferSpec, rebuild_task, verify_file)
from xferkit.errors import (AlreadyTerminal, EndpointUnreachable,
                            SourceNotFound, UnknownTask)
from xferkit.journal import replay
from xferkit.ranges import ByteRangeSet


@pytest.fixture
def env(tmp_path):
    src = tmp_path / "src"
    dst = tmp_path / "dst"
    src.mkdir()
    dst.mkdir()
    engine = Engine(tmp_path / "journals")
    engine.add_endpoint("src", "posix", {"root": str(src)}, LOCAL_USER)
    engine.add_endpoint("dst", "posix", {"root": str(dst)}, LOCAL_USER)
    return engine, src, dst


def spec_for(source_path="", dest_path="out", **kw):
    return TransferSpec(source=("src", source_path), destination=("dst", dest_path), **kw)


# -- submit ----------------------------------------------------------------


def test_submit_expands_directory(env):
    engine, src, dst = env
    write_random_tree(src, {"a.bin": 100, "b.bin": 200, "c.bin": 300})
    task_id = engine.submit(spec_for())
    snap = engine.status(task_id)
    assert len(snap["files"]) == 3
    assert snap["bytes_total"] == 600
    assert snap["state"] == "submitted"


def test_submit_single_file(env):
    engine, src, dst = env
    write_random_tree(src, {"only.bin": 4321})
    task_id = engine.submit(spec_for("only.bin", "renamed.bin"))
    snap = engine.status(task_id)
    assert list(snap["files"]) == ["only.bin"]
    assert snap["files"]["only.bin"]["size"] == 4321


def test_submit_missing_source(env):
    engine, _, _ = env
    with pytest.raises(SourceNotFound):
        engine.submit(spec_for("nothing-here"))


def test_submit_unknown_endpoint(env):
    engine, src, _ = env
    write_random_tree(src, {"a.bin": 10})
    with pytest.raises(EndpointUnreachable):
        engine.submit(TransferSpec(source=("ghost", ""), destination=("dst", "o")))


def test_empty_directory_succeeds_and_creates_destination(env):
    engine, src, dst = env
    (src / "hollow").mkdir()
    task_id = engine.submit(spec_for("hollow", "made"))
    assert engine.run(task_id) is TaskState.SUCCEEDED
    assert (dst / "made").is_dir()


# -- run ----------------------------------------------------------------------


def test_run_directory_round_trip(env):
    engine, src, dst = env
    digests = write_random_tree(src, {
        "a.bin": 50_000, "nested/b.bin": 120_000, "nested/deep/c.bin": 7,
        "empty.bin": 0})
    (src / "vacant").mkdir()
    task_id = engine.submit(spec_for())
    assert engine.run(task_id) is TaskState.SUCCEEDED
    assert tree_digests(dst / "out") == digests
    assert (dst / "out" / "vacant").is_dir()  # empty dirs are recreated


def test_run_single_file_to_exact_destination(env):
    engine, src, dst = env
    write_random_tree(src, {"one.bin": 9000}, seed=3)
    task_id = engine.submit(spec_for("one.bin", "target/renamed.bin"))
    assert engine.run(task_id) is TaskState.SUCCEEDED
    assert (dst / "target/renamed.bin").stat().st_size == 9000


def test_status_after_success(env):
    engine, src, _ = env
    write_random_tree(src, {"a.bin": 1000, "b.bin": 1000})
    task_id = engine.submit(spec_for())
    engine.run(task_id)
    snap = engine.status(task_id)
    assert snap["state"] == "succeeded"
    assert snap["bytes_moved"] == snap["bytes_total"] == 2000
    assert all(f["state"] == "done" and f["attempts"] == 1
               for f in snap["files"].values())
    assert snap["rate_Bps"] > 0


def test_status_unknown_task(env):
    engine, _, _ = env
    with pytest.raises(UnknownTask):
        engine.status("nope")


def test_run_twice_rejected(env):
    engine, src, _ = env
    write_random_tree(src, {"a.bin": 10})
    task_id = engine.submit(spec_for())
    engine.run(task_id)
    with pytest.raises(AlreadyTerminal):
        engine.run(task_id)


def test_wall_time_bounds_with_injected_overhead(tmp_path):
    # 20 one-byte files at 100 ms per-file latency: cc=1 lands in
    # [2.0 s, 3.0 s]; cc=4 overlaps the overhead to <= 0.35x of that
    src = tmp_path / "src"
    write_random_tree(src, {f"t{i:02d}.bin": 1 for i in range(20)})
    register_connector("wall-mock", mockcloud_connector(
        MockCloudProfile(per_op_latency=0.1)))
    engine = Engine(tmp_path / "j")
    engine.add_endpoint("src", "posix", {"root": str(src)}, LOCAL_USER)
    engine.add_endpoint("dst", "wall-mock", {"root": str(tmp_path / "dst")},
                        LOCAL_USER)

    def timed(cc, dest):
        task_id = engine.submit(TransferSpec(source=("src", ""),
                                             destination=("dst", dest), cc=cc))
        t0 = time.monotonic()
        assert engine.run(task_id) is TaskState.SUCCEEDED
        return time.monotonic() - t0

    serial = timed(1, "o1")
    assert 2.0 <= serial <= 3.0
    overlapped = timed(4, "o4")
    assert overlapped <= 0.35 * serial


def test_concurrency_bound_never_exceeded(tmp_path):
    src = tmp_path / "src"
    dst = tmp_path / "dst"
    write_random_tree(src, {f"f{i:02d}.bin": 2000 for i in range(12)})
    register_connector("slow-dst", mockcloud_connector(
        MockCloudProfile(per_op_latency=0.02)))
    engine = Engine(tmp_path / "j")
    engine.add_endpoint("src", "posix", {"root": str(src)}, LOCAL_USER)
    engine.add_endpoint("dst", "slow-dst", {"root": str(dst)}, LOCAL_USER)
    cc = 3
    task_id = engine.submit(TransferSpec(source=("src", ""), destination=("dst", "o"),
                                         cc=cc))
    task = engine._get_task(task_id)
    peak = [0]
    stop = threading.Event()

    def sampler():
        while not stop.is_set():
            with task.lock:
                active = sum(1 for r in task.files.values()
                             if r.state in (FileState.MOVING, FileState.VERIFYING))
            peak[0] = max(peak[0], active)
            time.sleep(0.002)

    t = threading.Thread(target=sampler, daemon=True)
    t.start()
    assert engine.run(task_id) is TaskState.SUCCEEDED
    stop.set()
    t.join()
    assert 1 <= peak[0] <= cc


# -- integrity & retries ------------------------------------------------------


class CorruptingDest:
    """Wraps a connector: flips one bit of each file's first write, once."""

    name = "corrupting"

    def __init__(self, inner, flip_paths):
        self.inner = inner
        self.flip_paths = flip_paths  # set of path substrings still to corrupt
        self.lock = threading.Lock()

    def start(self, config, credential):
        session = self.inner.start(config, credential)
        outer = self
        original_recv = session.do_recv

        def corrupted_recv(path, host, source):
            def tampered():
                first = True
                for offset, payload in source:
                    with outer.lock:
                        hit = first and any(p in path for p in outer.flip_paths)
                        if hit:
                            outer.flip_paths = {p for p in outer.flip_paths
                                                if p not in path}
                    if hit and payload:
                        payload = bytes([payload[0] ^ 0x01]) + payload[1:]
                    first = False
                    yield offset, payload

            return original_recv(path, host, tampered())

        session.do_recv = corrupted_recv
        return session


def test_strong_integrity_detects_and_retries_corruption(tmp_path):
    src = tmp_path / "src"
    dst = tmp_path / "dst"
    digests = write_random_tree(src, {"clean.bin": 30_000, "dirty.bin": 30_000})
    register_connector("corrupt-once", CorruptingDest(
        get_connector("posix"), {"dirty.bin"}))
    engine = Engine(tmp_path / "j")
    engine.add_endpoint("src", "posix", {"root": str(src)}, LOCAL_USER)
    engine.add_endpoint("dst", "corrupt-once", {"root": str(dst)}, LOCAL_USER)
    task_id = engine.submit(TransferSpec(
        source=("src", ""), destination=("dst", "out"),
        integrity=Integrity.STRONG, max_retries=2))
    assert engine.run(task_id) is TaskState.SUCCEEDED
    snap = engine.status(task_id)
    assert snap["files"]["dirty.bin"]["attempts"] == 2
    assert snap["files"]["clean.bin"]["attempts"] == 1
    assert tree_digests(dst / "out") == digests


def test_retry_budget_exhaustion_fails_file_and_task(tmp_path):
    src = tmp_path / "src"
    dst = tmp_path / "dst"
    write_random_tree(src, {"f.bin": 10_000})
    register_connector("always-corrupt", CorruptingDest(
        get_connector("posix"), {".bin"}))

    class Always(CorruptingDest):
        def start(self, config, credential):
            self.flip_paths = {".bin"}  # re-arm for every attempt
            return super().start(config, credential)

    register_connector("always-corrupt", Always(get_connector("posix"), {".bin"}))
    engine = Engine(tmp_path / "j")
    engine.add_endpoint("src", "posix", {"root": str(src)}, LOCAL_USER)
    engine.add_endpoint("dst", "always-corrupt", {"root": str(dst)}, LOCAL_USER)
    task_id = engine.submit(TransferSpec(
        source=("src", ""), destination=("dst", "out"),
        integrity=Integrity.STRONG, max_retries=2))
    assert engine.run(task_id) is TaskState.FAILED
    snap = engine.status(task_id)
    assert snap["files"]["f.bin"]["state"] == "failed"
    assert snap["files"]["f.bin"]["attempts"] == 3  # max_retries + 1


def test_no_faults_means_single_attempt(env):
    engine, src, _ = env
    write_random_tree(src, {f"n{i}.bin": 500 for i in range(5)})
    task_id = engine.submit(spec_for(max_retries=3))
    engine.run(task_id)
    assert all(f["attempts"] == 1 for f in engine.status(task_id)["files"].values())


def test_verify_file_match_and_mismatch(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    write_random_tree(a, {"v.bin": 5000}, seed=11)
    write_random_tree(b, {"v.bin": 5000}, seed=11)
    conn = get_connector("posix")
    sa = conn.start({"root": str(a)}, LOCAL_USER)
    sb = conn.start({"root": str(b)}, LOCAL_USER)
    from xferkit.engine import FileRecord

    rec = FileRecord(relative_path="v.bin", size=5000)
    result = verify_file(sa, sb, rec, "sha256")
    assert result.matched
    # flip one bit at the destination between write and verify
    raw = bytearray((b / "v.bin").read_bytes())
    raw[123] ^= 0x80
    (b / "v.bin").write_bytes(raw)
    result = verify_file(sa, sb, rec, "sha256")
    assert not result.matched
    assert result.source_digest != result.dest_digest
    sa.destroy()
    sb.destroy()


def test_verify_file_empty_input_digest(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    write_random_tree(a, {"e.bin": 0})
    write_random_tree(b, {"e.bin": 0})
    conn = get_connector("posix")
    sa = conn.start({"root": str(a)}, LOCAL_USER)
    sb = conn.start({"root": str(b)}, LOCAL_USER)
    from xferkit.engine import FileRecord

    result = verify_file(sa, sb, FileRecord("e.bin", 0), "sha256")
    assert result.matched
    assert result.dest_digest == hashlib.sha256(b"").hexdigest()
    sa.destroy()
    sb.destroy()


# -- markers --------------------------------------------------------------------


def test_marker_monotonicity(env):
    engine, src, _ = env
    write_random_tree(src, {"m.bin": 3 * 1024 * 1024})
    task_id = engine.submit(spec_for(blocksize=256 * 1024))
    engine.run(task_id)
    events = replay(engine._journal_path(task_id))
    perf = [int(e.get("cumulative")) for e in events
            if e.kind == "marker-perf" and e.get("path") == "m.bin"]
    assert perf == sorted(perf)
    restart_sets = [ByteRangeSet.decode(e.get("ranges")) for e in events
                    if e.kind == "marker-restart" and e.get("path") == "m.bin"]
    for earlier, later in zip(restart_sets, restart_sets[1:]):
        assert later.contains(earlier)  # non-shrinking under set inclusion
    assert restart_sets[-1].tiles(3 * 1024 * 1024)


def test_task_markers_api(env):
    engine, src, _ = env
    write_random_tree(src, {"mk.bin": 2 * 1024 * 1024})
    task_id = engine.submit(spec_for(blocksize=512 * 1024))
    engine.run(task_id)
    markers = engine.task_markers(task_id)
    kinds = {m.kind for m in markers}
    assert kinds == {"performance", "restart"}
    restarts = [m for m in markers if m.kind == "restart"]
    assert restarts[-1].completed.tiles(2 * 1024 * 1024)
    perf = [m.cumulative_bytes for m in markers if m.kind == "performance"]
    assert perf == sorted(perf)


def test_journal_replay_reconstructs_identical_state(env):
    engine, src, _ = env
    write_random_tree(src, {"r1.bin": 40_000, "sub/r2.bin": 60_000})
    task_id = engine.submit(spec_for(integrity=Integrity.STRONG))
    engine.run(task_id)
    live = engine._get_task(task_id)
    rebuilt = rebuild_task(task_id, replay(engine._journal_path(task_id)))
    assert rebuilt.state == live.state
    assert rebuilt.dirs == live.dirs
    assert set(rebuilt.files) == set(live.files)
    for rel, rec in live.files.items():
        other = rebuilt.files[rel]
        assert other.state == rec.state
        assert other.attempts == rec.attempts
        assert other.completed == rec.completed
        assert other.source_digest == rec.source_digest
        assert other.dest_digest == rec.dest_digest
    assert rebuilt.spec == live.spec


# -- cancel / resume ------------------------------------------------------------


def _slow_dest_engine(tmp_path, bandwidth=2_000_000, name="cancel-dst"):
    src = tmp_path / "src"
    dst = tmp_path / "dst"
    register_connector(name, mockcloud_connector(
        MockCloudProfile(bandwidth_cap=bandwidth)))
    engine = Engine(tmp_path / "j")
    engine.add_endpoint("src", "posix", {"root": str(src)}, LOCAL_USER)
    engine.add_endpoint("dst", name, {"root": str(dst)}, LOCAL_USER)
    return engine, src, dst


def test_cancel_active_task(tmp_path):
    engine, src, dst = _slow_dest_engine(tmp_path, name="cancel-a")
    write_random_tree(src, {"big1.bin": 3_000_000, "big2.bin": 3_000_000})
    task_id = engine.submit(TransferSpec(source=("src", ""), destination=("dst", "o"),
                                         blocksize=256 * 1024))
    runner = threading.Thread(target=engine.run, args=(task_id,), daemon=True)
    runner.start()
    deadline = time.monotonic() + 5
    while engine.status(task_id)["bytes_moved"] == 0:
        assert time.monotonic() < deadline, "transfer never started"
        time.sleep(0.01)
    t0 = time.monotonic()
    engine.cancel(task_id)
    runner.join(timeout=5)
    assert time.monotonic() - t0 < 2.0  # canceled within two seconds
    snap = engine.status(task_id)
    assert snap["state"] == "canceled"
    frozen = snap["files"]
    time.sleep(0.2)  # no FileRecord transitions afterward
    assert engine.status(task_id)["files"] == frozen
    with pytest.raises(AlreadyTerminal):
        engine.cancel(task_id)


def test_resume_canceled_completes_remaining(tmp_path):
    engine, src, dst = _slow_dest_engine(tmp_path, name="cancel-b")
    digests = write_random_tree(src, {"r1.bin": 2_000_000, "r2.bin": 2_000_000})
    task_id = engine.submit(TransferSpec(source=("src", ""), destination=("dst", "o"),
                                         blocksize=256 * 1024))
    runner = threading.Thread(target=engine.run, args=(task_id,), daemon=True)
    runner.start()
    while engine.status(task_id)["bytes_moved"] < 500_000:
        time.sleep(0.01)
    engine.cancel(task_id)
    runner.join(timeout=5)
    assert engine.status(task_id)["state"] == "canceled"
    assert engine.resume(task_id) is TaskState.SUCCEEDED
    assert tree_digests(dst / "o") == digests


def test_resume_succeeded_is_noop(env):
    engine, src, _ = env
    write_random_tree(src, {"a.bin": 100})
    task_id = engine.submit(spec_for())
    engine.run(task_id)
    moved_before = engine.status(task_id)["bytes_moved"]
    assert engine.resume(task_id) is TaskState.SUCCEEDED
    assert engine.status(task_id)["run_bytes"] in (0, moved_before)
    assert engine.status(task_id)["bytes_moved"] == moved_before


def test_resume_sends_only_missing_bytes(tmp_path):
    # holey restart: stop mid-file, resume, check re-sent volume
    engine, src, dst = _slow_dest_engine(tmp_path, bandwidth=4_000_000, name="holey")
    size = 10 * 1024 * 1024
    digests = write_random_tree(src, {"h.bin": size}, seed=21)
    blocksize = 1024 * 1024
    task_id = engine.submit(TransferSpec(source=("src", ""), destination=("dst", "o"),
                                         blocksize=blocksize))
    runner = threading.Thread(target=engine.run, args=(task_id,), daemon=True)
    runner.start()
    while engine.status(task_id)["bytes_moved"] < int(size * 0.6):
        time.sleep(0.01)
    engine.cancel(task_id)  # stand-in for a crash at ~60%
    runner.join(timeout=10)

    fresh = Engine(tmp_path / "j")  # new engine instance, journal only
    fresh.add_endpoint("src", "posix", {"root": str(src)}, LOCAL_USER)
    fresh.add_endpoint("dst", "holey", {"root": str(dst)}, LOCAL_USER)
    completed_before = rebuild_task(
        task_id, replay(fresh._journal_path(task_id))).files["h.bin"].completed
    missing = size - completed_before.total()
    assert 0 < missing < size
    assert fresh.resume(task_id) is TaskState.SUCCEEDED
    resent = fresh.status(task_id)["run_bytes"]
    assert resent <= missing + blocksize
    assert tree_digests(dst / "o") == digests


def test_resume_after_destination_deleted_retransfers(env):
    engine, src, dst = env
    digests = write_random_tree(src, {"victim.bin": 200_000, "ok.bin": 1000})
    task_id = engine.submit(spec_for(integrity=Integrity.STRONG))
    engine.run(task_id)
    (dst / "out" / "victim.bin").unlink()
    # force the task back to a resumable state with stale completed ranges
    task = engine._get_task(task_id)
    task.state = TaskState.SUBMITTED
    task.files["victim.bin"].state = FileState.PENDING
    assert engine.resume(task_id) is TaskState.SUCCEEDED
    assert tree_digests(dst / "out") == digests
    assert engine.status(task_id)["files"]["victim.bin"]["bytes"] == 200_000
