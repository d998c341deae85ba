"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to watch the lines appear;
the full suite takes several minutes since the sweeps execute for real.
"""

import random
import subprocess
import sys
import threading
import time
from pathlib import Path

import numpy as np

from conftest import tree_digests, write_random_tree
from xferkit.bench import (CoordinatorRunner, EngineRunner, ExperimentPlan,
                           PlanKind, fit_and_report, make_dataset, run_plan)
from xferkit.connectors import (LOCAL_USER, Credential, CredentialKind,
                                MockCloudProfile, get_connector,
                                mockcloud_connector, register_connector)
from xferkit.coordinator import Coordinator
from xferkit.endpoint import endpoint_serve, register_credential
from xferkit.engine import (Engine, Integrity, LocalEndpoint, TaskState,
                            TransferSpec, rebuild_task)
from xferkit.journal import replay
from xferkit.perfmodel import (GB, DegenerateX, TransferModel, ZeroVariance,
                               fit_startup_model, fit_transfer_model, linfit,
                               pearson, predict_time)
from xferkit.simserver import LinkProfile, ObjectStoreServer

MIB = 1024 * 1024


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}",
          flush=True)
    assert ok, f"criterion {criterion}: {detail}"


def quiet(*_args, **_kwargs):
    pass


def stage_datasets(plan: ExperimentPlan, source_root: Path) -> None:
    """Pre-generate sweep datasets; per-run timing excludes generation."""
    for gv in plan.grid:
        seed = plan.seed * 1_000_003 + gv * 101
        if plan.kind is PlanKind.FILE_COUNT:
            total, n = plan.total_bytes, gv
        elif plan.kind is PlanKind.SIZE:
            total, n = gv, 1
        else:
            total, n = plan.total_bytes, plan.file_count
        name = f"ds-{plan.kind.value}-{plan.topology}-{gv}"
        make_dataset(total, n, source_root / name, seed=seed)


def test_criterion_1_linearity(tmp_path):
    """File-count sweep on the mock cloud is linear in N (rho >= 0.99)."""
    register_connector("ac1-mock", mockcloud_connector(
        MockCloudProfile(per_op_latency=0.050)))
    dest = LocalEndpoint("ac1-mock", {"root": str(tmp_path / "dst")}, LOCAL_USER)
    runner = EngineRunner(tmp_path / "work", dest)
    plan = ExperimentPlan(kind=PlanKind.FILE_COUNT, total_bytes=50 * MIB,
                          grid=[50, 100, 200, 400], repeats=3,
                          topology="mock", seed=11)
    stage_datasets(plan, runner.source_root)
    started = time.monotonic()
    run_plan(plan, runner, tmp_path / "work", runner.source_root,
             tmp_path / "ac1.csv", log=quiet)
    elapsed = time.monotonic() - started
    rep = fit_and_report(tmp_path / "ac1.csv", tmp_path / "ac1-report",
                         figures=True)
    sweep = rep.sweep("filecount")
    ok = sweep.pearson_rho >= 0.99 and elapsed <= 120.0
    report(1, ok, f"rho={sweep.pearson_rho:.5f} (>=0.99), "
                  f"runtime={elapsed:.1f}s (<=120s), "
                  f"fitted t0={sweep.fitted_t0 * 1000:.2f}ms")


def test_criterion_2_overhead_recovery(tmp_path):
    """Fitted per-file overhead within +/-10% of the injected latency."""
    injected = 0.050
    register_connector("ac2-mock", mockcloud_connector(
        MockCloudProfile(per_op_latency=injected)))
    dest = LocalEndpoint("ac2-mock", {"root": str(tmp_path / "dst")}, LOCAL_USER)
    runner = EngineRunner(tmp_path / "work", dest)
    plan = ExperimentPlan(kind=PlanKind.FILE_COUNT, total_bytes=24 * MIB,
                          grid=[20, 40, 80, 120, 160], repeats=3,
                          topology="mock", seed=23)
    stage_datasets(plan, runner.source_root)
    started = time.monotonic()
    run_plan(plan, runner, tmp_path / "work", runner.source_root,
             tmp_path / "ac2.csv", log=quiet)
    elapsed = time.monotonic() - started
    rep = fit_and_report(tmp_path / "ac2.csv", tmp_path / "ac2-report",
                         figures=False)
    sweep = rep.sweep("filecount")
    error = abs(sweep.fitted_t0 - injected) / injected
    ok = error <= 0.10 and elapsed <= 180.0
    report(2, ok, f"fitted t0={sweep.fitted_t0 * 1000:.2f}ms vs injected "
                  f"{injected * 1000:.0f}ms (error {error * 100:.1f}%, "
                  f"<=10%), 5-point grid x3 repeats, runtime={elapsed:.1f}s")


def test_criterion_3_startup_cost(tmp_path):
    """Startup-cost recovery and third-party vs two-party comparison.

    The shaped destination (25 MB/s) keeps the size term deterministic, and
    the coordinator's control channel carries an emulated 25 ms WAN hop so
    the third-party coordination cost is measurable at desk scale (the real
    hosted-service figure is not reproducible here).
    """
    started = time.monotonic()
    register_connector("ac3-mock", mockcloud_connector(
        MockCloudProfile(bandwidth_cap=25e6)))
    src_root = tmp_path / "srcdata"
    src_root.mkdir()
    ep_src = endpoint_serve(("127.0.0.1", 0), "posix", {"root": str(src_root)},
                            default_credential=LOCAL_USER)
    ep_dst = endpoint_serve(("127.0.0.1", 0), "ac3-mock",
                            {"root": str(tmp_path / "dst3")},
                            default_credential=LOCAL_USER)
    coord = Coordinator(str(tmp_path / "j3"), control_rtt=0.025).start()
    coord.register_endpoint("src", ep_src.address)
    coord.register_endpoint("dst", ep_dst.address)
    grid = [4 * MIB, 8 * MIB, 16 * MIB, 24 * MIB, 32 * MIB]

    def size_sweep(topology: str, runner) -> float:
        plan = ExperimentPlan(kind=PlanKind.SIZE, total_bytes=0, grid=grid,
                              repeats=3, topology=topology, seed=31)
        stage_datasets(plan, Path(runner.source_root))
        run_plan(plan, runner, tmp_path / "work3", runner.source_root,
                 tmp_path / f"ac3-{topology}.csv", log=quiet)
        rep = fit_and_report(tmp_path / f"ac3-{topology}.csv",
                             tmp_path / f"ac3-{topology}", figures=False)
        return rep.sweep("size").fitted_s0

    try:
        third = CoordinatorRunner(src_root, coord, "src", "dst")
        coord.startup_delay = 0.0
        s0_baseline = size_sweep("third-party", third)
        coord.startup_delay = 1.5
        s0_delayed = size_sweep("third-delayed", third)

        direct_dest = LocalEndpoint("ac3-mock", {"root": str(tmp_path / "dst3d")},
                                    LOCAL_USER)
        direct = EngineRunner(tmp_path / "work3d", direct_dest)
        s0_direct = size_sweep("direct-api", direct)
    finally:
        coord.stop()
        ep_src.stop()
        ep_dst.stop()
    elapsed = time.monotonic() - started
    target = s0_baseline + 1.5
    recovery_error = abs(s0_delayed - target) / target
    ok = (recovery_error <= 0.15 and s0_baseline > s0_direct + 0.05
          and s0_delayed > s0_direct and elapsed <= 120.0)
    report(3, ok, f"S0 third-party={s0_baseline:.3f}s, +1.5s delay -> "
                  f"{s0_delayed:.3f}s (target {target:.3f}s, error "
                  f"{recovery_error * 100:.1f}%, <=15%); two-party "
                  f"S0={s0_direct:.3f}s < third-party; runtime={elapsed:.1f}s")


def test_criterion_4_concurrency_benefit(tmp_path):
    """cc=4 delivers >= 2.5x the cc=1 throughput on tiny files."""
    register_connector("ac4-mock", mockcloud_connector(
        MockCloudProfile(per_op_latency=0.200)))
    dest = LocalEndpoint("ac4-mock", {"root": str(tmp_path / "dst")}, LOCAL_USER)
    runner = EngineRunner(tmp_path / "work", dest)
    plan = ExperimentPlan(kind=PlanKind.CONCURRENCY, total_bytes=16 * 1024,
                          grid=[1, 2, 4, 8], repeats=3, file_count=16,
                          topology="mock", seed=41)
    stage_datasets(plan, runner.source_root)
    started = time.monotonic()
    records = run_plan(plan, runner, tmp_path / "work", runner.source_root,
                       tmp_path / "ac4.csv", log=quiet)
    elapsed = time.monotonic() - started
    thr = {}
    for cc in plan.grid:
        runs = [r.throughput_Bps for r in records if r.grid_value == cc and r.ok]
        thr[cc] = sum(runs) / len(runs)
    speedup = thr[4] / thr[1]
    monotone = thr[2] > thr[1] and thr[4] > thr[2]
    saturating = thr[8] >= 0.6 * thr[4]  # flattens rather than collapses
    ok = speedup >= 2.5 and monotone and saturating and elapsed <= 120.0
    report(4, ok, f"throughput cc=1..8: "
                  f"{', '.join(f'{thr[c] / 1024:.2f}KiB/s' for c in plan.grid)}; "
                  f"cc4/cc1={speedup:.2f}x (>=2.5x), monotone={monotone}, "
                  f"runtime={elapsed:.1f}s")


def test_criterion_5_placement_effect(tmp_path):
    """Connector near the store sees >=3x lower per-file overhead."""
    started = time.monotonic()
    profiles = {
        "local-dtn": LinkProfile(rtt=0.050, applies_to="local-dtn"),
        "cloud-dtn": LinkProfile(rtt=0.001, applies_to="cloud-dtn"),
    }
    sim = ObjectStoreServer(str(tmp_path / "store"), profiles).start()

    def sweep_for(tag: str, topology: str) -> float:
        dest = LocalEndpoint("object", {
            "endpoint_url": sim.endpoint_url, "bucket": f"bench-{tag}",
            "client_tag": tag}, LOCAL_USER)
        runner = EngineRunner(tmp_path / f"work-{tag}", dest)
        plan = ExperimentPlan(kind=PlanKind.FILE_COUNT, total_bytes=4 * MIB,
                              grid=[8, 16, 32, 64], repeats=3,
                              topology=topology, seed=53)
        stage_datasets(plan, runner.source_root)
        run_plan(plan, runner, tmp_path / f"work-{tag}", runner.source_root,
                 tmp_path / f"ac5-{topology}.csv", log=quiet)
        rep = fit_and_report(tmp_path / f"ac5-{topology}.csv",
                             tmp_path / f"ac5-{topology}", figures=False)
        return rep.sweep("filecount").fitted_t0

    try:
        t0_local = sweep_for("local-dtn", "conn-local")
        t0_cloud = sweep_for("cloud-dtn", "conn-cloud")
    finally:
        sim.stop()
    elapsed = time.monotonic() - started
    ratio = t0_local / t0_cloud
    ok = ratio >= 3.0 and elapsed <= 180.0
    report(5, ok, f"fitted t0 conn-local={t0_local * 1000:.1f}ms, "
                  f"conn-cloud={t0_cloud * 1000:.1f}ms, ratio={ratio:.1f}x "
                  f"(>=3x), runtime={elapsed:.1f}s")


class _BitFlipper:
    """Connector wrapper: flips one random bit in each file's first write."""

    def __init__(self, inner, seed: int):
        self.inner = inner
        self.rng = random.Random(seed)
        self.tampered: set[str] = set()
        self.lock = threading.Lock()

    def start(self, config, credential):
        session = self.inner.start(config, credential)
        outer = self
        original_recv = session.do_recv

        def corrupting_recv(path, host, source):
            def stream():
                for offset, payload in source:
                    with outer.lock:
                        fresh = path not in outer.tampered
                        if fresh:
                            outer.tampered.add(path)
                            bit = outer.rng.randrange(max(1, len(payload) * 8))
                    if fresh and payload:
                        byte, shift = divmod(bit, 8)
                        payload = (payload[:byte]
                                   + bytes([payload[byte] ^ (1 << shift)])
                                   + payload[byte + 1:])
                    yield offset, payload

            return original_recv(path, host, stream())

        session.do_recv = corrupting_recv
        return session


def test_criterion_6_integrity_pipeline(tmp_path):
    """Integrity costs one destination read pass and catches corruption."""
    started = time.monotonic()
    sim = ObjectStoreServer(str(tmp_path / "store")).start()
    dest = LocalEndpoint("object", {"endpoint_url": sim.endpoint_url,
                                    "bucket": "ac6"}, LOCAL_USER)
    runner = EngineRunner(tmp_path / "work", dest)
    plan = ExperimentPlan(kind=PlanKind.INTEGRITY, total_bytes=3 * MIB,
                          grid=[0, 1], repeats=3, file_count=24,
                          topology="sim", seed=61)
    stage_datasets(plan, runner.source_root)
    try:
        run_plan(plan, runner, tmp_path / "work", runner.source_root,
                 tmp_path / "ac6.csv", log=quiet)
        rep = fit_and_report(tmp_path / "ac6.csv", tmp_path / "ac6-report",
                             figures=False)
        sweep = rep.sweep("integrity")
        slower = sweep.integrity_throughput["strong"] < sweep.integrity_throughput["off"]

        # request-log oracle: every strong-mode PUT of a file is matched by
        # exactly one GET (the verification pass); off-mode sees none
        gets = {}
        puts = {}
        for entry in sim.request_log():
            if entry.key.endswith("/") or "manifest" in entry.key:
                continue
            if entry.method == "PUT":
                puts[entry.key] = puts.get(entry.key, 0) + 1
            elif entry.method == "GET":
                gets[entry.key] = gets.get(entry.key, 0) + 1
        strong_keys = [k for k in puts if "/out-integrity-sim-1/" in k]
        off_keys = [k for k in puts if "/out-integrity-sim-0/" in k]
        one_extra_read = (strong_keys and off_keys
                          and all(gets.get(k, 0) == puts[k] for k in strong_keys)
                          and all(gets.get(k, 0) == 0 for k in off_keys))
    finally:
        sim.stop()

    # 50 randomized single-bit corruptions: all detected, all recovered
    src = tmp_path / "corr-src"
    digests = write_random_tree(src, {f"f{i:02d}.bin": 20_000 for i in range(50)},
                                seed=7)
    register_connector("ac6-flip", _BitFlipper(get_connector("posix"), seed=67))
    engine = Engine(tmp_path / "j6")
    engine.add_endpoint("src", "posix", {"root": str(src)}, LOCAL_USER)
    engine.add_endpoint("dst", "ac6-flip", {"root": str(tmp_path / "corr-dst")},
                        LOCAL_USER)
    task_id = engine.submit(TransferSpec(
        source=("src", ""), destination=("dst", "out"),
        integrity=Integrity.STRONG, max_retries=2, cc=4))
    state = engine.run(task_id)
    snap = engine.status(task_id)
    detected = sum(1 for f in snap["files"].values() if f["attempts"] >= 2)
    recovered = (state is TaskState.SUCCEEDED
                 and tree_digests(tmp_path / "corr-dst" / "out") == digests)
    elapsed = time.monotonic() - started
    ok = (slower and one_extra_read and detected == 50 and recovered
          and elapsed <= 180.0)
    report(6, ok, f"strong {sweep.integrity_throughput['strong'] / 1e6:.2f}MB/s < "
                  f"off {sweep.integrity_throughput['off'] / 1e6:.2f}MB/s; "
                  f"one extra GET per file={one_extra_read}; "
                  f"corruptions detected={detected}/50, all recovered="
                  f"{recovered}; runtime={elapsed:.1f}s")


def test_criterion_7_third_party_isolation(tmp_path):
    """Coordinator moves zero payload bytes and stores zero credential bytes."""
    src_root = tmp_path / "src"
    total_files = 100
    write_random_tree(src_root, {f"f{i:03d}.bin": 30_000 for i in range(total_files)},
                      seed=3)
    secret = b"CREDENTIAL-CANARY-7f3a9c2e51d8b604"
    ep_src = endpoint_serve(("127.0.0.1", 0), "posix", {"root": str(src_root)},
                            default_credential=LOCAL_USER)
    ep_dst = endpoint_serve(("127.0.0.1", 0), "posix",
                            {"root": str(tmp_path / "dst")},
                            default_credential=LOCAL_USER)
    coord = Coordinator(str(tmp_path / "coordination")).start()
    coord.register_endpoint("a", ep_src.address)
    coord.register_endpoint("b", ep_dst.address)
    try:
        src_ref = register_credential(ep_src.address, Credential(
            CredentialKind.ACCESS_KEY_PAIR, secret, "a"))
        dst_ref = register_credential(ep_dst.address, Credential(
            CredentialKind.ACCESS_KEY_PAIR, secret, "b"))
        task_id = coord.engine.submit(TransferSpec(
            source=("a", ""), destination=("b", "out"), cc=2,
            source_cred_ref=src_ref, dest_cred_ref=dst_ref))
        state = coord.engine.run(task_id)
    finally:
        coord.stop()
        ep_src.stop()
        ep_dst.stop()
    payload_total = total_files * 30_000
    hits = sum(1 for p in Path(tmp_path / "coordination").rglob("*")
               if p.is_file() and secret in p.read_bytes())
    control_bytes = coord.counters.bytes_in + coord.counters.bytes_out
    ok = (state is TaskState.SUCCEEDED
          and coord.counters.payload_bytes_seen == 0
          and coord.counters.data_channel_connections == 0
          and hits == 0
          and control_bytes < payload_total)
    report(7, ok, f"{total_files}-file task {state.value}; coordinator payload "
                  f"bytes=0 (counter={coord.counters.payload_bytes_seen}); "
                  f"credential byte-scan hits={hits}; control channel moved "
                  f"{control_bytes:,}B vs {payload_total:,}B payload")


AC8_CHILD = """
import sys
from xferkit.connectors import (LOCAL_USER, MockCloudProfile,
                                mockcloud_connector, register_connector)
from xferkit.engine import Engine, TransferSpec

src, dst, journal_dir, bandwidth = sys.argv[1:5]
register_connector("ac8-mock", mockcloud_connector(
    MockCloudProfile(bandwidth_cap=float(bandwidth))))
engine = Engine(journal_dir)
engine.add_endpoint("s", "posix", {"root": src}, LOCAL_USER)
engine.add_endpoint("d", "ac8-mock", {"root": dst}, LOCAL_USER)
task_id = engine.submit(TransferSpec(source=("s", "data"), destination=("d", "out"),
                                     cc=2, blocksize=524288, max_retries=2))
print(task_id, flush=True)
engine.run(task_id)
"""


def test_criterion_8_crash_safety(tmp_path):
    """Randomized kill-and-resume always completes with bounded resends."""
    bandwidth = 8e6
    blocksize = 524288
    cc = 2
    rng = random.Random(88)
    register_connector("ac8-mock", mockcloud_connector(
        MockCloudProfile(bandwidth_cap=bandwidth)))
    trials = 20
    failures = []
    started = time.monotonic()
    for trial in range(trials):
        base = tmp_path / f"t{trial:02d}"
        src = base / "src"
        digests = write_random_tree(
            src / "data", {f"f{i}.bin": 10 * MIB // 4 for i in range(4)},
            seed=trial)
        journal_dir = base / "journals"
        child = subprocess.Popen(
            [sys.executable, "-c", AC8_CHILD, str(src), str(base / "dst"),
             str(journal_dir), str(bandwidth)],
            stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
        task_id = child.stdout.readline().strip()
        assert task_id, "child never submitted"
        delay = rng.uniform(0.10, 1.40)
        time.sleep(delay)
        killed = child.poll() is None
        child.kill()
        child.wait(timeout=10)

        engine = Engine(journal_dir)
        engine.add_endpoint("s", "posix", {"root": str(src)}, LOCAL_USER)
        engine.add_endpoint("d", "ac8-mock", {"root": str(base / "dst")}, LOCAL_USER)
        task = rebuild_task(task_id, replay(journal_dir / f"{task_id}.journal"))
        missing = sum(rec.size - rec.completed.total()
                      for rec in task.files.values())
        state = engine.resume(task_id)
        resent = engine.status(task_id)["run_bytes"]
        got = tree_digests(base / "dst" / "out")
        bound = missing + cc * blocksize
        if not (state is TaskState.SUCCEEDED and got == digests
                and resent <= bound):
            failures.append(
                f"trial {trial}: state={state}, digests_ok={got == digests}, "
                f"resent={resent} > bound={bound} (killed_mid={killed})")
    elapsed = time.monotonic() - started
    ok = not failures
    report(8, ok, f"{trials} randomized kill/resume trials all succeeded with "
                  f"resends <= missing + {cc}x blocksize; runtime={elapsed:.1f}s"
                  + ("" if ok else f"; failures: {failures[:3]}"))


def test_criterion_9_statistical_kernels():
    """Kernels match independent oracles to 1e-9 relative; exact examples hold."""
    rng = random.Random(20260810)
    worst_fit = 0.0
    worst_rho = 0.0
    for _ in range(1000):
        n = rng.randint(2, 40)
        xs = [rng.uniform(-500, 500) for _ in range(n)]
        while len(set(xs)) < 2:
            xs = [rng.uniform(-500, 500) for _ in range(n)]
        ys = [rng.uniform(-20, 20) + rng.uniform(-3, 3) * x for x in xs]
        fit = linfit(list(zip(xs, ys)))
        # oracle: uncentered normal equations via numpy solve
        sx, sxx = float(np.sum(xs)), float(np.sum(np.square(xs)))
        sy, sxy = float(np.sum(ys)), float(np.dot(xs, ys))
        alpha, beta = np.linalg.solve([[n, sx], [sx, sxx]], [sy, sxy])
        scale = max(1.0, abs(alpha), abs(beta))
        worst_fit = max(worst_fit, abs(fit.alpha - alpha) / scale,
                        abs(fit.beta - beta) / scale)
        try:
            rho = pearson(xs, ys).rho
            expected = float(np.corrcoef(xs, ys)[0, 1])
            worst_rho = max(worst_rho, abs(rho - expected))
        except ZeroVariance:
            pass

    exact = []
    fit = linfit([(1, 5), (2, 7), (3, 9)])
    exact.append(fit.alpha == 3.0 and fit.beta == 2.0
                 and fit.residuals == [0.0, 0.0, 0.0])
    try:
        linfit([(2, 1), (2, 5)])
        exact.append(False)
    except DegenerateX:
        exact.append(True)
    exact.append(pearson([1, 2, 3], [3, 5, 7]).rho == 1.0)
    exact.append(pearson([1, 2, 3], [-1, -2, -3]).rho == -1.0)
    try:
        pearson([1, 2, 3], [4, 4, 4])
        exact.append(False)
    except ZeroVariance:
        exact.append(True)
    exact.append(predict_time(TransferModel(t0=0, R=128, S0=0, B=128, N=1)) == 1.0)
    exact.append(abs(predict_time(
        TransferModel(t0=0.05, R=10, S0=2.3, B=100, N=1000)) - 62.3) < 1e-12)
    tfit = fit_transfer_model(
        [(n, n * 0.08 + 3.0) for n in (50, 100, 200, 400)], B=10**9)
    exact.append(abs(tfit.t0 - 0.08) < 1e-9 * 0.08)
    smodel = fit_startup_model([(b * GB, 2.3 + b * 4.0) for b in range(1, 20, 2)])
    exact.append(abs(smodel.S0 - 2.3) < 1e-9 * 2.3)

    ok = worst_fit <= 1e-9 and worst_rho <= 1e-9 and all(exact)
    report(9, ok, f"1000 random instances: worst linfit rel err "
                  f"{worst_fit:.2e}, worst pearson err {worst_rho:.2e} "
                  f"(<=1e-9); {sum(exact)}/{len(exact)} exact examples hold")
