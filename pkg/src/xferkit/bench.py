"""Benchmark harness: dataset generation, sweeps, and model fitting.

Reproduces the performance-model experiment designs at desk scale: a
fixed total dataset split into N equal files (file-count sweeps recover
the per-file overhead), concurrency sweeps, single-file size sweeps
(startup-cost recovery), and integrity on/off comparisons. Runs land in a
CSV; fit_and_report() turns a CSV into fitted models, per-sweep Pearson
correlations, comparison tables, gnuplot-ready data files, and rendered
figures.
"""

from __future__ import annotations

import csv
import enum
import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

from .connectors import LOCAL_USER
from .engine import (Engine, Integrity, LocalEndpoint, TaskState,
                     TransferSpec)
from .perfmodel import (ZeroVariance, fit_startup_model, fit_transfer_model,
                        pearson)

CSV_COLUMNS = ["plan_kind", "topology", "total_bytes", "grid_value",
               "repeat_index", "seed", "T_seconds", "throughput_Bps",
               "retries", "integrity", "status"]

POORLY_MODELED_RHO = 0.95


class PlanError(ValueError):
    pass


class PlanKind(enum.Enum):
    FILE_COUNT = "filecount"
    CONCURRENCY = "concurrency"
    SIZE = "size"
    INTEGRITY = "integrity"


@dataclass
class ExperimentPlan:
    kind: PlanKind
    total_bytes: int
    grid: list[int]
    repeats: int = 3
    topology: str = "direct-api"
    seed: int = 0
    # fixed parameters for sweeps that do not vary them
    file_count: int = 16
    cc: int = 1
    parallelism: int = 4
    blocksize: int = 1024 * 1024
    integrity: Integrity = Integrity.OFF

    def validate(self) -> None:
        if self.repeats < 1:
            raise PlanError("repeats must be >= 1")
        if not self.grid:
            raise PlanError("grid must be non-empty")
        if any(b >= a for a, b in zip(self.grid[1:], self.grid)):
            raise PlanError("grid must be strictly increasing")
        if self.kind is PlanKind.FILE_COUNT and max(self.grid) > self.total_bytes:
            raise PlanError("cannot split total_bytes into more files than bytes")
        if self.kind in (PlanKind.CONCURRENCY, PlanKind.INTEGRITY):
            if self.file_count > self.total_bytes:
                raise PlanError("file_count exceeds total_bytes")
        if self.kind is PlanKind.INTEGRITY and self.grid != [0, 1]:
            raise PlanError("integrity compare grid must be [0, 1]")


@dataclass
class RunRecord:
    plan_kind: str
    topology: str
    total_bytes: int
    grid_value: int
    repeat_index: int
    seed: int
    T_seconds: float
    throughput_Bps: float
    retries: int
    integrity: str
    status: str  # "ok" or "failed:<reason>"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ManifestEntry:
    path: str
    size: int
    digest: str


def make_dataset(total_bytes: int, n_files: int, directory: str | Path,
                 seed: int = 0) -> list[ManifestEntry]:
    """Write n_files pseudorandom files summing to total_bytes (sizes differ
    by at most one byte); returns and persists the manifest."""
    if n_files < 1:
        raise PlanError("n_files must be >= 1")
    if n_files > total_bytes:
        raise PlanError(f"cannot split {total_bytes} bytes into {n_files} files")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    base, extra = divmod(total_bytes, n_files)
    rng = random.Random(seed)
    entries = []
    import hashlib

    for i in range(n_files):
        size = base + (1 if i < extra else 0)
        payload = rng.randbytes(size)
        name = f"part-{i:05d}.bin"
        (directory / name).write_bytes(payload)
        entries.append(ManifestEntry(path=name, size=size,
                                     digest=hashlib.sha256(payload).hexdigest()))
    manifest = [{"path": e.path, "size": e.size, "digest": e.digest} for e in entries]
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return entries


def _dataset_matches(directory: Path, total_bytes: int, n_files: int) -> bool:
    """True if a previously staged dataset already fits the plan."""
    manifest = directory / "manifest.json"
    if not manifest.exists():
        return False
    try:
        entries = json.loads(manifest.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return (len(entries) == n_files
            and sum(e["size"] for e in entries) == total_bytes)


@dataclass
class RunContext:
    """Everything a transfer runner needs for one measured run."""

    plan: ExperimentPlan
    grid_value: int
    repeat_index: int
    dataset_name: str  # directory name under the runner's source root
    dest_name: str  # namespace for this run at the destination
    cc: int
    integrity: Integrity
    seed: int


@dataclass
class RunOutcome:
    T_seconds: float
    retries: int = 0
    succeeded: bool = True
    failure: str = ""


class EngineRunner:
    """Runs measured transfers through an in-process engine (two-party).

    The destination endpoint decides the scenario: a mock-cloud endpoint
    for overhead injection, an object endpoint pointed at the simulator
    for placement/integrity studies, or plain POSIX.
    """

    def __init__(self, workdir: str | Path, dest: LocalEndpoint):
        self.workdir = Path(workdir)
        self.source_root = self.workdir / "datasets"
        self.source_root.mkdir(parents=True, exist_ok=True)
        self.engine = Engine(self.workdir / "journals")
        self.engine.add_endpoint("bench-src", "posix",
                                 {"root": str(self.source_root)}, LOCAL_USER)
        self.engine.endpoints["bench-dst"] = dest

    def __call__(self, ctx: RunContext) -> RunOutcome:
        spec = TransferSpec(
            source=("bench-src", ctx.dataset_name),
            destination=("bench-dst", ctx.dest_name),
            cc=ctx.cc, parallelism=ctx.plan.parallelism,
            integrity=ctx.integrity, blocksize=ctx.plan.blocksize)
        task_id = self.engine.submit(spec)
        t0 = time.perf_counter()
        state = self.engine.run(task_id)
        elapsed = time.perf_counter() - t0
        snap = self.engine.status(task_id)
        retries = sum(max(0, f["attempts"] - 1) for f in snap["files"].values())
        if state is TaskState.SUCCEEDED:
            return RunOutcome(elapsed, retries)
        reason = next((f["error"] for f in snap["files"].values() if f["error"]),
                      state.value)
        return RunOutcome(elapsed, retries, succeeded=False, failure=str(reason))


class CoordinatorRunner:
    """Runs measured transfers through a third-party coordinator.

    The coordinator and both endpoints must already be wired up; the source
    endpoint must serve this runner's source_root so staged datasets are
    visible to it.
    """

    def __init__(self, source_root: str | Path, coordinator, source_ep: str,
                 dest_ep: str):
        self.source_root = Path(source_root)
        self.source_root.mkdir(parents=True, exist_ok=True)
        self.coordinator = coordinator
        self.source_ep = source_ep
        self.dest_ep = dest_ep

    def __call__(self, ctx: RunContext) -> RunOutcome:
        spec = TransferSpec(
            source=(self.source_ep, ctx.dataset_name),
            destination=(self.dest_ep, ctx.dest_name),
            cc=ctx.cc, parallelism=ctx.plan.parallelism,
            integrity=ctx.integrity, blocksize=ctx.plan.blocksize)
        engine = self.coordinator.engine
        task_id = engine.submit(spec)
        t0 = time.perf_counter()
        state = engine.run(task_id)
        elapsed = time.perf_counter() - t0
        snap = engine.status(task_id)
        retries = sum(max(0, f["attempts"] - 1) for f in snap["files"].values())
        if state is TaskState.SUCCEEDED:
            return RunOutcome(elapsed, retries)
        reason = next((f["error"] for f in snap["files"].values() if f["error"]),
                      state.value)
        return RunOutcome(elapsed, retries, succeeded=False, failure=str(reason))


def run_plan(plan: ExperimentPlan, transfer, workdir: str | Path,
             source_root: str | Path, csv_path: str | Path | None = None,
             log=print) -> list[RunRecord]:
    """Execute grid x repeats measured runs.

    `transfer` is a callable RunContext -> RunOutcome; `source_root` is
    where datasets are staged (the runner's source endpoint root). Dataset
    generation happens outside the timed region. Failed runs are recorded
    with their cause and excluded from fitting downstream.
    """
    plan.validate()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    source_root = Path(source_root)
    records: list[RunRecord] = []
    for grid_value in plan.grid:
        # repeats re-run the same experiment, so they share one dataset
        seed = plan.seed * 1_000_003 + grid_value * 101
        if plan.kind is PlanKind.FILE_COUNT:
            n_files, total = grid_value, plan.total_bytes
        elif plan.kind is PlanKind.CONCURRENCY:
            n_files, total = plan.file_count, plan.total_bytes
        elif plan.kind is PlanKind.SIZE:
            n_files, total = 1, grid_value
        else:  # INTEGRITY
            n_files, total = plan.file_count, plan.total_bytes
        dataset_name = f"ds-{plan.kind.value}-{plan.topology}-{grid_value}"
        if not _dataset_matches(source_root / dataset_name, total, n_files):
            make_dataset(total, n_files, source_root / dataset_name, seed=seed)
        for rep in range(plan.repeats):
            if plan.kind is PlanKind.CONCURRENCY:
                cc, integ = grid_value, plan.integrity
            elif plan.kind is PlanKind.INTEGRITY:
                cc = plan.cc
                integ = Integrity.STRONG if grid_value else Integrity.OFF
            else:
                cc, integ = plan.cc, plan.integrity

            tag = f"{plan.kind.value}-{plan.topology}-{grid_value}-{rep}"
            # repeats overwrite one destination namespace, as rerunning an
            # upload to the same bucket would
            dest_name = f"out-{plan.kind.value}-{plan.topology}-{grid_value}"
            ctx = RunContext(plan=plan, grid_value=grid_value, repeat_index=rep,
                             dataset_name=dataset_name, dest_name=dest_name,
                             cc=cc, integrity=integ, seed=seed)
            outcome = transfer(ctx)
            status = "ok" if outcome.succeeded else f"failed:{outcome.failure[:80]}"
            throughput = total / outcome.T_seconds if outcome.T_seconds > 0 else 0.0
            records.append(RunRecord(
                plan_kind=plan.kind.value, topology=plan.topology,
                total_bytes=total, grid_value=grid_value, repeat_index=rep,
                seed=seed, T_seconds=outcome.T_seconds,
                throughput_Bps=throughput, retries=outcome.retries,
                integrity=integ.value, status=status))
            log(f"[bench] {tag}: T={outcome.T_seconds:.3f}s "
                f"retries={outcome.retries} {status}")
    if csv_path is not None:
        write_csv(records, csv_path)
    return records


def write_csv(records: list[RunRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([r.plan_kind, r.topology, r.total_bytes, r.grid_value,
                             r.repeat_index, r.seed, f"{r.T_seconds:.6f}",
                             f"{r.throughput_Bps:.3f}", r.retries, r.integrity,
                             r.status])


def read_csv(path: str | Path) -> list[RunRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(RunRecord(
                plan_kind=row["plan_kind"], topology=row["topology"],
                total_bytes=int(row["total_bytes"]), grid_value=int(row["grid_value"]),
                repeat_index=int(row["repeat_index"]), seed=int(row["seed"]),
                T_seconds=float(row["T_seconds"]),
                throughput_Bps=float(row["throughput_Bps"]),
                retries=int(row["retries"]), integrity=row["integrity"],
                status=row["status"]))
    return records


# ---------------------------------------------------------------------------
# Reporting


@dataclass
class SweepReport:
    plan_kind: str
    topology: str
    runs: int
    failures: int
    pearson_rho: float | None = None
    poorly_modeled: bool = False
    fitted_t0: float | None = None
    fitted_alpha: float | None = None
    fitted_t_u: float | None = None
    fitted_s0: float | None = None
    flags: tuple[str, ...] = ()
    # both aggregation views of the same sweep (mean-per-grid-point vs raw)
    fitted_t0_mean_agg: float | None = None
    grid_stats: list[tuple[int, float, float]] = field(default_factory=list)
    integrity_throughput: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class Report:
    sweeps: list[SweepReport]
    csv_path: str
    figures: list[str] = field(default_factory=list)
    data_files: list[str] = field(default_factory=list)

    def sweep(self, plan_kind: str, topology: str | None = None) -> SweepReport:
        for s in self.sweeps:
            if s.plan_kind == plan_kind and (topology is None or s.topology == topology):
                return s
        raise KeyError(f"no sweep {plan_kind}/{topology}")

    def to_dict(self) -> dict:
        return {"csv": self.csv_path,
                "sweeps": [s.to_dict() for s in self.sweeps],
                "figures": self.figures, "data_files": self.data_files}

    def render_text(self) -> str:
        lines = [f"benchmark report for {self.csv_path}", ""]
        for s in self.sweeps:
            lines.append(f"== {s.plan_kind} / {s.topology} "
                         f"({s.runs} runs, {s.failures} failed)")
            if s.pearson_rho is not None:
                mark = "  [POORLY MODELED: rho < 0.95]" if s.poorly_modeled else ""
                lines.append(f"   pearson rho = {s.pearson_rho:.4f}{mark}")
            if s.fitted_t0 is not None:
                lines.append(f"   per-file overhead t0 = {s.fitted_t0 * 1000:.2f} ms"
                             f" (mean-aggregated: {s.fitted_t0_mean_agg * 1000:.2f} ms)")
                lines.append(f"   intercept (B/R + S0) = {s.fitted_alpha:.3f} s")
            if s.fitted_s0 is not None:
                lines.append(f"   startup cost S0 = {s.fitted_s0:.3f} s; "
                             f"t_u = {s.fitted_t_u:.3f} s/GB")
            if s.flags:
                lines.append(f"   flags: {', '.join(s.flags)}")
            for gv, mean_t, mean_thr in s.grid_stats:
                lines.append(f"   grid {gv:>8}: mean T = {mean_t:8.3f} s, "
                             f"throughput = {mean_thr / 1e6:8.2f} MB/s")
            for label, thr in s.integrity_throughput.items():
                lines.append(f"   integrity {label}: {thr / 1e6:.2f} MB/s")
            lines.append("")
        # cross-topology comparison of per-file overheads
        by_kind: dict[str, list[SweepReport]] = {}
        for s in self.sweeps:
            if s.fitted_t0 is not None:
                by_kind.setdefault(s.plan_kind, []).append(s)
        for kind, sweeps in by_kind.items():
            if len(sweeps) > 1:
                lines.append(f"== {kind}: per-file overhead by topology")
                for s in sorted(sweeps, key=lambda s: s.fitted_t0):
                    lines.append(f"   {s.topology:>12}: t0 = {s.fitted_t0 * 1000:.2f} ms")
                lines.append("")
        return "\n".join(lines)


def _grid_stats(rows: list[RunRecord]) -> list[tuple[int, float, float]]:
    out = []
    for gv in sorted({r.grid_value for r in rows}):
        sub = [r for r in rows if r.grid_value == gv]
        out.append((gv, sum(r.T_seconds for r in sub) / len(sub),
                    sum(r.throughput_Bps for r in sub) / len(sub)))
    return out


def fit_and_report(csv_path: str | Path, out_dir: str | Path | None = None,
                   figures: bool = True) -> Report:
    """Fit models per sweep in a results CSV and render the report bundle."""
    csv_path = Path(csv_path)
    records = read_csv(csv_path)
    if not records:
        raise PlanError(f"{csv_path} has no rows")
    out_dir = Path(out_dir) if out_dir else csv_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    report = Report(sweeps=[], csv_path=str(csv_path))

    groups: dict[tuple[str, str], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.plan_kind, r.topology), []).append(r)

    for (plan_kind, topology), rows in groups.items():
        ok = [r for r in rows if r.ok]
        sweep = SweepReport(plan_kind=plan_kind, topology=topology,
                            runs=len(rows), failures=len(rows) - len(ok))
        if len(ok) >= 2:
            self_kind = PlanKind(plan_kind)
            if self_kind is PlanKind.FILE_COUNT:
                pairs = [(float(r.grid_value), r.T_seconds) for r in ok]
                try:
                    corr = pearson([p[0] for p in pairs], [p[1] for p in pairs])
                    sweep.pearson_rho = corr.rho
                    sweep.poorly_modeled = corr.rho < POORLY_MODELED_RHO
                except ZeroVariance:
                    pass
                if len({r.grid_value for r in ok}) >= 3:
                    fit = fit_transfer_model(pairs, B=ok[0].total_bytes)
                    sweep.fitted_t0 = fit.t0
                    sweep.fitted_alpha = fit.alpha
                    sweep.flags = fit.flags
                    means = _grid_stats(ok)
                    agg = fit_transfer_model([(gv, t) for gv, t, _ in means],
                                             B=ok[0].total_bytes)
                    sweep.fitted_t0_mean_agg = agg.t0
            elif self_kind is PlanKind.SIZE:
                if len({r.grid_value for r in ok}) >= 3:
                    model = fit_startup_model([(r.grid_value, r.T_seconds) for r in ok])
                    sweep.fitted_s0 = model.S0
                    sweep.fitted_t_u = model.t_u
                    sweep.flags = model.flags
                    pairs = [(float(r.grid_value), r.T_seconds) for r in ok]
                    try:
                        corr = pearson([p[0] for p in pairs], [p[1] for p in pairs])
                        sweep.pearson_rho = corr.rho
                        sweep.poorly_modeled = corr.rho < POORLY_MODELED_RHO
                    except ZeroVariance:
                        pass
            elif self_kind is PlanKind.INTEGRITY:
                for label, flag in (("off", "off"), ("strong", "strong")):
                    sub = [r for r in ok if r.integrity == flag]
                    if sub:
                        sweep.integrity_throughput[label] = (
                            sum(r.throughput_Bps for r in sub) / len(sub))
        sweep.grid_stats = _grid_stats(ok)
        report.sweeps.append(sweep)

        # gnuplot-compatible two-column data, one file per sweep
        dat = out_dir / f"{plan_kind}-{topology}.dat"
        with open(dat, "w") as fh:
            fh.write("# grid_value T_seconds\n")
            for r in sorted(ok, key=lambda r: (r.grid_value, r.repeat_index)):
                fh.write(f"{r.grid_value} {r.T_seconds:.6f}\n")
        report.data_files.append(str(dat))

        if figures:
            from . import plotting

            fig_path = out_dir / f"{plan_kind}-{topology}.png"
            plotting.render_sweep(ok, sweep, fig_path)
            report.figures.append(str(fig_path))

    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    (out_dir / "report.txt").write_text(report.render_text())
    return report
