"""Convergence studies: run refinement ladders, fit rates, write reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .field import resolve_workers
from .problems import make_problem
from .solver import SolverConfig, solve

__all__ = [
    "ExperimentSpec",
    "Cell",
    "ConvergenceReport",
    "MeasurementFloorError",
    "fit_rate",
    "run_experiment",
    "emit_report",
    "read_csv",
    "ERROR_FLOOR",
]

log = logging.getLogger(__name__)

DEFAULT_LADDER = (8, 16, 32, 64, 128)
ERROR_FLOOR = 1e-14
CSV_FIELDS = ("problem", "k_y", "k_z", "q", "n_t", "err_y", "err_z", "runtime_s", "status")


class MeasurementFloorError(ValueError):
    """An error value is zero or negative, so its logarithm is undefined."""


def fit_rate(errors: Sequence[float], n_ts: Sequence[float]) -> float:
    """Negated OLS slope of ``log2(error)`` against ``log2(n_t)``."""
    errors = np.asarray(errors, dtype=float)
    n_ts = np.asarray(n_ts, dtype=float)
    if errors.shape != n_ts.shape or errors.ndim != 1:
        raise ValueError("errors and n_ts must be 1-D sequences of equal length")
    if errors.size < 2:
        raise ValueError("a rate needs at least two points")
    if np.any(~np.isfinite(errors)):
        raise ValueError("errors must be finite")
    if np.any(errors <= 0):
        raise MeasurementFloorError("error values at or below zero are below the measurement floor")
    if np.any(n_ts <= 0) or np.unique(n_ts).size < 2:
        raise ValueError("n_ts must be positive with at least two distinct values")
    x = np.log2(n_ts)
    y = np.log2(errors)
    xm = x - x.mean()
    slope = float(np.dot(xm, y - y.mean()) / np.dot(xm, xm))
    return -slope


@dataclass(frozen=True)
class ExperimentSpec:
    problem: str = "example1"
    params: dict = field(default_factory=dict)
    triples: tuple = ((1, 1, None),)
    ladder: tuple = DEFAULT_LADDER
    L: int = 8
    solver: dict = field(default_factory=dict)
    csv: str | None = None
    markdown: str | None = None
    plot_data: str | None = None
    workers: int | None = None

    def __post_init__(self) -> None:
        ladder = tuple(int(n) for n in self.ladder)
        if not ladder:
            raise ValueError("ladder must not be empty")
        if any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError(f"ladder must be strictly increasing, got {ladder}")
        triples = []
        for t in self.triples:
            t = tuple(t)
            if len(t) == 2:
                t = t + (None,)
            if len(t) != 3:
                raise ValueError(f"triples are (k_y, k_z, q); got {t}")
            ky, kz, q = int(t[0]), int(t[1]), (None if t[2] is None else int(t[2]))
            if ky < 1 or kz < 1:
                raise ValueError(f"step counts must be positive, got {t}")
            if ladder[0] < max(ky, kz) + 1:
                raise ValueError(f"n_t={ladder[0]} too small for triple {t}")
            triples.append((ky, kz, q))
        if not triples:
            raise ValueError("at least one (k_y, k_z, q) triple is required")
        object.__setattr__(self, "ladder", ladder)
        object.__setattr__(self, "triples", tuple(triples))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        data = dict(data)
        for key in ("triples", "ladder"):
            if key in data:
                data[key] = tuple(tuple(t) if isinstance(t, list) else t for t in data[key])
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config(self, k_y: int, k_z: int, q: int | None, n_t: int) -> SolverConfig:
        return SolverConfig(k_y=k_y, k_z=k_z, n_t=n_t, q=q, L=self.L, **self.solver)


@dataclass
class Cell:
    k_y: int
    k_z: int
    q: int
    n_t: int
    err_y: float = math.nan
    err_z: float = math.nan
    runtime_s: float = 0.0
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ConvergenceReport:
    problem: str
    cells: list[Cell]
    excluded: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.cells.sort(key=lambda c: (c.k_y, c.k_z, c.q, c.n_t))

    def triples(self) -> list[tuple[int, int, int]]:
        seen: list[tuple[int, int, int]] = []
        for c in self.cells:
            key = (c.k_y, c.k_z, c.q)
            if key not in seen:
                seen.append(key)
        return seen

    def row(self, triple: tuple[int, int, int]) -> list[Cell]:
        return [c for c in self.cells if (c.k_y, c.k_z, c.q) == tuple(triple)]

    def rate(self, triple: tuple[int, int, int], component: str = "y") -> float | None:
        """Fitted rate for one triple, ignoring failed cells and errors below the floor."""
        cells = [c for c in self.row(triple) if c.ok]
        attr = "err_" + component
        keep = []
        for c in cells:
            err = getattr(c, attr)
            if err < ERROR_FLOOR:
                msg = (f"{self.problem} {triple} n_t={c.n_t}: {component.upper()} error {err:.3e} "
                       f"below {ERROR_FLOOR:g}, excluded from the rate fit")
                if msg not in self.excluded:
                    self.excluded.append(msg)
                    log.info(msg)
                continue
            keep.append(c)
        if len({c.n_t for c in keep}) < 2:
            return None
        return fit_rate([getattr(c, attr) for c in keep], [c.n_t for c in keep])


def _run_cell(args) -> Cell:
    problem_name, params, cfg_kwargs = args
    ky, kz, n_t = cfg_kwargs["k_y"], cfg_kwargs["k_z"], cfg_kwargs["n_t"]
    start = time.perf_counter()
    try:
        problem = make_problem(problem_name, **params)
        cfg = SolverConfig(**cfg_kwargs)
        result = solve(problem, cfg)
        err_y, _ = result.errors(problem)
        err_z = result.z_error_mean(problem)
        return Cell(ky, kz, result.q, n_t, err_y, err_z, time.perf_counter() - start)
    except Exception as exc:  # recorded per cell, the ladder goes on
        q = cfg_kwargs.get("q")
        return Cell(ky, kz, -1 if q is None else q, n_t, math.nan, math.nan,
                    time.perf_counter() - start, f"failed: {type(exc).__name__}: {exc}")


def run_experiment(spec: ExperimentSpec) -> ConvergenceReport:
    jobs = []
    for ky, kz, q in spec.triples:
        for n_t in spec.ladder:
            kwargs = asdict(spec.config(ky, kz, q, n_t))
            jobs.append((spec.problem, dict(spec.params), kwargs))
    workers = resolve_workers(spec.workers)
    if workers == 1:
        cells = [_run_cell(job) for job in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    # a failed cell has no resolved q; borrow it from a sibling of the same triple
    for c in cells:
        if c.q == -1:
            sib = next((o for o in cells if o.ok and (o.k_y, o.k_z) == (c.k_y, c.k_z)), None)
            if sib is not None:
                c.q = sib.q
    report = ConvergenceReport(spec.problem, cells)
    for triple in report.triples():
        for comp in ("y", "z"):
            report.rate(triple, comp)
    return report


# --- output ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(report: ConvergenceReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for c in report.cells:
            w.writerow([report.problem, c.k_y, c.k_z, c.q, c.n_t, _fmt(c.err_y), _fmt(c.err_z),
                        _fmt(c.runtime_s), c.status])


def read_csv(path) -> ConvergenceReport:
    cells, problem = [], None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            problem = row["problem"]
            cells.append(Cell(int(row["k_y"]), int(row["k_z"]), int(row["q"]), int(row["n_t"]),
                              float(row["err_y"]), float(row["err_z"]), float(row["runtime_s"]),
                              row["status"]))
    return ConvergenceReport(problem or "", cells)


def _label(triple) -> str:
    ky, kz, q = triple
    return f"K_y={ky}, K_z={kz}, q={q}"


def markdown_table(report: ConvergenceReport) -> str:
    ladder = sorted({c.n_t for c in report.cells})
    out = []
    for comp, title in (("y", "|Y_0 - y_0^0|"), ("z", "|Z_0 - z_0^0|")):
        out.append(f"### {report.problem}: {title}\n")
        out.append("| | " + " | ".join(f"N={n}" for n in ladder) + " | CR |")
        out.append("|---" * (len(ladder) + 2) + "|")
        for triple in report.triples():
            by_n = {c.n_t: c for c in report.row(triple)}
            vals = []
            for n in ladder:
                c = by_n.get(n)
                if c is None:
                    vals.append("")
                elif not c.ok:
                    vals.append("failed")
                else:
                    vals.append(f"{getattr(c, 'err_' + comp):.2e}")
            try:
                rate = report.rate(triple, comp)
            except MeasurementFloorError:
                rate = None
            cr = "" if rate is None else f"{rate:.2f}"
            out.append(f"| {_label(triple)} | " + " | ".join(vals) + f" | {cr} |")
        out.append("")
    return "\n".join(out)


def plot_data(report: ConvergenceReport) -> str:
    """One block per triple: ``log2(n_t) log2(err_y) log2(err_z)``."""
    blocks = []
    for triple in report.triples():
        lines = [f"# {_label(triple)}", "# log2_nt log2_err_y log2_err_z"]
        for c in report.row(triple):
            if not c.ok:
                continue
            ly = math.log2(c.err_y) if c.err_y > 0 else math.nan
            lz = math.log2(c.err_z) if c.err_z > 0 else math.nan
            lines.append(f"{math.log2(c.n_t)!r} {ly!r} {lz!r}")
        blocks.append("\n".join(lines))
    return "\n\n\n".join(blocks) + "\n"


def emit_report(report: ConvergenceReport, csv_path=None, markdown_path=None,
                plot_path=None) -> list[Path]:
    written = []
    for path, writer in ((csv_path, lambda p: write_csv(report, p)),
                         (markdown_path, lambda p: Path(p).write_text(markdown_table(report))),
                         (plot_path, lambda p: Path(p).write_text(plot_data(report)))):
        if path is None:
            continue
        path = Path(path)
        try:
            writer(path)
        except OSError as exc:
            raise OSError(f"cannot write report to {path}: {exc}") from exc
        written.append(path)
    return written


def iter_rates(report: ConvergenceReport) -> Iterable[tuple[tuple, float | None, float | None]]:
    for triple in report.triples():
        yield triple, report.rate(triple, "y"), report.rate(triple, "z")
