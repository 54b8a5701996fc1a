"""Synthetic benchmark harness: data generation, sweeps, metrics, plots.

Reproduces the runtime/criterion comparison between the sliding solver and
its boosted variant on synthetic volumes: for every (volume size, atom
count, repetition) cell a random ground-truth measure is drawn, blurred by
an axially elongated surrogate PSF, corrupted with white Gaussian noise,
and handed bit-identically to both solvers. Results land in a records CSV
(one row per trial and algorithm) plus a quartile summary CSV; plots show
medians with interquartile bands, normalized to the smallest median seen by
the sliding solver.

Reproducibility: every trial derives its RNG from (master seed, size,
count, repetition), so repeated runs with the same config produce identical
CSVs except for the wall-time columns (which sit last in the row).
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .forward import Psf, forward
from .measures import AtomParams, DomainBounds, WeightedMeasure
from .solvers import BSFW, SFW, SolverOptions, SolveResult, bsfw, sfw
from .volumes import GridGeometry, Volume

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1

#: record CSV column order; wall-time columns are last so "identical modulo
#: time" checks can simply drop the tail
RECORD_COLUMNS = (
    "schema_version", "size", "atom_count", "trial", "algorithm", "seed",
    "lam", "noise_sigma", "termination", "outer_iterations", "final_criterion",
    "recovered_atoms", "n_matched", "n_missed", "n_spurious",
    "max_position_error", "mean_position_error", "mean_sigma_error",
    "mean_shape_error", "mean_weight_error", "eta_max_final",
    "t_total", "t_table", "t_certificate", "t_lasso", "t_descent",
)
TIME_COLUMNS = ("t_total", "t_table", "t_certificate", "t_lasso", "t_descent")

SUMMARY_COLUMNS = (
    "schema_version", "size", "atom_count", "algorithm", "trials",
    "criterion_q1", "criterion_median", "criterion_q3",
    "time_q1", "time_median", "time_q3",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of a benchmark sweep; serializable as key = value text."""

    sizes: tuple[int, ...] = (60, 80, 100)
    atom_counts: tuple[int, ...] = (4, 6, 8)
    lam: float = 0.2
    noise_sigma: float | None = None    # absolute noise std; None picks relative
    noise_rel: float = 0.01             # fraction of the noiseless peak
    repetitions: int = 30
    seed: int = 0
    psf_lateral_sigma: float = 1.0
    psf_axial_sigma: float = 3.0
    min_separation: float | None = None  # None: see resolved_min_separation
    out_dir: str = "bench_out"
    domain_sigma: tuple[float, float] = (0.7, 1.3)
    domain_shape: tuple[float, float] = (1.6, 2.4)
    margin: float | None = None          # None: 3x the largest domain sigma
    truth_weight: tuple[float, float] = (1.0, 3.0)
    truth_sigma: tuple[float, float] = (1.3, 1.3)
    truth_shape: tuple[float, float] = (1.6, 1.6)
    n_sigma: int = 2                     # benchmark grids: domain corners + refine
    n_shape: int = 2
    max_outer_factor: int = 4            # iteration cap = factor * atom count
    match_radius: float = 2.0
    warmup: bool = True
    workers: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "atom_counts", tuple(int(c) for c in self.atom_counts))
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.lam <= 0.0:
            raise ValueError("lam must be > 0")
        if not self.psf_axial_sigma >= self.psf_lateral_sigma > 0.0:
            raise ValueError("need axial sigma >= lateral sigma > 0")
        support = psf_support_voxels(self.psf_lateral_sigma, self.psf_axial_sigma)
        if min(self.sizes) < 2 * support:
            raise ValueError(
                f"smallest size {min(self.sizes)} is below twice the PSF "
                f"support ({support} voxels)")

    @property
    def resolved_min_separation(self) -> float:
        if self.min_separation is not None:
            return self.min_separation
        return max(3.0 * self.truth_sigma[1], 4.0 * self.psf_axial_sigma)


def psf_support_voxels(lateral_sigma: float, axial_sigma: float) -> int:
    """Support radius of the surrogate kernel in voxels (three sigma)."""
    return math.ceil(3.0 * max(lateral_sigma, axial_sigma))


# --- config file: one "key = value" line per ExperimentConfig field ---------

def _opt(parse):
    return lambda s: None if s.strip().lower() in ("none", "auto") else parse(s)


def _tuple_of(parse):
    return lambda s: tuple(parse(x) for x in s.split(","))


def _parse_bool(s: str) -> bool:
    lowered = s.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_CONFIG_PARSERS = {
    "sizes": _tuple_of(int),
    "atom_counts": _tuple_of(int),
    "lam": float,
    "noise_sigma": _opt(float),
    "noise_rel": float,
    "repetitions": int,
    "seed": int,
    "psf_lateral_sigma": float,
    "psf_axial_sigma": float,
    "min_separation": _opt(float),
    "out_dir": str.strip,
    "domain_sigma": _tuple_of(float),
    "domain_shape": _tuple_of(float),
    "margin": _opt(float),
    "truth_weight": _tuple_of(float),
    "truth_sigma": _tuple_of(float),
    "truth_shape": _tuple_of(float),
    "n_sigma": int,
    "n_shape": int,
    "max_outer_factor": int,
    "match_radius": float,
    "warmup": _parse_bool,
    "workers": _opt(int),
}


def config_from_text(text: str) -> ExperimentConfig:
    values = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_PARSERS:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_PARSERS[key](value.strip())
        except ValueError as exc:
            raise ValueError(f"config line {ln}: bad value for {key!r}: {exc}") from exc
    return ExperimentConfig(**values)


def config_from_file(path) -> ExperimentConfig:
    return config_from_text(Path(path).read_text())


def config_to_text(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if value is None:
            rendered = "none"
        elif isinstance(value, tuple):
            rendered = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def config_to_file(config: ExperimentConfig, path) -> None:
    Path(path).write_text(config_to_text(config))


def default_domain(dims, sigma_bounds=(0.7, 1.3), shape_bounds=(1.6, 2.4),
                   margin: float | None = None) -> DomainBounds:
    """Benchmark parameter domain for a given grid.

    Positions keep a margin of three times the largest admissible sigma from
    every face so the periodic wrap-around stays negligible; the shape lower
    bound stays above 1 to keep the criterion differentiable at atom centers.
    """
    if margin is None:
        margin = 3.0 * sigma_bounds[1]
    lower = (margin,) * 3
    upper = tuple(n - 1.0 - margin for n in dims)
    if not all(lo < hi for lo, hi in zip(lower, upper)):
        raise ValueError(f"margin {margin} leaves no interior in grid {tuple(dims)}")
    return DomainBounds(pos_lower=lower, pos_upper=upper,
                        sigma_min=sigma_bounds[0], sigma_max=sigma_bounds[1],
                        shape_min=shape_bounds[0], shape_max=shape_bounds[1])


def make_surrogate_psf(geom: GridGeometry, lateral_sigma: float,
                       axial_sigma: float) -> Psf:
    """Axially elongated Gaussian kernel, unit sum, centered.

    Rotationally symmetric about the vertical (z) axis and centro-symmetric,
    as the certificate's template table requires.
    """
    if not axial_sigma >= lateral_sigma > 0.0:
        raise ValueError("need axial sigma >= lateral sigma > 0")
    nx, ny, nz = geom.dims
    if 6.0 * lateral_sigma > min(nx, ny) or 6.0 * axial_sigma > nz:
        raise ValueError(
            f"kernel sigmas ({lateral_sigma}, {axial_sigma}) exceed the support "
            f"of grid {geom.dims}")
    dx = np.arange(nx) - nx // 2
    dy = np.arange(ny) - ny // 2
    dz = np.arange(nz) - nz // 2
    r2 = dx[:, None, None] ** 2 + dy[None, :, None] ** 2
    data = np.exp(-0.5 * r2 / lateral_sigma**2
                  - 0.5 * dz[None, None, :] ** 2 / axial_sigma**2)
    return Psf(Volume(data), normalize=True)


def sample_ground_truth(config: ExperimentConfig, size: int, count: int,
                        rng: np.random.Generator,
                        max_attempts: int = 10000) -> WeightedMeasure:
    """Random well-separated measure inside the margin-shrunk interior."""
    bounds = default_domain((size,) * 3, config.domain_sigma, config.domain_shape,
                            config.margin)
    sep = config.resolved_min_separation
    lo = np.array(bounds.pos_lower)
    hi = np.array(bounds.pos_upper)
    positions: list[np.ndarray] = []
    attempts = 0
    while len(positions) < count:
        if attempts >= max_attempts:
            raise RuntimeError(
                f"could not place {count} atoms with separation {sep} in "
                f"{size}^3 after {max_attempts} draws")
        attempts += 1
        cand = lo + (hi - lo) * rng.uniform(size=3)
        if all(np.linalg.norm(cand - p) >= sep for p in positions):
            positions.append(cand)
    pairs = []
    for pos in positions:
        sigma = rng.uniform(*config.truth_sigma)
        d = rng.uniform(*config.truth_shape)
        w = rng.uniform(*config.truth_weight)
        pairs.append((AtomParams(m=tuple(pos), sigma=sigma, d=d), w))
    return WeightedMeasure(tuple(pairs))


def synthesize_observation(truth: WeightedMeasure, psf: Psf, noise_sigma: float,
                           rng: np.random.Generator) -> Volume:
    """Blurred truth plus i.i.d. zero-mean Gaussian noise."""
    clean = forward(truth, psf)
    if noise_sigma == 0.0:
        return clean
    return Volume(clean.data + noise_sigma * rng.standard_normal(clean.dims))


@dataclass
class MatchedAtom:
    est_index: int
    truth_index: int
    position_error: float
    sigma_error: float
    shape_error: float
    weight_error: float


@dataclass
class MatchResult:
    pairs: list[MatchedAtom]
    missed: list[int]      # truth indices with no estimate nearby
    spurious: list[int]    # estimate indices matching nothing

    def _mean(self, attr: str) -> float:
        if not self.pairs:
            return float("nan")
        return float(np.mean([getattr(p, attr) for p in self.pairs]))

    @property
    def max_position_error(self) -> float:
        if not self.pairs:
            return float("nan")
        return float(max(p.position_error for p in self.pairs))

    @property
    def mean_position_error(self) -> float:
        return self._mean("position_error")

    @property
    def mean_sigma_error(self) -> float:
        return self._mean("sigma_error")

    @property
    def mean_shape_error(self) -> float:
        return self._mean("shape_error")

    @property
    def mean_weight_error(self) -> float:
        return self._mean("weight_error")


def match_atoms(estimated: WeightedMeasure, truth: WeightedMeasure,
                radius: float) -> MatchResult:
    """Greedy nearest-pair assignment between estimate and truth atoms."""
    if radius <= 0.0:
        raise ValueError("radius must be > 0")
    ne, nt = len(estimated), len(truth)
    dist = np.full((ne, nt), np.inf)
    for i, (te, _) in enumerate(estimated.atoms):
        for j, (tt, _) in enumerate(truth.atoms):
            dist[i, j] = np.linalg.norm(np.array(te.m) - np.array(tt.m))
    pairs: list[MatchedAtom] = []
    used_e, used_t = set(), set()
    while ne and nt:
        i, j = np.unravel_index(int(np.argmin(dist)), dist.shape)
        if not np.isfinite(dist[i, j]) or dist[i, j] > radius:
            break
        te, we = estimated.atoms[i]
        tt, wt = truth.atoms[j]
        pairs.append(MatchedAtom(
            est_index=int(i), truth_index=int(j),
            position_error=float(dist[i, j]),
            sigma_error=abs(te.sigma - tt.sigma),
            shape_error=abs(te.d - tt.d),
            weight_error=abs(we - wt)))
        used_e.add(int(i))
        used_t.add(int(j))
        dist[i, :] = np.inf
        dist[:, j] = np.inf
    return MatchResult(
        pairs=pairs,
        missed=[j for j in range(nt) if j not in used_t],
        spurious=[i for i in range(ne) if i not in used_e])


@dataclass
class TrialRecord:
    """One CSV row: one algorithm on one trial."""

    size: int
    atom_count: int
    trial: int
    algorithm: str
    seed: int
    lam: float
    noise_sigma: float
    termination: str
    outer_iterations: int
    final_criterion: float
    recovered_atoms: int
    n_matched: int
    n_missed: int
    n_spurious: int
    max_position_error: float
    mean_position_error: float
    mean_sigma_error: float
    mean_shape_error: float
    mean_weight_error: float
    eta_max_final: float
    t_total: float
    t_table: float
    t_certificate: float
    t_lasso: float
    t_descent: float

    def to_row(self) -> dict:
        row = {"schema_version": CSV_SCHEMA_VERSION}
        for f in fields(self):
            row[f.name] = getattr(self, f.name)
        return row


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _trial_rng(config: ExperimentConfig, size: int, count: int, trial: int):
    seq = np.random.SeedSequence(entropy=[config.seed, size, count, trial])
    return np.random.default_rng(seq)


def _noise_sigma_for(config: ExperimentConfig, clean: Volume) -> float:
    if config.noise_sigma is not None:
        return config.noise_sigma
    return config.noise_rel * float(np.max(np.abs(clean.data)))


def _solver_options(config: ExperimentConfig, count: int) -> SolverOptions:
    return SolverOptions(
        lam=config.lam,
        max_outer_iterations=config.max_outer_factor * count,
        n_sigma=config.n_sigma,
        n_shape=config.n_shape,
        workers=config.workers,
    )


def _record_from_result(config: ExperimentConfig, size: int, count: int,
                        trial: int, algorithm: str, noise_sigma: float,
                        truth: WeightedMeasure, result: SolveResult) -> TrialRecord:
    match = match_atoms(result.measure, truth, config.match_radius)
    trace = result.trace
    eta_final = trace.records[-1].eta_max if trace.records else float("nan")
    return TrialRecord(
        size=size, atom_count=count, trial=trial, algorithm=algorithm,
        seed=config.seed, lam=config.lam, noise_sigma=noise_sigma,
        termination=result.termination,
        outer_iterations=len(trace.records),
        final_criterion=result.criterion,
        recovered_atoms=len(result.measure),
        n_matched=len(match.pairs),
        n_missed=len(match.missed),
        n_spurious=len(match.spurious),
        max_position_error=match.max_position_error,
        mean_position_error=match.mean_position_error,
        mean_sigma_error=match.mean_sigma_error,
        mean_shape_error=match.mean_shape_error,
        mean_weight_error=match.mean_weight_error,
        eta_max_final=eta_final,
        t_total=trace.t_total,
        t_table=trace.t_table,
        t_certificate=trace.step_time("certificate"),
        t_lasso=trace.step_time("lasso"),
        t_descent=trace.step_time("descent"),
    )


def _failure_record(config: ExperimentConfig, size: int, count: int, trial: int,
                    algorithm: str, noise_sigma: float, exc: Exception) -> TrialRecord:
    nan = float("nan")
    return TrialRecord(
        size=size, atom_count=count, trial=trial, algorithm=algorithm,
        seed=config.seed, lam=config.lam, noise_sigma=noise_sigma,
        termination=f"error:{type(exc).__name__}",
        outer_iterations=0, final_criterion=nan, recovered_atoms=0,
        n_matched=0, n_missed=count, n_spurious=0,
        max_position_error=nan, mean_position_error=nan, mean_sigma_error=nan,
        mean_shape_error=nan, mean_weight_error=nan, eta_max_final=nan,
        t_total=nan, t_table=nan, t_certificate=nan, t_lasso=nan, t_descent=nan,
    )


def run_benchmark(config: ExperimentConfig, out_dir=None,
                  progress=None) -> list[TrialRecord]:
    """Run the sweep and write records.csv + summary.csv.

    Both solvers see bit-identical inputs within a trial. Trials execute
    sequentially so wall-clock timings stay uncontended. Individual trial
    failures are recorded and never abort the sweep.
    """
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records: list[TrialRecord] = []
    solvers = ((SFW, sfw), (BSFW, bsfw))

    for size in config.sizes:
        geom = GridGeometry((size,) * 3)
        psf = make_surrogate_psf(geom, config.psf_lateral_sigma, config.psf_axial_sigma)
        bounds = default_domain(geom.dims, config.domain_sigma, config.domain_shape,
                                config.margin)
        for count in config.atom_counts:
            opts = _solver_options(config, count)
            if config.warmup:
                rng = _trial_rng(config, size, count, 0)
                truth = sample_ground_truth(config, size, count, rng)
                noise = _noise_sigma_for(config, forward(truth, psf))
                y = synthesize_observation(truth, psf, noise, rng)
                sfw(y, psf, opts, bounds)  # discarded: warms caches/allocator
            for trial in range(config.repetitions):
                rng = _trial_rng(config, size, count, trial)
                truth = sample_ground_truth(config, size, count, rng)
                clean = forward(truth, psf)
                noise_sigma = _noise_sigma_for(config, clean)
                y = synthesize_observation(truth, psf, noise_sigma, rng)
                for name, solver in solvers:
                    t0 = time.perf_counter()
                    try:
                        result = solver(y, psf, opts, bounds)
                        rec = _record_from_result(config, size, count, trial,
                                                  name, noise_sigma, truth, result)
                    except Exception as exc:  # sweep must survive bad trials
                        log.exception("trial failed: size=%d count=%d trial=%d %s",
                                      size, count, trial, name)
                        rec = _failure_record(config, size, count, trial, name,
                                              noise_sigma, exc)
                        rec.t_total = time.perf_counter() - t0
                    records.append(rec)
                    if progress is not None:
                        progress(f"{size}^3 k={count} trial={trial} {name}: "
                                 f"C={rec.final_criterion:.6g} "
                                 f"t={rec.t_total:.2f}s [{rec.termination}]")

    records.sort(key=lambda r: (r.size, r.atom_count, r.trial, r.algorithm))
    write_records_csv(records, out / "records.csv")
    write_summary_csv(records, out / "summary.csv")
    return records


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: _format_cell(v) for k, v in rec.to_row().items()})


def summarize(records) -> list[dict]:
    """Quartile summary per (size, atom count, algorithm) cell."""
    cells: dict[tuple, list[TrialRecord]] = {}
    for rec in records:
        cells.setdefault((rec.size, rec.atom_count, rec.algorithm), []).append(rec)
    rows = []
    for (size, count, algorithm) in sorted(cells):
        group = cells[(size, count, algorithm)]
        crit = np.array([r.final_criterion for r in group])
        times = np.array([r.t_total for r in group])
        cq1, cmed, cq3 = np.nanpercentile(crit, [25, 50, 75])
        tq1, tmed, tq3 = np.nanpercentile(times, [25, 50, 75])
        rows.append({
            "schema_version": CSV_SCHEMA_VERSION,
            "size": size, "atom_count": count, "algorithm": algorithm,
            "trials": len(group),
            "criterion_q1": cq1, "criterion_median": cmed, "criterion_q3": cq3,
            "time_q1": tq1, "time_median": tmed, "time_q3": tq3,
        })
    return rows


def write_summary_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in summarize(records):
            writer.writerow({k: _format_cell(v) for k, v in row.items()})


def read_records_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty CSV")
        missing = set(RECORD_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def emit_plots(csv_path, out_dir) -> list[Path]:
    """Median time/criterion vs volume size per atom count, quartile bands.

    Values are plotted relative to the smallest median the sliding solver
    attains over all cells, so that cell maps to 1.0 on the y axis.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_records_csv(csv_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    data: dict[tuple, dict[str, list[float]]] = {}
    for row in rows:
        key = (int(row["atom_count"]), row["algorithm"], int(row["size"]))
        cell = data.setdefault(key, {"time": [], "criterion": []})
        cell["time"].append(float(row["t_total"]))
        cell["criterion"].append(float(row["final_criterion"]))

    counts = sorted({k[0] for k in data})
    sizes = sorted({k[2] for k in data})

    def quartiles(count, algorithm, size, what):
        vals = np.array(data.get((count, algorithm, size), {what: [np.nan]})[what])
        return np.nanpercentile(vals, [25, 50, 75])

    baselines = {}
    for what in ("time", "criterion"):
        medians = [quartiles(c, SFW, s, what)[1] for c in counts for s in sizes
                   if (c, SFW, s) in data]
        baselines[what] = float(np.nanmin(medians)) if medians else 1.0

    paths = []
    labels = {"time": "relative run time", "criterion": "relative final criterion"}
    for what in ("time", "criterion"):
        for count in counts:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for algorithm, color in ((SFW, "C0"), (BSFW, "C1")):
                qs = np.array([quartiles(count, algorithm, s, what) for s in sizes])
                qs = qs / baselines[what]
                ax.plot(sizes, qs[:, 1], marker="o", color=color, label=algorithm)
                ax.fill_between(sizes, qs[:, 0], qs[:, 2], color=color, alpha=0.25)
            ax.set_xlabel("volume side (voxels)")
            ax.set_ylabel(labels[what])
            ax.set_title(f"{count} atoms")
            ax.legend()
            fig.tight_layout()
            path = out / f"{what}_atoms{count}.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            paths.append(path)
    return paths
