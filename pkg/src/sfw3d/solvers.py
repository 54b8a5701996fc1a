"""Greedy sparse solvers over the continuous atom domain.

Two drivers share the same building blocks:

* ``sfw`` adds one atom per iteration (certificate argmax), re-fits the
  weights by a non-negative LASSO, then slides everything — weights and all
  atom parameters — by a box-constrained quasi-Newton descent, and prunes.
* ``bsfw`` keeps the certificate/augment/LASSO/prune loop but defers the
  expensive sliding descent: it runs exactly once, after the certificate
  first drops below the stopping threshold, and then the solver stops.

Both start from the zero measure and stop when the certificate maximum is
at (or below) 1, or at the iteration cap. Every step is timed and the
criterion recorded so optimization paths can be audited after the fact.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as _fft
from scipy.optimize import minimize

from ._parallel import map_ordered
from .certificate import AtomTemplateTable, build_template_table, certificate_max, \
    make_parameter_grids
from .forward import GRADIENT_COLUMNS, Psf, convolve, criterion, criterion_and_gradient, \
    render_atom
from .measures import AtomParams, DomainBounds, WeightedMeasure, clamp_to_domain, \
    default_prune_tol, prune_zero_weights
from .volumes import GridGeometry, Volume

log = logging.getLogger(__name__)

SFW = "sfw"
BSFW = "bsfw"

TERMINATED_CERTIFICATE = "certificate"
TERMINATED_ITERATION_CAP = "iteration_cap"
TERMINATED_STALLED = "stalled_duplicate_atom"


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances and caps shared by both solvers."""

    lam: float
    max_outer_iterations: int = 50
    eta_threshold: float = 1.0      # stopping threshold on the certificate max
    eta_slack: float = 5e-3         # numerical slack added on top of the threshold
    lasso_tol: float = 1e-6         # KKT residual tolerance of the weight step
    lasso_max_iter: int = 2000      # coordinate sweeps
    descent_gtol: float = 1e-6
    descent_ftol: float = 1e-10     # relative criterion-reduction stop
    descent_max_iter: int = 400
    prune_rel_tol: float = 1e-10    # relative to the largest weight
    n_sigma: int = 8                # certificate grid resolution
    n_shape: int = 6
    duplicate_tol: float = 1e-6     # stall guard: new atom equals an old one
    workers: int | None = None

    def __post_init__(self):
        if self.lam <= 0.0:
            raise ValueError("lam must be > 0")
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        for name in ("lasso_tol", "descent_gtol", "duplicate_tol"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")
        if self.prune_rel_tol < 0.0 or self.eta_slack < 0.0:
            raise ValueError("prune_rel_tol and eta_slack must be >= 0")


@dataclass
class IterationRecord:
    """One outer iteration: certificate value, criterion path, step timings."""

    index: int
    eta_max: float
    criterion_before: float
    criterion_after_lasso: float | None
    criterion_after_descent: float | None
    atom_count: int
    t_certificate: float
    t_lasso: float
    t_descent: float


@dataclass
class SolveTrace:
    algorithm: str
    records: list[IterationRecord] = field(default_factory=list)
    t_table: float = 0.0
    t_total: float = 0.0

    def step_time(self, step: str) -> float:
        return float(sum(getattr(r, f"t_{step}") for r in self.records))


@dataclass
class SolveResult:
    measure: WeightedMeasure
    criterion: float
    termination: str
    trace: SolveTrace


def nonneg_lasso(y: Volume, thetas, psf: Psf, lam: float,
                 w_init=None, tol: float = 1e-8, max_iter: int = 5000,
                 workers: int | None = None, phis=None) -> np.ndarray:
    """Best non-negative weights for a frozen atom list.

    Cyclic coordinate descent on the criterion restricted to the weights;
    each update is the exact one-variable minimizer, so the criterion never
    increases. Convergence is declared on the KKT residual: at the solution
    every active weight has zero criterion slope and every zero weight has a
    non-negative one.

    ``phis`` may carry precomputed blurred unit-atom volumes (one per theta)
    to skip re-rendering.
    """
    thetas = list(thetas)
    k = len(thetas)
    if k == 0:
        return np.zeros(0)
    if lam <= 0.0:
        raise ValueError(f"lam must be > 0, got {lam}")
    geom = GridGeometry(psf.dims)
    if phis is None:
        phis = map_ordered(
            lambda th: convolve(render_atom(th, 1.0, geom), psf).data,
            thetas, workers)
    else:
        phis = [p.data if isinstance(p, Volume) else np.asarray(p) for p in phis]
        if len(phis) != k:
            raise ValueError("phis length does not match atom count")

    flat = np.stack([p.ravel() for p in phis])
    gram = flat @ flat.T
    b = flat @ y.data.ravel()

    w = np.zeros(k) if w_init is None else np.asarray(w_init, dtype=float).copy()
    if w.shape != (k,) or (w < 0.0).any():
        raise ValueError("w_init must be non-negative with one entry per atom")

    gw = gram @ w
    kkt = np.inf
    w_scale = max(1.0, float(np.max(w)) if k else 1.0)
    for _ in range(max_iter):
        step = 0.0
        for i in range(k):
            old = w[i]
            new = max(0.0, old + (b[i] - lam - gw[i]) / gram[i, i])
            if new != old:
                gw += (new - old) * gram[:, i]
                w[i] = new
                step = max(step, abs(new - old))
        slope = gw - b + lam
        active = w > 0.0
        kkt = 0.0
        if active.any():
            kkt = float(np.max(np.abs(slope[active])))
        if (~active).any():
            kkt = max(kkt, float(np.max(np.maximum(0.0, -slope[~active]))))
        if kkt <= tol:
            break
        w_scale = max(w_scale, float(np.max(w)))
        if step <= 1e-14 * w_scale:
            # iterates have converged; a degenerate Gram (near-coincident
            # atoms) keeps the KKT residual from tightening further
            log.debug("weight step stalled at KKT residual %.3g > %.3g "
                      "(degenerate atom pair)", kkt, tol)
            break
    else:
        log.warning("weight step hit %d sweeps with KKT residual %.3g > %.3g; "
                    "returning best iterate", max_iter, kkt, tol)
    return w


def _pack(measure: WeightedMeasure) -> np.ndarray:
    return np.concatenate([
        np.array([w, *theta.m, theta.sigma, theta.d]) for theta, w in measure.atoms
    ]) if len(measure) else np.zeros(0)


def _unpack(x: np.ndarray, k: int) -> WeightedMeasure:
    rows = x.reshape(k, len(GRADIENT_COLUMNS))
    return WeightedMeasure(tuple(
        (AtomParams(m=tuple(r[1:4]), sigma=r[4], d=r[5]), max(0.0, r[0]))
        for r in rows
    ))


def local_descent(y: Volume, measure: WeightedMeasure, psf: Psf, lam: float,
                  bounds: DomainBounds, gtol: float = 1e-6, ftol: float = 1e-10,
                  max_iter: int = 400, workers: int | None = None,
                  y_hat: np.ndarray | None = None) -> tuple[WeightedMeasure, float, bool]:
    """Slide weights and atom parameters jointly to a local criterion minimum.

    Box-constrained quasi-Newton over all per-atom variables (weight, center,
    scale, shape) with the analytic gradient. Returns
    ``(measure, criterion, line_search_warning)``; the result never has a
    larger criterion than the input (the input is kept if the optimizer
    fails to improve on it).
    """
    k = len(measure)
    if k == 0:
        return measure, criterion(y, measure, psf, lam, workers), False
    start = WeightedMeasure(tuple(
        (clamp_to_domain(theta, bounds), w) for theta, w in measure.atoms))
    if y_hat is None:
        y_hat = _fft.rfftn(y.data)

    def fun(x):
        m = _unpack(x, k)
        value, grad = criterion_and_gradient(y, m, psf, lam, workers, y_hat)
        return value, grad.flatten()

    box = []
    for _ in range(k):
        box.append((0.0, None))
        box.extend(zip(bounds.pos_lower, bounds.pos_upper))
        box.append((bounds.sigma_min, bounds.sigma_max))
        box.append((bounds.shape_min, bounds.shape_max))

    x0 = _pack(start)
    f0 = fun(x0)[0]
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=box,
                   options={"maxiter": max_iter, "gtol": gtol, "ftol": ftol})
    warn = not res.success and "ABNORMAL" in str(res.message).upper()
    if warn:
        log.warning("local descent line search gave up: %s", res.message)
    if not np.isfinite(res.fun) or res.fun > f0:
        return start, float(f0), warn
    out = WeightedMeasure(tuple(
        (clamp_to_domain(theta, bounds), w) for theta, w in _unpack(res.x, k).atoms))
    return out, float(res.fun), warn


@dataclass
class _LoopState:
    """Shared bookkeeping for the two outer loops."""

    thetas: list
    weights: np.ndarray
    phis: list          # blurred unit atoms matching thetas
    criterion: float


def _residual(y: Volume, state: _LoopState) -> Volume:
    data = y.data.copy()
    for w, phi in zip(state.weights, state.phis):
        data -= w * phi
    return Volume(data)


def _phi_for(theta: AtomParams, psf: Psf) -> np.ndarray:
    return convolve(render_atom(theta, 1.0, GridGeometry(psf.dims)), psf).data


def _lasso_criterion(y: Volume, state: _LoopState, lam: float) -> float:
    resid = _residual(y, state)
    return 0.5 * float(np.vdot(resid.data, resid.data).real) + lam * float(state.weights.sum())


def _prune_state(state: _LoopState, rel_tol: float) -> _LoopState:
    measure = WeightedMeasure.from_pairs(state.thetas, state.weights)
    tol = default_prune_tol(measure, rel_tol)
    keep = [i for i, w in enumerate(state.weights) if w > tol]
    return _LoopState(
        thetas=[state.thetas[i] for i in keep],
        weights=state.weights[keep] if len(state.weights) else state.weights,
        phis=[state.phis[i] for i in keep],
        criterion=state.criterion,
    )


def _is_duplicate(theta: AtomParams, thetas, tol: float) -> bool:
    vec = theta.to_array()
    return any(np.max(np.abs(vec - t.to_array())) <= tol for t in thetas)


def _solve(y: Volume, psf: Psf, opts: SolverOptions, bounds: DomainBounds,
           algorithm: str) -> SolveResult:
    if y.dims != psf.dims:
        raise ValueError(f"dims mismatch: observation {y.dims} vs kernel {psf.dims}")
    t_start = time.perf_counter()
    sigma_grid, shape_grid = make_parameter_grids(bounds, opts.n_sigma, opts.n_shape)
    table = build_template_table(psf, sigma_grid, shape_grid, bounds=bounds,
                                 workers=opts.workers)
    trace = SolveTrace(algorithm=algorithm, t_table=time.perf_counter() - t_start)

    y_hat = _fft.rfftn(y.data)
    state = _LoopState(thetas=[], weights=np.zeros(0), phis=[],
                       criterion=0.5 * float(np.vdot(y.data, y.data).real))
    termination = TERMINATED_ITERATION_CAP
    stop_at = opts.eta_threshold + opts.eta_slack
    dup_streak = 0

    for k in range(1, opts.max_outer_iterations + 1):
        c_before = state.criterion

        t0 = time.perf_counter()
        theta_star, eta_star = certificate_max(
            _residual(y, state), opts.lam, table, psf, bounds, workers=opts.workers)
        t_cert = time.perf_counter() - t0

        if eta_star <= stop_at:
            termination = TERMINATED_CERTIFICATE
            t_desc = 0.0
            if algorithm == BSFW and len(state.thetas):
                # deferred sliding step: one full descent, then stop. The
                # slide can hop to a lower-criterion basin with a worse
                # certificate; re-check it and keep the already-certified
                # measure when that happens.
                t0 = time.perf_counter()
                slid, c_desc, _ = local_descent(
                    y, WeightedMeasure.from_pairs(state.thetas, state.weights),
                    psf, opts.lam, bounds, gtol=opts.descent_gtol,
                    ftol=opts.descent_ftol, max_iter=opts.descent_max_iter,
                    workers=opts.workers, y_hat=y_hat)
                slid_state = _prune_state(_LoopState(
                    thetas=list(slid.thetas),
                    weights=slid.weights,
                    phis=[_phi_for(th, psf) for th in slid.thetas],
                    criterion=c_desc,
                ), opts.prune_rel_tol)
                _, eta_slid = certificate_max(
                    _residual(y, slid_state), opts.lam, table, psf, bounds,
                    workers=opts.workers)
                if c_desc <= state.criterion and eta_slid <= stop_at:
                    state = slid_state
                t_desc = time.perf_counter() - t0
            trace.records.append(IterationRecord(
                index=k, eta_max=eta_star, criterion_before=c_before,
                criterion_after_lasso=None,
                criterion_after_descent=state.criterion if algorithm == BSFW else None,
                atom_count=len(state.thetas),
                t_certificate=t_cert, t_lasso=0.0, t_descent=t_desc))
            break

        duplicate = _is_duplicate(theta_star, state.thetas, opts.duplicate_tol)

        # augment the support and re-fit the weights
        t0 = time.perf_counter()
        state.thetas.append(theta_star)
        state.phis.append(_phi_for(theta_star, psf))
        w_init = np.append(state.weights, 0.0)
        state.weights = nonneg_lasso(
            y, state.thetas, psf, opts.lam, w_init=w_init, tol=opts.lasso_tol,
            max_iter=opts.lasso_max_iter, workers=opts.workers, phis=state.phis)
        state.criterion = _lasso_criterion(y, state, opts.lam)
        c_lasso = state.criterion
        t_lasso = time.perf_counter() - t0

        c_desc = None
        t_desc = 0.0
        if algorithm == SFW:
            t0 = time.perf_counter()
            measure = WeightedMeasure.from_pairs(state.thetas, state.weights)
            measure, c_desc, _ = local_descent(
                y, measure, psf, opts.lam, bounds, gtol=opts.descent_gtol,
                ftol=opts.descent_ftol, max_iter=opts.descent_max_iter,
                workers=opts.workers, y_hat=y_hat)
            state = _LoopState(
                thetas=list(measure.thetas),
                weights=measure.weights,
                phis=[_phi_for(th, psf) for th in measure.thetas],
                criterion=c_desc,
            )
            t_desc = time.perf_counter() - t0

        state = _prune_state(state, opts.prune_rel_tol)
        trace.records.append(IterationRecord(
            index=k, eta_max=eta_star, criterion_before=c_before,
            criterion_after_lasso=c_lasso, criterion_after_descent=c_desc,
            atom_count=len(state.thetas),
            t_certificate=t_cert, t_lasso=t_lasso, t_descent=t_desc))

        if duplicate and state.criterion >= c_before * (1.0 - 1e-12):
            dup_streak += 1
            if dup_streak >= 2:
                termination = TERMINATED_STALLED
                break
        else:
            dup_streak = 0

    trace.t_total = time.perf_counter() - t_start
    measure = WeightedMeasure.from_pairs(state.thetas, state.weights)
    measure = prune_zero_weights(measure, default_prune_tol(measure, opts.prune_rel_tol))
    return SolveResult(measure=measure, criterion=state.criterion,
                       termination=termination, trace=trace)


def sfw(y: Volume, psf: Psf, opts: SolverOptions, bounds: DomainBounds) -> SolveResult:
    """Sliding variant: full parameter descent after every added atom."""
    return _solve(y, psf, opts, bounds, SFW)


def bsfw(y: Volume, psf: Psf, opts: SolverOptions, bounds: DomainBounds) -> SolveResult:
    """Boosted variant: all intermediate descents removed; one final slide."""
    return _solve(y, psf, opts, bounds, BSFW)


@dataclass
class AuditViolation:
    iteration: int
    step: str
    before: float
    after: float


@dataclass
class AuditReport:
    violations: list[AuditViolation]

    @property
    def ok(self) -> bool:
        return not self.violations


def audit_criterion_path(trace: SolveTrace, rel_tol: float = 1e-9) -> AuditReport:
    """Check that no weight-fit or descent step ever increased the criterion.

    ``rel_tol`` absorbs float noise between independently evaluated
    criterion values (and the vanishing effect of pruning).
    """
    bad: list[AuditViolation] = []

    def check(iteration, step, before, after):
        if after > before + rel_tol * max(1.0, abs(before)):
            bad.append(AuditViolation(iteration, step, before, after))

    prev_end: float | None = None
    for rec in trace.records:
        if prev_end is not None:
            check(rec.index, "carry_over", prev_end, rec.criterion_before)
        last = rec.criterion_before
        if rec.criterion_after_lasso is not None:
            check(rec.index, "lasso", last, rec.criterion_after_lasso)
            last = rec.criterion_after_lasso
        if rec.criterion_after_descent is not None:
            check(rec.index, "descent", last, rec.criterion_after_descent)
            last = rec.criterion_after_descent
        prev_end = last
    return AuditReport(violations=bad)
