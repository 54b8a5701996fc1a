"""Dual certificate: where to place the next atom, and when to stop.

The certificate is the residual back-projected through the imaging
operator, scaled by the regularization weight:

    eta(theta) = <blurred unit atom at theta, y - model> / lam

Values above 1 mark parameter locations where adding mass lowers the
criterion; a field everywhere <= 1 certifies that no single atom can
improve it. Maximizing eta runs in two stages. A lookup table built once
per solve holds, for a small (sigma, d) grid, the frequency-domain
transform of the blurred unit atom; one cross-correlation per entry then
scores every integer position at once. The best grid point seeds a
box-constrained quasi-Newton ascent over the continuous parameters.

Because atoms are sampled with the minimum-image convention, a unit atom at
an integer position is exactly a circular shift of the table template, so
the grid stage is exact (the chosen PSF surrogates are also
centro-symmetric, making correlation and convolution with the kernel
coincide; this is asserted when the table is built).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as _fft
from scipy.optimize import minimize

from ._parallel import map_ordered
from .forward import Psf, _unit_atom, correlate_adjoint
from .measures import AtomParams, DomainBounds, clamp_to_domain
from .volumes import Volume


def make_parameter_grids(bounds: DomainBounds, n_sigma: int = 8,
                         n_shape: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Scale/shape sample grids spanning the domain bounds.

    Sigma samples are geometrically spaced (scale is multiplicative), shape
    samples linearly. Coarse grids suffice because the continuous ascent
    refines the seed.
    """
    if n_sigma < 1 or n_shape < 1:
        raise ValueError("grid sizes must be >= 1")
    sigma_grid = np.geomspace(bounds.sigma_min, bounds.sigma_max, n_sigma)
    shape_grid = np.linspace(bounds.shape_min, bounds.shape_max, n_shape)
    return sigma_grid, shape_grid


@dataclass(frozen=True, eq=False)
class AtomTemplateTable:
    """Per (sigma, d) pair, the transform of the blurred unit atom at the origin."""

    sigma_grid: np.ndarray
    shape_grid: np.ndarray
    dims: tuple[int, int, int]
    template_hats: np.ndarray  # complex, shape (n_sigma, n_shape, *rfft dims)

    def entry(self, i_sigma: int, i_shape: int) -> np.ndarray:
        return self.template_hats[i_sigma, i_shape]


def build_template_table(psf: Psf, sigma_grid, shape_grid,
                         bounds: DomainBounds | None = None,
                         workers: int | None = None) -> AtomTemplateTable:
    """Precompute blurred-atom transforms for every (sigma, d) grid pair.

    Built once per solve, before the first iteration.
    """
    sigma_grid = np.sort(np.asarray(sigma_grid, dtype=float))
    shape_grid = np.sort(np.asarray(shape_grid, dtype=float))
    if sigma_grid.size == 0 or shape_grid.size == 0:
        raise ValueError("parameter grids must be non-empty")
    if bounds is not None:
        if not (bounds.sigma_min <= sigma_grid[0] and sigma_grid[-1] <= bounds.sigma_max):
            raise ValueError("sigma grid extends outside the domain bounds")
        if not (bounds.shape_min <= shape_grid[0] and shape_grid[-1] <= bounds.shape_max):
            raise ValueError("shape grid extends outside the domain bounds")
    if not psf.is_centrosymmetric():
        raise ValueError("template table requires a centro-symmetric kernel")

    dims = psf.dims

    def one(pair):
        sigma, d = pair
        idx, values, _ = _unit_atom(AtomParams(m=(0.0, 0.0, 0.0), sigma=sigma, d=d),
                                    dims, with_grads=False)
        atom = np.zeros(dims)
        atom[np.ix_(*idx)] = values
        return _fft.rfftn(atom) * psf.kernel_hat

    pairs = [(s, d) for s in sigma_grid for d in shape_grid]
    hats = map_ordered(one, pairs, workers)
    stacked = np.stack(hats).reshape(sigma_grid.size, shape_grid.size, *hats[0].shape)
    return AtomTemplateTable(sigma_grid, shape_grid, dims, stacked)


def _position_window(bounds: DomainBounds | None, dims):
    """Integer index box of positions admissible under the bounds."""
    if bounds is None:
        return tuple((0, n - 1) for n in dims)
    window = []
    for lo, hi, n in zip(bounds.pos_lower, bounds.pos_upper, dims):
        a = max(0, int(np.ceil(lo)))
        b = min(n - 1, int(np.floor(hi)))
        if a > b:
            raise ValueError("domain position bounds contain no integer grid point")
        window.append((a, b))
    return tuple(window)


@dataclass(frozen=True, eq=False)
class CertificateField:
    """Sampled eta over positions x (sigma, d) grid, plus its discrete argmax.

    ``fields`` keeps one volume per (sigma, d) pair in row-major grid order
    when the caller asked for them; solvers drop them to bound memory and
    keep only the argmax.
    """

    sigma_grid: np.ndarray
    shape_grid: np.ndarray
    argmax_position: tuple[int, int, int]
    argmax_sigma_index: int
    argmax_shape_index: int
    eta_max: float
    fields: tuple[Volume, ...] | None = None

    @property
    def argmax_params(self) -> AtomParams:
        return AtomParams(
            m=tuple(float(i) for i in self.argmax_position),
            sigma=float(self.sigma_grid[self.argmax_sigma_index]),
            d=float(self.shape_grid[self.argmax_shape_index]),
        )


def eta_field(residual: Volume, lam: float, table: AtomTemplateTable,
              bounds: DomainBounds | None = None, keep_fields: bool = True,
              workers: int | None = None) -> CertificateField:
    """Evaluate eta at every integer position for each (sigma, d) table entry.

    One frequency-domain cross-correlation per entry. When ``bounds`` is
    given the argmax scan is restricted to positions inside the domain box
    (the field itself is still evaluated everywhere).
    """
    if lam <= 0.0:
        raise ValueError(f"lam must be > 0, got {lam}")
    if residual.dims != table.dims:
        raise ValueError(f"dims mismatch: residual {residual.dims} vs table {table.dims}")
    dims = table.dims
    window = _position_window(bounds, dims)
    region = tuple(slice(a, b + 1) for a, b in window)
    resid_hat = _fft.rfftn(residual.data)

    def one(flat_index):
        i, j = divmod(flat_index, table.shape_grid.size)
        vals = _fft.irfftn(resid_hat * np.conj(table.entry(i, j)), s=dims) / lam
        local = vals[region]
        pos = np.unravel_index(int(np.argmax(local)), local.shape)
        pos = tuple(int(p + a) for p, (a, _) in zip(pos, window))
        return vals, pos, float(vals[pos])

    results = map_ordered(one, range(table.sigma_grid.size * table.shape_grid.size),
                          workers)
    best_flat, best_val = 0, -np.inf
    kept = [] if keep_fields else None
    for flat, (vals, pos, val) in enumerate(results):
        if val > best_val:
            best_flat, best_pos, best_val = flat, pos, val
        if keep_fields:
            kept.append(Volume(vals))
    i, j = divmod(best_flat, table.shape_grid.size)
    return CertificateField(
        sigma_grid=table.sigma_grid,
        shape_grid=table.shape_grid,
        argmax_position=best_pos,
        argmax_sigma_index=int(i),
        argmax_shape_index=int(j),
        eta_max=best_val,
        fields=tuple(kept) if keep_fields else None,
    )


def refine_eta_max(residual: Volume, lam: float, psf: Psf, start: AtomParams,
                   bounds: DomainBounds, max_iter: int = 200,
                   gtol: float = 1e-8) -> tuple[AtomParams, float]:
    """Continuous ascent of eta from a grid seed, constrained to the domain.

    Quasi-Newton (L-BFGS-B) on -eta with the analytic parameter gradient;
    never leaves the bounds and never returns a value below the start.
    """
    if lam <= 0.0:
        raise ValueError(f"lam must be > 0, got {lam}")
    start = clamp_to_domain(start, bounds)
    back = correlate_adjoint(residual, psf).data
    dims = psf.dims

    def neg_eta(vec):
        theta = AtomParams.from_array(vec)
        idx, values, grads = _unit_atom(theta, dims, with_grads=True)
        sub = back[np.ix_(*idx)]
        val = float(np.vdot(values, sub).real) / lam
        grad = np.array([float(np.vdot(g, sub).real) for g in grads]) / lam
        if not (np.isfinite(val) and np.isfinite(grad).all()):
            raise FloatingPointError(f"non-finite certificate value near {theta}")
        return -val, -grad

    box = [
        *zip(bounds.pos_lower, bounds.pos_upper),
        (bounds.sigma_min, bounds.sigma_max),
        (bounds.shape_min, bounds.shape_max),
    ]
    start_val = -neg_eta(start.to_array())[0]
    res = minimize(neg_eta, start.to_array(), jac=True, method="L-BFGS-B",
                   bounds=box, options={"maxiter": max_iter, "gtol": gtol})
    if not np.isfinite(res.fun):
        raise FloatingPointError("certificate ascent diverged to a non-finite value")
    if -res.fun < start_val:
        return start, start_val
    theta = clamp_to_domain(AtomParams.from_array(res.x), bounds)
    return theta, float(-res.fun)


def certificate_max(residual: Volume, lam: float, table: AtomTemplateTable,
                    psf: Psf, bounds: DomainBounds,
                    workers: int | None = None) -> tuple[AtomParams, float]:
    """Grid scan then continuous refinement; returns (theta*, eta*).

    Comparing eta* against the stopping threshold is the caller's business.
    """
    field = eta_field(residual, lam, table, bounds=bounds, keep_fields=False,
                      workers=workers)
    return refine_eta_max(residual, lam, psf, field.argmax_params, bounds)
