"""Forward imaging model: atom rendering, PSF blur, criterion and gradient.

An atom with weight ``w``, center ``m``, scale ``sigma`` and shape exponent
``d`` contributes ``w * exp(-|m - s|^d / (2 sigma^d))`` at voxel ``s``. The
imaging operator blurs the summed atoms with a fixed point spread function;
the fit criterion is

    C = 0.5 * ||y - blur(sum of atoms)||^2 + lam * (sum of weights)

Boundary model: convolution is circular (computed in the Fourier domain) and
voxel-to-center distances use the matching minimum-image convention, so an
atom translated by a whole number of voxels is exactly a circular shift of
itself. Callers keep atoms a few sigma away from the faces, which makes the
wrap-around physically negligible while keeping every identity here exact.

Atoms are rendered only inside the radius where the unit profile exceeds
1e-12; outside they are treated as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as _fft

from ._parallel import map_ordered
from .measures import AtomParams, WeightedMeasure, total_mass
from .volumes import GridGeometry, Volume

#: unit-profile value below which an atom is treated as exactly zero
TAIL_CUTOFF = 1e-12

_TAIL_EXPONENT = 2.0 * np.log(1.0 / TAIL_CUTOFF)

#: per-atom gradient column order
GRADIENT_COLUMNS = ("w", "m_x", "m_y", "m_z", "sigma", "d")


class Psf:
    """Point spread function with a cached frequency-domain transform.

    The kernel is stored centered: its origin is the voxel
    ``(nx//2, ny//2, nz//2)``, and a kernel that is 1 there and 0 elsewhere
    is the identity for :func:`convolve`. Kernels are normalized to unit sum
    so blurring preserves total intensity.
    """

    def __init__(self, kernel: Volume, normalize: bool = True):
        data = kernel.data
        if normalize:
            s = float(data.sum())
            peak = float(np.abs(data).max()) if data.size else 0.0
            if abs(s) < 1e-12 * max(peak, 1.0):
                raise ValueError("kernel sum is ~0, cannot normalize to unit sum")
            kernel = Volume(data / s)
        self.kernel = kernel
        self.kernel_hat = _fft.rfftn(_fft.ifftshift(kernel.data))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.kernel.dims

    @classmethod
    def delta(cls, dims) -> "Psf":
        """Identity kernel: a single unit voxel at the kernel origin."""
        data = np.zeros(tuple(dims))
        data[tuple(n // 2 for n in data.shape)] = 1.0
        return cls(Volume(data), normalize=False)

    def is_centrosymmetric(self, tol: float = 1e-10) -> bool:
        """True when kernel(origin + o) == kernel(origin - o) for all offsets."""
        shifted = _fft.ifftshift(self.kernel.data)
        mirrored = np.roll(shifted[::-1, ::-1, ::-1], 1, axis=(0, 1, 2))
        scale = float(np.abs(shifted).max()) or 1.0
        return bool(np.max(np.abs(shifted - mirrored)) <= tol * scale)


def convolve(v: Volume, psf: Psf) -> Volume:
    """Circular convolution with the PSF via the Fourier domain.

    The transform pair is real-to-complex, so the output carries no
    imaginary residue to discard.
    """
    if v.dims != psf.dims:
        raise ValueError(f"dims mismatch: volume {v.dims} vs kernel {psf.dims}")
    return Volume(_fft.irfftn(_fft.rfftn(v.data) * psf.kernel_hat, s=v.dims))


def correlate_adjoint(v: Volume, psf: Psf) -> Volume:
    """Apply the transpose of ``convolve(., psf)`` (circular correlation)."""
    if v.dims != psf.dims:
        raise ValueError(f"dims mismatch: volume {v.dims} vs kernel {psf.dims}")
    return Volume(_fft.irfftn(_fft.rfftn(v.data) * np.conj(psf.kernel_hat), s=v.dims))


def support_radius(sigma: float, d: float) -> int:
    """Radius in voxels beyond which the unit atom falls below TAIL_CUTOFF."""
    return int(np.ceil(sigma * _TAIL_EXPONENT ** (1.0 / d)))


def _atom_support(theta: AtomParams, dims):
    """Wrapped per-axis voxel indices and offsets covering the atom support."""
    radius = support_radius(theta.sigma, theta.d)
    idx, deltas = [], []
    for n, mi in zip(dims, theta.m):
        if 2 * radius + 1 >= n:
            ax = np.arange(n)
            delta = (ax - mi + n / 2.0) % n - n / 2.0
        else:
            span = np.arange(int(np.round(mi)) - radius, int(np.round(mi)) + radius + 1)
            ax = span % n
            delta = span - mi
        idx.append(ax)
        deltas.append(delta)
    return tuple(idx), tuple(deltas)


def _unit_atom(theta: AtomParams, dims, with_grads: bool):
    """Unit-weight atom over its support box.

    Returns ``(idx, values, grads)`` where ``idx`` are per-axis wrapped voxel
    indices, ``values`` the profile on the box, and ``grads`` (when asked) the
    five derivative boxes in (m_x, m_y, m_z, sigma, d) order.

    Derivatives follow from differentiating the profile directly; the
    removable singularities at the center (valid for d > 1, which the domain
    bounds enforce) are set to their limit value 0.
    """
    if not (theta.sigma > 0.0 and theta.d > 0.0):
        raise ValueError(f"sigma and d must be positive, got {theta}")
    idx, (dx, dy, dz) = _atom_support(theta, dims)
    u2 = dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2
    sigma, d = theta.sigma, theta.d
    inv2sd = 0.5 / sigma**d
    t = inv2sd * (u2 if d == 2.0 else u2 ** (0.5 * d))
    values = np.exp(-t)
    if not with_grads:
        return idx, values, None
    interior = u2 > 0.0
    # prefactor d/(2 sigma^d) * u^(d-2) * values, written as d*t/u^2 * values
    # to reuse t; its removable singularity at the center (d > 1) is set to 0
    ampl = np.zeros_like(u2)
    ampl[interior] = d * values[interior] * t[interior] / u2[interior]
    g_mx = ampl * dx[:, None, None]
    g_my = ampl * dy[None, :, None]
    g_mz = ampl * dz[None, None, :]
    g_sigma = values * t * (d / sigma)
    log_ratio = np.zeros_like(u2)
    log_ratio[interior] = 0.5 * np.log(u2[interior]) - np.log(sigma)
    g_d = -values * t * log_ratio
    return idx, values, (g_mx, g_my, g_mz, g_sigma, g_d)


def render_atom(theta: AtomParams, w: float, geom: GridGeometry) -> Volume:
    """Sample one weighted atom on the voxel grid."""
    if not np.isfinite(w) or w < 0.0:
        raise ValueError(f"weight must be finite and >= 0, got {w}")
    out = np.zeros(geom.dims)
    idx, values, _ = _unit_atom(theta, geom.dims, with_grads=False)
    out[np.ix_(*idx)] = w * values
    return Volume(out)


def _accumulate_atoms(measure: WeightedMeasure, dims, workers: int | None) -> np.ndarray:
    acc = np.zeros(dims)
    rendered = map_ordered(
        lambda pair: (_unit_atom(pair[0], dims, with_grads=False), pair[1]),
        measure.atoms,
        workers,
    )
    for (idx, values, _), w in rendered:
        acc[np.ix_(*idx)] += w * values
    return acc


def forward(measure: WeightedMeasure, psf: Psf, workers: int | None = None) -> Volume:
    """Blurred image of the measure: PSF convolved with the summed atoms."""
    return convolve(Volume(_accumulate_atoms(measure, psf.dims, workers)), psf)


def criterion(y: Volume, measure: WeightedMeasure, psf: Psf, lam: float,
              workers: int | None = None) -> float:
    """Data fidelity plus mass penalty: ``0.5*||y - model||^2 + lam*mass``."""
    if lam <= 0.0:
        raise ValueError(f"lam must be > 0, got {lam}")
    if y.dims != psf.dims:
        raise ValueError(f"dims mismatch: observation {y.dims} vs kernel {psf.dims}")
    resid = forward(measure, psf, workers).data - y.data
    return 0.5 * float(np.vdot(resid, resid).real) + lam * total_mass(measure)


@dataclass(frozen=True)
class CriterionGradient:
    """Per-atom derivative rows in GRADIENT_COLUMNS order, shape (k, 6)."""

    per_atom: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.per_atom, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != len(GRADIENT_COLUMNS):
            raise ValueError(f"expected shape (k, 6), got {arr.shape}")
        object.__setattr__(self, "per_atom", arr)

    def flatten(self) -> np.ndarray:
        return self.per_atom.ravel()


def _gradient_rows(measure: WeightedMeasure, back: np.ndarray, lam: float,
                   dims, workers: int | None) -> np.ndarray:
    """Rows of the criterion gradient given the back-projected residual."""

    def one(pair):
        theta, w = pair
        idx, values, grads = _unit_atom(theta, dims, with_grads=True)
        sub = back[np.ix_(*idx)]
        row = np.empty(len(GRADIENT_COLUMNS))
        row[0] = float(np.vdot(values, sub).real) + lam
        for col, g in enumerate(grads, start=1):
            row[col] = w * float(np.vdot(g, sub).real)
        return row

    rows = map_ordered(one, measure.atoms, workers)
    out = np.array(rows) if rows else np.zeros((0, len(GRADIENT_COLUMNS)))
    if not np.isfinite(out).all():
        raise FloatingPointError(
            "non-finite criterion gradient; atom parameters left the smooth regime"
        )
    return out


def criterion_and_gradient(y: Volume, measure: WeightedMeasure, psf: Psf, lam: float,
                           workers: int | None = None,
                           y_hat: np.ndarray | None = None) -> tuple[float, CriterionGradient]:
    """Criterion value and its analytic gradient in one pass.

    The gradient of the fidelity term against any per-atom field is the
    inner product of that field with the residual back-projected through the
    PSF transpose; everything is evaluated off one forward transform of the
    summed atoms. Inner loops that call this repeatedly against a fixed
    observation can pass ``y_hat`` (its forward transform) to skip one FFT
    per evaluation.
    """
    if lam <= 0.0:
        raise ValueError(f"lam must be > 0, got {lam}")
    if y.dims != psf.dims:
        raise ValueError(f"dims mismatch: observation {y.dims} vs kernel {psf.dims}")
    dims = psf.dims
    acc_hat = _fft.rfftn(_accumulate_atoms(measure, dims, workers))
    model_hat = acc_hat * psf.kernel_hat
    resid = _fft.irfftn(model_hat, s=dims) - y.data
    value = 0.5 * float(np.vdot(resid, resid).real) + lam * total_mass(measure)
    if y_hat is None:
        y_hat = _fft.rfftn(y.data)
    back = _fft.irfftn(np.conj(psf.kernel_hat) * (model_hat - y_hat), s=dims)
    rows = _gradient_rows(measure, back, lam, dims, workers)
    return value, CriterionGradient(rows)


def criterion_gradient(y: Volume, measure: WeightedMeasure, psf: Psf, lam: float,
                       workers: int | None = None) -> CriterionGradient:
    """Analytic gradient of the criterion for every atom parameter and weight."""
    return criterion_and_gradient(y, measure, psf, lam, workers)[1]
