"""Gridless sparse 3D deconvolution by greedy certificate-driven solvers.

Recovers a small set of generalized-Gaussian atoms (position, scale, shape,
weight) from a blurred and noisy volume, plus a benchmark harness comparing
the sliding solver against its boosted variant on synthetic data.
"""

from .certificate import (AtomTemplateTable, CertificateField, build_template_table,
                          certificate_max, eta_field, make_parameter_grids,
                          refine_eta_max)
from .forward import (CriterionGradient, Psf, convolve, correlate_adjoint, criterion,
                      criterion_and_gradient, criterion_gradient, forward, render_atom)
from .measures import (AtomParams, DomainBounds, WeightedMeasure, clamp_to_domain,
                       load_measure, prune_zero_weights, save_measure, total_mass)
from .solvers import (AuditReport, SolveResult, SolverOptions, SolveTrace,
                      audit_criterion_path, bsfw, local_descent, nonneg_lasso, sfw)
from .volumes import (GridGeometry, Volume, read_volume, volume_norms, write_volume,
                      zero_volume)

__version__ = "0.1.0"

__all__ = [
    "AtomParams", "AtomTemplateTable", "AuditReport", "CertificateField",
    "CriterionGradient", "DomainBounds", "GridGeometry", "Psf", "SolveResult",
    "SolverOptions", "SolveTrace", "Volume", "WeightedMeasure",
    "audit_criterion_path", "bsfw", "build_template_table", "certificate_max",
    "clamp_to_domain", "convolve", "correlate_adjoint", "criterion",
    "criterion_and_gradient", "criterion_gradient", "eta_field", "forward",
    "load_measure", "local_descent", "make_parameter_grids", "nonneg_lasso",
    "prune_zero_weights", "read_volume", "refine_eta_max", "render_atom",
    "save_measure", "sfw", "total_mass", "volume_norms", "write_volume",
    "zero_volume",
]
