"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad


@dataclass
class GradCheckReport:
    n_checked: int = 0
    max_rel_error: float = 0.0
    # (param index, flat element index, analytic, numeric, rel error)
    flagged: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    per_param_max: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and not self.flagged


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of the scalar ``f()`` with central differences.

    ``f`` is re-evaluated with each parameter element perturbed in place.  The
    relative error denominator is floored at ``floor`` so that elements whose
    true gradient is zero are compared in absolute terms.  When
    ``max_elements`` is set, at most that many elements per parameter are
    sampled (with ``rng``); otherwise every element is checked.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("f is not finite at the base point")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport()
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        elements = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            rng = rng or np.random.default_rng(0)
            elements = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        worst = 0.0
        for j in elements:
            orig = flat[j]
            with no_grad():
                flat[j] = orig + eps
                fp = float(f().data)
                flat[j] = orig - eps
                fm = float(f().data)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"f is not finite near param {pi} element {j}")
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[pi].reshape(-1)[j])
            err = relative_error(a, numeric, floor)
            worst = max(worst, err)
            report.n_checked += 1
            if err > tol:
                report.flagged.append((pi, int(j), a, numeric, err))
        report.per_param_max.append(worst)
        report.max_rel_error = max(report.max_rel_error, worst)
    for p in params:
        p.zero_grad()
    return report
