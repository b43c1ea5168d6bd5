"""Central-finite-difference verification of tape gradients.

The checker probes one coordinate at a time.  Coordinates where the left and
right difference quotients disagree badly are treated as non-differentiable
(kinks such as |x| at 0) and excluded from the error statistic, but reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError
from .tensor import Graph, Tensor, backward

# one-sided quotients disagreeing by more than this (relative) flag a kink
_KINK_REL = 0.05


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    excluded: list = field(default_factory=list)  # flat indices of kink coordinates

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        extra = f", {len(self.excluded)} kink coord(s) excluded" if self.excluded else ""
        return f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} (tol {self.tol:g}{extra})"


def _eval_scalar(f, point: np.ndarray, where: str) -> float:
    try:
        val = f(Tensor(point))
    except NumericsError as err:
        raise NumericsError(f"non-finite value while probing {where}: {err}") from err
    out = float(val.data) if isinstance(val, Tensor) else float(val)
    if not np.isfinite(out):
        raise NumericsError(f"non-finite loss while probing {where}")
    return out


def grad_check(f, point: Tensor, tol: float = 1e-4, eps: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar `f` at `point` against central differences.

    Per-coordinate relative error is |analytic - central| / max(1, |analytic|);
    the report carries the maximum over all differentiable coordinates.
    """
    x0 = np.array(point.data, dtype=np.float64)

    leaf = Tensor(x0, requires_grad=True)
    with Graph() as g:
        loss = f(leaf)
    if loss.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got output shape {loss.shape}")
    grads = backward(g, loss)
    analytic = grads.get(leaf)
    if analytic is None:
        analytic = np.zeros_like(x0)
    analytic = analytic.reshape(-1)

    f0 = _eval_scalar(f, x0, "the base point")
    flat = x0.reshape(-1)
    max_rel = 0.0
    excluded: list[int] = []
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        f_plus = _eval_scalar(f, x0, f"coordinate {i} (+eps)")
        flat[i] = saved - eps
        f_minus = _eval_scalar(f, x0, f"coordinate {i} (-eps)")
        flat[i] = saved

        d_plus = (f_plus - f0) / eps
        d_minus = (f0 - f_minus) / eps
        if abs(d_plus - d_minus) > _KINK_REL * max(1.0, abs(d_plus), abs(d_minus)):
            excluded.append(i)
            continue
        central = (f_plus - f_minus) / (2.0 * eps)
        rel = abs(analytic[i] - central) / max(1.0, abs(analytic[i]))
        max_rel = max(max_rel, rel)

    return GradCheckReport(max_rel_err=max_rel, passed=max_rel < tol, tol=tol,
                           excluded=excluded)
