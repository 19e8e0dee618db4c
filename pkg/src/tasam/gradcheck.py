"""Central finite-difference verification of reverse-mode gradients.

The checker re-runs the caller's graph builder with float64 copies of the
parameters: float32 arithmetic leaves too little headroom between the
truncation error of the difference quotient and round-off noise at the
default step ``h=1e-4``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ReproducibilityError
from .tensor import Tape, Tensor

# Negative-control hook: a nonzero value is added to every analytic
# gradient, which must make the check fail. Used by tests and the CLI's
# corruption switch; never set in normal operation.
_CORRUPTION = 0.0


@dataclass
class GradCheckReport:
    h: float
    tol: float
    max_rel_error: dict = field(default_factory=dict)
    coords_checked: dict = field(default_factory=dict)

    @property
    def worst(self):
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    def passed(self):
        return self.worst < self.tol

    def lines(self):
        out = []
        for name in sorted(self.max_rel_error):
            err = self.max_rel_error[name]
            mark = "ok" if err < self.tol else "FAIL"
            out.append(
                f"{name:32s} max_rel_err={err:.3e} "
                f"({self.coords_checked[name]} coords) {mark}"
            )
        return out


def _rel_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradcheck(build_loss, params, h=1e-4, tol=1e-3, max_coords=24, seed=0):
    """Compare analytic gradients of a scalar graph against central differences.

    ``build_loss`` is called with a name->Tensor dict and must rebuild the
    forward graph from scratch each time (deterministically). Parameters
    are copied to float64 for the check. For large parameters only
    ``max_coords`` randomly chosen coordinates are differenced; the
    analytic gradient is still computed exactly for all coordinates.
    """
    p64 = {
        name: Tensor(t.data.astype(np.float64), requires_grad=True)
        for name, t in params.items()
    }

    ref = build_loss(p64).item()
    again = build_loss(p64).item()
    if ref != again:
        raise ReproducibilityError(
            f"two forward passes disagree ({ref!r} vs {again!r}); "
            "the graph is not deterministic"
        )

    with Tape() as tape:
        loss = build_loss(p64)
        tape.backward(loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(h=h, tol=tol)
    for name, t in p64.items():
        flat = t.data.reshape(-1)
        grad = (
            t.grad.reshape(-1)
            if t.grad is not None
            else np.zeros_like(flat)
        )
        n = flat.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = build_loss(p64).item()
            flat[c] = orig - h
            down = build_loss(p64).item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = float(grad[c]) + _CORRUPTION
            worst = max(worst, _rel_error(analytic, numeric))
        report.max_rel_error[name] = worst
        report.coords_checked[name] = len(coords)
    return report
