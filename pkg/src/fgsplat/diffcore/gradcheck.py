"""Central-difference gradient verification.

``finite_difference_check`` compares tape gradients of a scalar-valued
callable against central differences, coordinate by coordinate. The callable
must be deterministic (same inputs, same value) and rebuild its graph from
the supplied parameter tensors on every call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference sweep."""

    max_rel_err: float
    worst_coordinate: tuple  # (param name, flat index)
    checked: int
    skipped: int
    per_param: dict = field(default_factory=dict)
    rel_errs: list = field(default_factory=list)

    def fraction_within(self, tol):
        """Fraction of checked coordinates with relative error <= tol."""
        if not self.rel_errs:
            return 1.0
        errs = np.asarray(self.rel_errs)
        return float(np.mean(errs <= tol))

    def summary(self):
        return (f"gradcheck: {self.checked} coords checked, {self.skipped} skipped, "
                f"max rel err {self.max_rel_err:.3e} at {self.worst_coordinate}")


def _scalar_value(v):
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


def finite_difference_check(f, params, eps, zero_tol=1e-10, max_coords_per_param=None):
    """Check tape gradients of ``f()`` against central differences.

    params: dict name -> leaf Tensor; f closes over them and returns a
    scalar Tensor. eps is the central-difference step (suggested: ~1e-2 in
    float32, ~1e-5 in float64). Frozen parameters (requires_grad=False) are
    skipped and counted. Coordinates where both gradients are below
    ``zero_tol`` are skipped as degenerate (raise it toward the FD noise
    floor in float32). ``max_coords_per_param`` subsamples large parameters
    deterministically (evenly spaced coordinates).
    """
    if not isinstance(params, dict):
        raise ContractError("finite_difference_check expects params as a dict of name -> Tensor")
    loss = f()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("f() must return a scalar Tensor")
    grads = backward(loss)

    report = GradCheckReport(max_rel_err=0.0, worst_coordinate=("", -1), checked=0, skipped=0)
    for name, p in params.items():
        if not p.requires_grad:
            report.skipped += p.size
            report.per_param[name] = None
            continue
        g = grads.get(p.node_id)
        ga = np.zeros(p.size, dtype=np.float64) if g is None else \
            g.data.reshape(-1).astype(np.float64)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = np.linspace(0, n - 1, max_coords_per_param).astype(np.int64)
            coords = np.unique(coords)
        else:
            coords = np.arange(n)
        worst = 0.0
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar_value(f())
                flat[i] = orig - eps
                fm = _scalar_value(f())
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                ana = ga[i]
                if abs(num) < zero_tol and abs(ana) < zero_tol:
                    report.skipped += 1
                    continue
                rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
                report.checked += 1
                report.rel_errs.append(rel)
                if rel > report.max_rel_err:
                    report.max_rel_err = rel
                    report.worst_coordinate = (name, int(i))
                worst = max(worst, rel)
        report.per_param[name] = worst
    return report
