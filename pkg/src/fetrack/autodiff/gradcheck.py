"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(e <= self.tolerance for e in self.errors.values())

    def table(self):
        width = max((len(k) for k in self.errors), default=4)
        lines = [f"{'tensor':<{width}}  entries  max_rel_err  ok"]
        for name, err in self.errors.items():
            ok = "yes" if err <= self.tolerance else "NO"
            lines.append(f"{name:<{width}}  {self.checked[name]:>7}  {err:11.3e}  {ok}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-10):
    """Largest entry-wise discrepancy, relative to the largest gradient magnitude in the set.

    Normalising by the tensor-wide scale rather than entry by entry keeps
    entries whose true gradient is ~0 from turning round-off into huge ratios.
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < floor:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(fn, params, h=1e-6, tolerance=1e-4, max_entries=None, rng=None):
    """Compare ``backward`` against central differences of ``fn``.

    ``fn()`` must return a scalar Tensor and be deterministic.  ``params`` is a
    mapping name -> tensor (or a list, named by position).  With
    ``max_entries`` only that many randomly chosen entries per tensor are
    perturbed.
    """
    if not isinstance(params, dict):
        params = {f"input{i}": p for i, p in enumerate(params)}
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    out = fn()
    out.backward()
    report = GradCheckReport(tolerance)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        numeric = np.empty(len(idx))
        with no_grad():
            for j, i in enumerate(idx):
                original = flat[i]
                flat[i] = original + h
                fp = fn().item()
                flat[i] = original - h
                fm = fn().item()
                flat[i] = original
                numeric[j] = (fp - fm) / (2 * h)
        report.errors[name] = relative_error(analytic.reshape(-1)[idx], numeric)
        report.checked[name] = len(idx)
    return report
