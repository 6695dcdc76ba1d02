"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore
from .tensor import no_grad


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error between analytic and numeric grads."""

    epsilon: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.per_param.values())

    def summary(self) -> str:
        name, err = self.worst
        status = "pass" if self.passed else "FAIL"
        return (f"gradcheck {status}: {len(self.per_param)} parameters, "
                f"worst {name} rel_err={err:.3e} (tol {self.tolerance:g}, eps {self.epsilon:g})")


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(forward, params: ParamStore, eps: float = 1e-4, tol: float = 1e-4,
               floor: float = 1e-4, *, grad_hook=None) -> GradCheckReport:
    """Compare analytic gradients of forward(params) with central differences.

    forward must be a deterministic closure returning a scalar Tensor; the
    store should hold float64 parameters, since float32 finite differences
    drown in rounding noise.  The relative-error floor keeps near-zero
    gradient pairs from reporting spurious mismatches.  grad_hook, if given,
    may alter the analytic gradient dict before comparison (a test hook for
    proving the checker can fail).
    """
    params.zero_grad()
    loss = forward(params)
    if not np.isfinite(loss.data):
        raise ValueError("grad_check: forward pass produced a non-finite loss")
    loss.backward()
    analytic = {}
    for name, t in params.items():
        analytic[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
    if grad_hook is not None:
        grad_hook(analytic)

    report = GradCheckReport(epsilon=eps, tolerance=tol)
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(forward(params).data)
                flat[i] = orig - eps
                lo = float(forward(params).data)
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise ValueError(
                        f"grad_check: non-finite loss while perturbing {name!r}[{i}]")
                numeric = (hi - lo) / (2.0 * eps)
                worst = max(worst, _rel_err(float(analytic[name].reshape(-1)[i]), numeric, floor))
            report.per_param[name] = worst
    return report
