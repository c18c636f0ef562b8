"""Central finite-difference checking of the gradient engine.

Fragments are built in float64 (the only place float64 is used for model
math) so the difference quotient at step 1e-3 is trustworthy against a
1e-4 relative tolerance. Each fragment is a closure that rebuilds its
forward pass from the same parameter tensors, so perturbing `param.data`
in place and re-evaluating gives the numeric derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor

DEFAULT_STEP = 1e-3
DEFAULT_TOLERANCE = 1e-4
MAX_FRAGMENT_PARAMS = 100_000


@dataclass
class TensorReport:
    name: str
    checked: int
    max_rel_err: float

    def line(self, tol: float) -> str:
        status = "ok" if self.max_rel_err <= tol else "FAIL"
        return f"  {self.name:<40s} coords={self.checked:<4d} max_rel_err={self.max_rel_err:.3e} {status}"


@dataclass
class GradcheckReport:
    fragment: str
    tolerance: float
    tensors: List[TensorReport] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((t.max_rel_err for t in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def lines(self) -> List[str]:
        head = "PASS" if self.passed else "FAIL"
        out = [f"{head} {self.fragment} (tol {self.tolerance:g}, worst {self.max_rel_err:.3e})"]
        out.extend(t.line(self.tolerance) for t in self.tensors)
        return out


def gradcheck(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor],
              fragment: str = "fragment", tolerance: float = DEFAULT_TOLERANCE,
              step: float = DEFAULT_STEP, sample_fraction: float = 0.01,
              min_coords: int = 8, max_coords: int = 64,
              rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare analytic gradients of loss_fn against central differences.

    For each parameter tensor a random subset of coordinates is probed:
    1% of entries, at least `min_coords`, at most `max_coords`. Relative
    error uses max(|analytic|, |numeric|, 1e-8) as the scale.
    """
    total = sum(p.data.size for p in params.values())
    if total >= MAX_FRAGMENT_PARAMS:
        raise ContractViolation(
            f"fragment {fragment!r} has {total} parameters; gradcheck is for fragments < {MAX_FRAGMENT_PARAMS}")
    rng = rng or np.random.default_rng(0)

    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ContractViolation(f"gradcheck fragments must be float64; {name!r} is {p.data.dtype}")
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    report = GradcheckReport(fragment=fragment, tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        want = int(np.clip(np.ceil(sample_fraction * n), min_coords, max_coords))
        coords = rng.choice(n, size=min(want, n), replace=False)
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + step
            up = loss_fn().item()
            flat[c] = keep - step
            down = loss_fn().item()
            flat[c] = keep
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(ga[c]), abs(numeric), 1e-8)
            worst = max(worst, abs(ga[c] - numeric) / denom)
        report.tensors.append(TensorReport(name=name, checked=len(coords), max_rel_err=worst))
    return report


def numeric_gradient(loss_fn: Callable[[], float], param: Tensor,
                     step: float = DEFAULT_STEP) -> np.ndarray:
    """Dense central-difference gradient of a scalar function (small tensors)."""
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for c in range(flat.size):
        keep = flat[c]
        flat[c] = keep + step
        up = loss_fn()
        flat[c] = keep - step
        down = loss_fn()
        flat[c] = keep
        out[c] = (up - down) / (2.0 * step)
    return out.reshape(param.data.shape)
