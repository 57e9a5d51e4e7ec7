"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and central-difference gradients."""

    max_rel_err: float
    tol: float
    n_checked: int
    worst: tuple = ()

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.tol:.1e}, {self.n_checked} coords, worst at {self.worst})"
        )


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-3)


def grad_check(
    f,
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare d f(x)/dx against central differences, coordinate-wise.

    ``f`` must return a scalar Tensor and be re-evaluable (it is called
    twice per checked coordinate with ``x.data`` perturbed in place).
    ``sample`` limits the check to that many randomly chosen coordinates;
    by default every coordinate is checked.
    """
    if not x.requires_grad:
        raise ContractError("grad_check input must have requires_grad=True")
    x.zero_grad()
    loss = f(x)
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued f, got {loss.shape}")
    loss.backward()
    # a tensor absent from the tape has derivative zero everywhere
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=sample, replace=False)
    else:
        coords = np.arange(n)

    max_err = 0.0
    worst = ()
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = f(x).item()
            flat[i] = orig - h
            down = f(x).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = _rel_err(analytic.reshape(-1)[i], numeric)
            if err > max_err:
                max_err = err
                worst = np.unravel_index(i, x.shape)
    return GradCheckReport(max_rel_err=max_err, tol=tol, n_checked=len(coords), worst=worst)


def grad_check_params(
    loss_fn,
    params: dict,
    h: float = 1e-5,
    tol: float = 1e-4,
    sample_per_tensor: int = 3,
    rng: np.random.Generator | None = None,
) -> dict:
    """Run ``grad_check`` over a named-parameter table.

    Each tensor is checked at ``sample_per_tensor`` random coordinates
    (all coordinates when the tensor is that small). Returns a name ->
    report mapping; callers typically assert every report passed.
    """
    rng = rng or np.random.default_rng(0)
    reports = {}
    for name, p in params.items():
        reports[name] = grad_check(
            lambda _p: loss_fn(), p, h=h, tol=tol, sample=sample_per_tensor, rng=rng
        )
    return reports
