"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor

# denominator floor: below this magnitude an absolute error of REL_FLOOR * tol is accepted
REL_FLOOR = 1e-5


def rel_error(fd: float, ad: float) -> float:
    return abs(fd - ad) / max(abs(fd), abs(ad), REL_FLOOR)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: np.ndarray | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    The relative error per coordinate is ``|fd - ad| / max(|fd|, |ad|, REL_FLOOR)``.
    ``coords`` restricts the check to a subset of flat indices (large
    parameter tensors); by default every coordinate is checked.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("f(x) is not finite")
    tape.backward(y)
    ad = np.zeros_like(x.data) if x.grad is None else x.grad
    ad = ad.reshape(-1)

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        fd = (fp - fm) / (2 * eps)
        worst = max(worst, rel_error(fd, ad[i]))
    return worst


def check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    max_coords: int = 8,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` against every named parameter.

    Samples at most ``max_coords`` coordinates per tensor.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.data):
        raise FloatingPointError("loss is not finite")
    tape.backward(loss)
    report = {}
    for name, p in params.items():
        ad = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().data)
            flat[i] = orig - eps
            fm = float(loss_fn().data)
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            worst = max(worst, rel_error(fd, ad[i]))
        report[name] = worst
    return report
