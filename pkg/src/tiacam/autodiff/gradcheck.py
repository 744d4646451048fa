"""Central finite-difference oracle for the analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, backward

ArrayLike = Union[np.ndarray, Tensor, float]


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: list[np.ndarray] = field(repr=False)
    numeric: list[np.ndarray] = field(repr=False)
    worst: Optional[tuple[int, tuple[int, ...]]] = None

    def __bool__(self) -> bool:
        return self.passed


def _relative_errors(
    a: np.ndarray, n: np.ndarray, floor_scale: float, atol: float, scale: Optional[float] = None
) -> np.ndarray:
    # Coordinates far below the gradient's own scale are compared against a floor
    # so rounding noise in the difference quotient does not dominate.
    if scale is None:
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    floor = max(atol, floor_scale * scale)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(
    f: Callable[..., Tensor],
    point: Union[ArrayLike, Sequence[ArrayLike]],
    eps: float = 1e-6,
    tol: float = 1e-6,
    *,
    coords: Optional[Sequence[Optional[np.ndarray]]] = None,
    floor_scale: float = 1e-3,
    atol: float = 1e-10,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` with central differences.

    ``point`` is a single array or a list of arrays; ``f`` receives one leaf
    Tensor per array. ``coords`` optionally restricts, per input, the flat
    indices that are probed (all of them by default).
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    single = not isinstance(point, (list, tuple))
    arrays = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in ([point] if single else point)]

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*leaves)
    again = f(*[Tensor(a.copy()) for a in arrays])
    if out.data.tobytes() != again.data.tobytes():
        raise RuntimeError("finite_diff_check: f is not deterministic at the probe point")
    backward(out)
    analytic = [leaf.grad.copy() for leaf in leaves]

    numeric: list[np.ndarray] = []
    for idx, base in enumerate(arrays):
        num = np.full(base.shape, np.nan)
        flat = range(base.size) if coords is None or coords[idx] is None else coords[idx]
        for k in flat:
            pos = np.unravel_index(int(k), base.shape)
            probe = [a.copy() for a in arrays]
            probe[idx][pos] += eps
            fp = float(f(*[Tensor(p) for p in probe]).data)
            probe[idx][pos] -= 2 * eps
            fm = float(f(*[Tensor(p) for p in probe]).data)
            num[pos] = (fp - fm) / (2 * eps)
        numeric.append(num)

    worst_err, worst = 0.0, None
    for idx, (a, n) in enumerate(zip(analytic, numeric)):
        mask = ~np.isnan(n)
        if not mask.any():
            continue
        err = np.zeros_like(n)
        err[mask] = _relative_errors(a[mask], n[mask], floor_scale, atol)
        k = int(np.argmax(np.where(mask, err, -1.0)))
        if err.flat[k] > worst_err:
            worst_err, worst = float(err.flat[k]), (idx, np.unravel_index(k, n.shape))
    return GradCheckReport(worst_err, worst_err <= tol, analytic, numeric, worst)


def param_gradcheck(
    params: Sequence[Tensor],
    loss_fn: Callable[[], Tensor],
    eps: float = 1e-6,
    tol: float = 1e-6,
    *,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor_scale: float = 1e-3,
    atol: float = 1e-10,
) -> GradCheckReport:
    """Finite-difference check against existing parameter leaves, perturbed in place.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    ``max_coords`` probes a random subset of coordinates per parameter. The
    error floor scales with the largest gradient over all parameters, so a
    parameter the loss is invariant to (true gradient 0) is judged against the
    model's gradient scale rather than its own roundoff.
    """
    if eps <= 0:
        raise ValueError("param_gradcheck: eps must be positive")
    params = list(params)
    out = loss_fn()
    again = loss_fn()
    if out.data.tobytes() != again.data.tobytes():
        raise RuntimeError("param_gradcheck: loss is not deterministic at the probe point")
    grads = backward(out)
    analytic = [np.array(grads.get(p.id, np.zeros_like(p.data))) for p in params]
    numeric = []
    for p in params:
        num = np.full(p.shape, np.nan)
        flat = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            flat = (rng or np.random.default_rng(0)).choice(p.size, max_coords, replace=False)
        base = p.data
        for k in flat:
            pos = np.unravel_index(int(k), p.shape)
            probe = base.copy()
            probe[pos] += eps
            p.data = probe
            fp = float(loss_fn().data)
            probe[pos] -= 2 * eps
            fm = float(loss_fn().data)
            num[pos] = (fp - fm) / (2 * eps)
        p.data = base
        numeric.append(num)
    scale = max(
        max(np.abs(a).max(initial=0.0) for a in analytic),
        max(np.abs(n[~np.isnan(n)]).max(initial=0.0) for n in numeric),
    )
    worst_err, worst = 0.0, None
    for idx, (a, n) in enumerate(zip(analytic, numeric)):
        mask = ~np.isnan(n)
        if not mask.any():
            continue
        err = _relative_errors(a[mask], n[mask], floor_scale, atol, scale)
        k = int(np.argmax(err))
        if err[k] > worst_err:
            worst_err, worst = float(err[k]), (idx, tuple(np.argwhere(mask)[k]))
    return GradCheckReport(worst_err, worst_err <= tol, analytic, numeric, worst)
