"""Central finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor

DENOM_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_index: int
    passed: bool
    n_checked: int = 0
    name: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        label = f"{self.name}: " if self.name else ""
        return (
            f"{label}{status} max_rel_err={self.max_relative_error:.3e} "
            f"worst_index={self.worst_index} checked={self.n_checked}"
        )


def _eval(f, x: np.ndarray) -> float:
    val = f(Tensor(x))
    val = float(val.data.reshape(-1)[0]) if isinstance(val, Tensor) else float(val)
    if not np.isfinite(val):
        raise NonFiniteError("objective is not finite at the probe point")
    return val


def relative_error(g: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(g), np.abs(g_fd)), DENOM_FLOOR)
    return np.abs(g - g_fd) / denom


def grad_check(
    f: Callable[[Tensor], Tensor],
    params,
    h: float = 1e-5,
    tol: float = 1e-4,
    grad: np.ndarray | None = None,
    indices=None,
) -> GradCheckReport:
    """Compare a gradient of ``f`` at ``params`` with central differences.

    If ``grad`` is omitted it is obtained by back-propagating through ``f``.
    ``indices`` restricts the probe to a subset of flat coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(params.data if isinstance(params, Tensor) else params, dtype=np.float64)
    if grad is None:
        leaf = Tensor(x0.copy(), requires_grad=True)
        out = f(leaf)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("objective is not finite at the probe point")
        out.backward()
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    _eval(f, x0)
    idx = np.arange(x0.size) if indices is None else np.asarray(indices, dtype=int)
    fd = np.empty(len(idx))
    flat = x0.reshape(-1)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval(f, x0)
        flat[i] = orig - h
        fm = _eval(f, x0)
        flat[i] = orig
        fd[n] = (fp - fm) / (2 * h)
    err = relative_error(grad[idx], fd)
    worst = int(np.argmax(err)) if len(err) else 0
    max_err = float(err[worst]) if len(err) else 0.0
    return GradCheckReport(max_err, int(idx[worst]) if len(idx) else 0, max_err <= tol, len(idx))


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, GradCheckReport]:
    """Check gradients of a closure w.r.t. a set of named parameter tensors.

    ``loss_fn`` must read the parameters' ``.data`` on every call. At most
    ``max_coords`` coordinates per tensor are probed (all when ``None``).
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("objective is not finite at the probe point")
    loss.backward()

    def value() -> float:
        v = float(loss_fn().data.reshape(-1)[0])
        if not np.isfinite(v):
            raise NonFiniteError("objective is not finite at the probe point")
        return v

    reports = {}
    for name, p in params.items():
        g = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        n = p.data.size
        if max_coords is None or n <= max_coords:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_coords, replace=False))
        flat = p.data.reshape(-1)
        fd = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            fd[k] = (fp - fm) / (2 * h)
        err = relative_error(g[idx], fd)
        worst = int(np.argmax(err))
        reports[name] = GradCheckReport(
            float(err[worst]), int(idx[worst]), float(err[worst]) <= tol, len(idx), name
        )
    return reports
