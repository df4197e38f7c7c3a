"""Monotone descent for the gradient-based stages.

Two methods share one line search: plain gradient descent with a fixed
initial step, and limited-memory BFGS. Each accepted step must lower the
loss (Armijo condition on the projected displacement); a trial point whose
loss is non-finite or raises (e.g. a joint crossing behind the camera) is
treated as infinitely bad and the step is halved.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .kinematics import PointBehindCamera
from .objective import NonFiniteLoss

logger = logging.getLogger(__name__)

_RECOVERABLE = (PointBehindCamera, NonFiniteLoss, FloatingPointError)


class OptimizationDiverged(RuntimeError):
    """The loss became non-finite at the starting point; ``trace`` holds the loss history."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = list(trace)


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "lbfgs"
    lr: float = 1.0
    max_iter: int = 500
    tol: float = 1e-7
    atol: float = 1e-12
    history: int = 10
    max_halvings: int = 40
    armijo: float = 1e-4

    def __post_init__(self):
        if self.method not in ("lbfgs", "gd"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if not (self.lr > 0 and self.max_iter >= 0 and self.tol >= 0):
            raise ValueError("invalid optimizer settings")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class OptimizeResult:
    x: np.ndarray
    loss: float
    n_iter: int
    converged: bool
    trace: list = field(default_factory=list)


def _safe(fun, x):
    try:
        f, g = fun(x)
    except _RECOVERABLE:
        return np.inf, None
    if not np.isfinite(f) or g is None or not np.all(np.isfinite(g)):
        return np.inf, None
    return float(f), np.asarray(g, dtype=np.float64)


def _two_loop(g, mem):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = mem[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _line_search(fun, proj, x, f, g, d, cfg):
    """Backtracking along ``d`` (halving); returns (None, f, None) if nothing improves."""
    step = 1.0
    for _ in range(cfg.max_halvings):
        x_new = proj(x + step * d)
        f_new, g_new = _safe(fun, x_new)
        if f_new <= f + cfg.armijo * (g @ (x_new - x)) and f_new <= f:
            return x_new, f_new, g_new
        step *= 0.5
    return None, f, None


def minimize(fun, x0, cfg=OptimizerConfig(), project=None):
    """Minimise ``fun(x) -> (loss, grad)`` starting at ``x0``.

    ``project`` maps a trial point back onto the feasible set (e.g. clamps a
    scale variable). The returned loss never exceeds the initial loss.
    Stops on a relative loss change below ``cfg.tol``, on ``max_iter``, or
    when no step along the search direction lowers the loss.

    Raises:
        OptimizationDiverged: the loss is not finite at ``x0``.
    """
    proj = project or (lambda v: v)
    x = proj(np.asarray(x0, dtype=np.float64).copy())
    f, g = _safe(fun, x)
    trace = [f]
    if not np.isfinite(f):
        raise OptimizationDiverged("loss is not finite at the initial point", trace)
    mem = deque(maxlen=cfg.history)
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        quasi = cfg.method == "lbfgs" and bool(mem)
        if quasi:
            d = -_two_loop(g, mem)
            if not g @ d < 0:
                mem.clear()
                quasi = False
        if not quasi:
            d = -cfg.lr * g
        x_new, f_new, g_new = _line_search(fun, proj, x, f, g, d, cfg)
        if x_new is None and quasi:
            # stale curvature pairs: restart from the gradient direction
            mem.clear()
            x_new, f_new, g_new = _line_search(fun, proj, x, f, g, -cfg.lr * g, cfg)
        if x_new is None:
            converged = True
            break
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * max(1.0, np.sqrt((s @ s) * (y @ y))):
            mem.append((s, y, 1.0 / sy))
        change = f - f_new
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if change <= cfg.tol * max(abs(f), cfg.atol) or f <= cfg.atol:
            converged = True
            break
    logger.debug("minimize: %d iterations, loss %.6g, converged=%s", it, f, converged)
    return OptimizeResult(x, f, it, converged, trace)
