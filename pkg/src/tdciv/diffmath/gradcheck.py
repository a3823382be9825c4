"""Central finite-difference check of tape gradients."""
from __future__ import annotations

import warnings
from typing import Callable

import numpy as np

from .tape import Tape, backward


class ProbeError(FloatingPointError):
    def __init__(self, key, index):
        self.key, self.index = key, index
        where = f"{key}[{index}]" if key is not None else f"[{index}]"
        super().__init__(f"non-finite function value when probing coordinate {where}")


class NonSmoothWarning(UserWarning):
    pass


def _evaluate(fn, point):
    tape = Tape()
    if isinstance(point, dict):
        nodes = {k: tape.leaf(v, name=k) for k, v in point.items()}
    else:
        nodes = tape.leaf(point, name="x")
    out = fn(tape, nodes)
    return tape, nodes, out


def grad_check(fn: Callable, point, perturbation: float = 1e-5, kink_tol: float = 0.1) -> float:
    """Max relative error between backward() and central differences.

    ``fn(tape, x)`` builds a scalar node from ``x``, a leaf node (or a dict
    of leaf nodes when ``point`` is a dict of arrays). The error per
    coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    Coordinates where the one-sided slopes disagree by more than
    ``kink_tol`` are treated as kinks: a NonSmoothWarning is raised and the
    coordinate is skipped. Returns nan if every coordinate was skipped.
    """
    if perturbation <= 0:
        raise ValueError("perturbation must be positive")
    as_dict = isinstance(point, dict)
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()} if as_dict \
        else {None: np.array(point, dtype=np.float64)}

    def f_at(values):
        _, _, out = _evaluate(fn, values if as_dict else values[None])
        return float(out.value)

    tape, nodes, out = _evaluate(fn, base if as_dict else base[None])
    backward(tape, out)
    f0 = float(out.value)
    analytic = {k: nodes[k].grad.copy() for k in base} if as_dict else {None: nodes.grad.copy()}

    worst = np.nan
    h = perturbation
    for key, arr in base.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f_at(base)
            flat[i] = orig - h
            fm = f_at(base)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ProbeError(key, i)
            forward, backward_ = (fp - f0) / h, (f0 - fm) / h
            if abs(forward - backward_) > kink_tol * max(1.0, abs(forward), abs(backward_)):
                where = f"{key}[{i}]" if key is not None else f"[{i}]"
                warnings.warn(f"non-smooth point at coordinate {where}; skipped", NonSmoothWarning)
                continue
            numeric = (fp - fm) / (2 * h)
            a = analytic[key].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = err if np.isnan(worst) else max(worst, err)
    return worst
