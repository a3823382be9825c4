"""Per-step effect estimators: conditional IV (ratio and two-stage), naive OLS, evaluation.

Reports cover time steps t = 2..T (array index 1..T-1): the first step has no
history to condition on.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

WEAK_INSTRUMENT_TOL = 1e-3


class CollinearDesignError(ValueError):
    def __init__(self, column: str, step: int | None = None):
        self.column, self.step = column, step
        at = f" at step t={step}" if step is not None else ""
        super().__init__(f"collinear design{at}: column {column!r} is linearly dependent on earlier columns")


class WeakInstrumentError(ValueError):
    def __init__(self, step: int, denominator: float):
        self.step, self.denominator = step, denominator
        super().__init__(f"weak instrument at step t={step}: first-stage coefficient {denominator:.3g}")


@dataclass
class RegressionDesign:
    response: np.ndarray
    focal: np.ndarray
    controls: np.ndarray | None = None
    intercept: bool = True
    control_names: Sequence[str] | None = None

    def matrix(self) -> tuple[np.ndarray, list[str]]:
        n = len(self.response)
        cols, names = [np.asarray(self.focal, float).reshape(n)], ["focal"]
        if self.intercept:
            cols.append(np.ones(n))
            names.append("intercept")
        if self.controls is not None and np.size(self.controls):
            C = np.asarray(self.controls, float).reshape(n, -1)
            cols.extend(C.T)
            names.extend(self.control_names or [f"control_{j}" for j in range(C.shape[1])])
        return np.column_stack(cols), names


def _qr_solve(A: np.ndarray, y: np.ndarray, names: list[str], step=None, rtol=1e-10) -> np.ndarray:
    n, k = A.shape
    if n <= k + 2:
        raise ValueError(f"need n > k + 2 observations, got n={n}, k={k}")
    # scale columns so the rank test is unit-free
    scale = np.sqrt((A * A).sum(axis=0))
    zero = np.flatnonzero(scale == 0)
    if zero.size:
        raise CollinearDesignError(names[zero[0]], step)
    Q, R = np.linalg.qr(A / scale)
    diag = np.abs(np.diag(R))
    bad = np.flatnonzero(diag < rtol * max(1.0, diag.max()))
    if bad.size:
        raise CollinearDesignError(names[bad[0]], step)
    return np.linalg.solve(R, Q.T @ y) / scale


def ols(response, design_cols: np.ndarray, names=None, step=None) -> np.ndarray:
    names = names or [f"col_{j}" for j in range(design_cols.shape[1])]
    return _qr_solve(np.asarray(design_cols, float), np.asarray(response, float), list(names), step)


def partial_coefficient(design: RegressionDesign, step: int | None = None) -> float:
    """OLS coefficient of the focal column given controls (and an intercept)."""
    A, names = design.matrix()
    y = np.asarray(design.response, float)
    if len(y) != A.shape[0]:
        raise ValueError("response and design lengths differ")
    return float(_qr_solve(A, y, names, step)[0])


# ---------------------------------------------------------------- reports

@dataclass
class AceReport:
    method: str
    steps: np.ndarray
    estimate: np.ndarray
    truth: np.ndarray | None = None
    abs_error: np.ndarray | None = None
    seed: int | None = None
    failures: dict = field(default_factory=dict)

    def mean_abs_error(self, min_step: int = 2) -> float:
        if self.abs_error is None:
            raise ValueError("report carries no ground truth")
        keep = (self.steps >= min_step) & np.isfinite(self.abs_error)
        return float(self.abs_error[keep].mean())


@dataclass
class AceAggregate:
    method: str
    steps: np.ndarray
    mean_abs_error: np.ndarray
    std: np.ndarray
    reps: np.ndarray


ControlsFn = Callable[[int], np.ndarray | None]


def _controls_at(controls, t):
    if controls is None:
        return None
    return controls(t) if callable(controls) else controls[t]


def _instrument(S, t):
    s = np.asarray(S, float)
    return s[:, t] if s.ndim == 2 else s[:, t, :]


def _check_variation(s, step):
    # a constant instrument has no first stage at all
    if np.all(np.ptp(s.reshape(len(s), -1), axis=0) == 0):
        raise WeakInstrumentError(step, 0.0)


def ace_civ_ratio(S, W, Y, controls=None, method: str = "civ_ratio",
                  tol: float = WEAK_INSTRUMENT_TOL) -> AceReport:
    """ACE_t = coef(Y_{t+1} ~ S_t | C_t) / coef(W_t ~ S_t | C_t) for t = 2..T.

    ``controls`` is a callable ``t -> (n, k) array`` or an indexable over
    array index t.
    """
    S = np.asarray(S, float)
    if S.ndim == 3:
        if S.shape[2] != 1:
            raise ValueError("ratio form needs a scalar instrument; use ace_two_stage for D_S > 1")
        S = S[:, :, 0]
    T = W.shape[1]
    est = np.empty(T - 1)
    for t in range(1, T):
        _check_variation(S[:, t], t + 1)
        C = _controls_at(controls, t)
        num = partial_coefficient(RegressionDesign(Y[:, t], S[:, t], C), step=t + 1)
        den = partial_coefficient(RegressionDesign(W[:, t], S[:, t], C), step=t + 1)
        if abs(den) < tol:
            raise WeakInstrumentError(t + 1, den)
        est[t - 1] = num / den
    return AceReport(method, np.arange(2, T + 1), est)


def ace_two_stage(S, W, Y, controls=None, method: str = "civ_2sls",
                  tol: float = WEAK_INSTRUMENT_TOL) -> AceReport:
    """Classical 2SLS per step; several instrument columns are allowed."""
    S = np.asarray(S, float)
    n, T = W.shape
    est = np.empty(T - 1)
    for t in range(1, T):
        Z = _instrument(S, t).reshape(n, -1)
        _check_variation(Z, t + 1)
        C = _controls_at(controls, t)
        C = np.empty((n, 0)) if C is None else np.asarray(C, float).reshape(n, -1)
        ones = np.ones((n, 1))
        names1 = [f"s_{j}" for j in range(Z.shape[1])] + ["intercept"] + [f"control_{j}" for j in range(C.shape[1])]
        A1 = np.hstack([Z, ones, C])
        b1 = ols(W[:, t], A1, names1, step=t + 1)
        if np.max(np.abs(b1[: Z.shape[1]])) < tol:
            raise WeakInstrumentError(t + 1, float(np.max(np.abs(b1[: Z.shape[1]]))))
        w_hat = A1 @ b1
        A2 = np.hstack([w_hat[:, None], ones, C])
        b2 = ols(Y[:, t], A2, ["w_hat", "intercept"] + names1[Z.shape[1] + 1:], step=t + 1)
        est[t - 1] = b2[0]
    return AceReport(method, np.arange(2, T + 1), est)


def naive_design(ds, t: int) -> tuple[np.ndarray, list[str]]:
    """[W_t, intercept, X_t, W_{t-1}, Y_t] at array index t >= 1."""
    n = ds.n
    cols = [ds.W[:, t], np.ones(n), *ds.X[:, t].T, ds.W[:, t - 1], ds.Y[:, t - 1]]
    names = ["w", "intercept"] + [f"x_{j}" for j in range(ds.X.shape[2])] + ["w_lag", "y_lag"]
    return np.column_stack(cols), names


def ace_naive(ds, method: str = "naive") -> AceReport:
    """Coefficient of W_t in OLS of Y_{t+1} on [W_t, X_t, W_{t-1}, Y_t]."""
    T = ds.horizon
    est = np.empty(T - 1)
    for t in range(1, T):
        A, names = naive_design(ds, t)
        est[t - 1] = ols(ds.Y[:, t], A, names, step=t + 1)[0]
    return AceReport(method, np.arange(2, T + 1), est)


# ---------------------------------------------------------------- evaluation

def evaluate(report: AceReport, truth) -> AceReport:
    """Attach ground truth (scalar or per-step over t = 1..T) and absolute errors."""
    truth = np.asarray(truth, float)
    if truth.ndim == 0:
        truth = np.full(len(report.steps), float(truth))
    elif len(truth) == len(report.steps) + 1:
        truth = truth[report.steps - 1]
    if len(truth) != len(report.steps):
        raise ValueError(f"horizon mismatch: {len(truth)} truths for {len(report.steps)} steps")
    report.truth = truth
    report.abs_error = np.abs(report.estimate - truth)
    return report


def aggregate(reports: Sequence[AceReport]) -> AceAggregate:
    """Per-step mean and (population) std of absolute errors across replicates."""
    if not reports:
        raise ValueError("no reports to aggregate")
    method = reports[0].method
    steps = reports[0].steps
    for r in reports:
        if r.method != method or not np.array_equal(r.steps, steps):
            raise ValueError("reports disagree on method or horizon")
        if r.abs_error is None:
            raise ValueError("evaluate() each report before aggregating")
    errs = np.vstack([r.abs_error for r in reports])
    finite = np.isfinite(errs)
    reps = finite.sum(axis=0)
    with np.errstate(invalid="ignore"):
        mean = np.where(reps > 0, np.nansum(np.where(finite, errs, 0.0), axis=0) / np.maximum(reps, 1), np.nan)
        std = np.array([errs[finite[:, k], k].std() if reps[k] else np.nan for k in range(errs.shape[1])])
    return AceAggregate(method, steps, mean, std, reps)


def write_reports(reports: Sequence[AceReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "method", "estimate", "truth", "abs_error"])
        for r in reports:
            for k, t in enumerate(r.steps):
                truth = "" if r.truth is None else repr(float(r.truth[k]))
                err = "" if r.abs_error is None else repr(float(r.abs_error[k]))
                w.writerow([int(t), r.method, repr(float(r.estimate[k])), truth, err])


def write_aggregates(aggs: Sequence[AceAggregate], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "method", "mean_abs_error", "std", "reps"])
        for a in aggs:
            for k, t in enumerate(a.steps):
                w.writerow([int(t), a.method, repr(float(a.mean_abs_error[k])), repr(float(a.std[k])), int(a.reps[k])])


def read_reports(path) -> list[AceReport]:
    rows: dict[str, list] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["method"], []).append(row)
    out = []
    for method, rs in rows.items():
        steps = np.array([int(r["t"]) for r in rs])
        est = np.array([float(r["estimate"]) for r in rs])
        truth = np.array([float(r["truth"]) for r in rs]) if rs[0]["truth"] else None
        err = np.array([float(r["abs_error"]) for r in rs]) if rs[0]["abs_error"] else None
        out.append(AceReport(method, steps, est, truth, err))
    return out


# ---------------------------------------------------------------- control sets

def history_controls(S, Z, W, Y):
    """Controls for the instrument at array index t (step t+1).

    Columns: Z_1..Z_{t+1}, S_1..S_t, W_1..W_t and Y_2..Y_{t+1}, i.e. the
    current conditioning latents plus the full past of instrument, treatment
    and outcome. The current instrument is excluded; every learned S_t is a
    function of the observed history, so conditioning on that whole history
    would leave no instrument variation.
    """
    S = np.asarray(S, float)
    S = S[..., None] if S.ndim == 2 else S
    Z = np.asarray(Z, float)
    Z = Z[..., None] if Z.ndim == 2 else Z
    n = S.shape[0]

    def controls(t):
        return np.column_stack([Z[:, : t + 1].reshape(n, -1), S[:, :t].reshape(n, -1), W[:, :t], Y[:, :t]])

    return controls


def ace_oracle(ds, method: str = "oracle") -> AceReport:
    """Ratio estimator fed the generator's true S and Z."""
    if ds.S_true is None or ds.Z_true is None:
        raise ValueError("dataset carries no ground-truth latents")
    return ace_civ_ratio(ds.S_true, ds.W, ds.Y, history_controls(ds.S_true, ds.Z_true, ds.W, ds.Y), method)


def ace_tdciv(S_hat, Z_hat, W, Y, method: str = "tdciv") -> AceReport:
    """Ratio (D_S = 1) or two-stage (D_S > 1) estimator on learned representations."""
    S_hat = np.asarray(S_hat, float)
    controls = history_controls(S_hat, Z_hat, W, Y)
    if S_hat.ndim == 2 or S_hat.shape[2] == 1:
        return ace_civ_ratio(S_hat, W, Y, controls, method)
    return ace_two_stage(S_hat, W, Y, controls, method)
