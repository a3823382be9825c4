"""Synthetic time-series panels with a latent time-varying CIV.

Every series is a p-order autoregression with zero pre-history and a random
first step. Index ``t``
in the arrays is time step ``t + 1``; the outcome array stores Y_{t+1} at
index ``t``, so ``Y[:, 0]`` is Y_2.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


class PanelParseError(ValueError):
    def __init__(self, message, row=None, column=None):
        self.row, self.column = row, column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass
class GenConfig:
    n_samples: int = 2000
    horizon: int = 10
    p_order: int = 1
    dim_x: int = 3
    dim_u: int = 3
    seed: int = 0
    rho_w: float = 0.5
    rho_z: float = 0.5
    rho_u: float = 0.5
    noise_sd_x: float = 0.01
    noise_sd_u: float = 0.01
    noise_sd_s: float = 1.0
    init_sd: float = 1.0
    stationary: bool = False
    latent_treatment_effect: bool = True
    proxy_injection: bool = True
    proxy_noise_sd: float = 0.1
    # draws failing these screens are redrawn from a derived seed
    min_civ_strength: float = 0.25
    min_overlap: float = 0.5
    overlap_band: float = 0.02
    max_attempts: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_samples <= 0:
            raise ConfigError(f"n_samples must be > 0, got {self.n_samples}")
        if self.horizon < 2:
            raise ConfigError(f"horizon must be >= 2, got {self.horizon}")
        if self.p_order < 1:
            raise ConfigError(f"p_order must be >= 1, got {self.p_order}")
        if self.p_order >= self.horizon:
            raise ConfigError(f"p_order ({self.p_order}) must be < horizon ({self.horizon})")
        if self.dim_x <= 0 or self.dim_u <= 0:
            raise ConfigError("dim_x and dim_u must be > 0")
        for name in ("noise_sd_x", "noise_sd_u", "noise_sd_s", "proxy_noise_sd"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.init_sd < 0:
            raise ConfigError("init_sd must be >= 0")
        if self.min_civ_strength < 0 or not 0 <= self.min_overlap <= 1:
            raise ConfigError("min_civ_strength must be >= 0 and min_overlap in [0, 1]")
        if not 0 < self.overlap_band < 0.5:
            raise ConfigError("overlap_band must lie in (0, 0.5)")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class Coefficients:
    """Per-dataset dynamics; lag coefficient arrays have shape (p, dim)."""
    alpha: np.ndarray
    omega: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    mu_x: np.ndarray
    mu_u: np.ndarray
    mu_s: float
    mu_z: np.ndarray
    c: float


@dataclass
class PanelDataset:
    X: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    U: np.ndarray | None = None
    S_true: np.ndarray | None = None
    Z_true: np.ndarray | None = None
    true_ace: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, T, _ = self.X.shape
        if self.W.shape != (n, T) or self.Y.shape != (n, T):
            raise ValueError(f"inconsistent shapes X{self.X.shape} W{self.W.shape} Y{self.Y.shape}")
        if not np.isin(self.W, (0.0, 1.0)).all():
            raise ValueError("treatment W must be binary")
        for name in ("X", "W", "Y", "U", "S_true", "Z_true", "true_ace"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def horizon(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "PanelDataset":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return PanelDataset(self.X[idx], self.W[idx], self.Y[idx], pick(self.U), pick(self.S_true),
                            pick(self.Z_true), self.true_ace, dict(self.meta))

    def equals(self, other: "PanelDataset") -> bool:
        for name in ("X", "W", "Y", "U", "S_true", "Z_true", "true_ace"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or not np.array_equal(a, b)):
                return False
        return True


# ---------------------------------------------------------------- coefficient draws

def _spectral_radius(lag_coef: np.ndarray) -> float:
    p = len(lag_coef)
    companion = np.zeros((p, p))
    companion[0] = lag_coef
    companion[1:, :-1] = np.eye(p - 1)
    return float(np.abs(np.linalg.eigvals(companion)).max())


def draw_lag_coefficients(rng, p: int, dim: int, mean, sd, stationary: bool = False) -> np.ndarray:
    """Draw (p, dim) coefficients; optionally redraw columns whose AR(p) is explosive."""
    out = rng.normal(mean, sd, size=(p, dim))
    if stationary:
        for j in range(dim):
            while _spectral_radius(out[:, j] / p) >= 1.0:
                out[:, j] = rng.normal(mean, sd, size=(p, 1))[:, 0]
    return out


def draw_coefficients(cfg: GenConfig, rng) -> Coefficients:
    p = cfg.p_order
    i = np.arange(1, p + 1, dtype=float)[:, None]
    alpha = draw_lag_coefficients(rng, p, cfg.dim_x, 0.0, 0.5, cfg.stationary)
    omega = rng.normal(1 - i / p, i / p, size=(p, cfg.dim_x))
    beta = draw_lag_coefficients(rng, p, cfg.dim_u, 1 - i / p, i / p, cfg.stationary)
    lam = rng.normal(0.0, 0.5, size=(p, cfg.dim_u))
    mu_x = rng.normal(size=cfg.dim_x)
    mu_u = rng.normal(size=cfg.dim_u)
    mu_s = float(rng.normal())
    mu_z = rng.normal(size=cfg.dim_x)
    c = float(rng.normal())
    if not cfg.latent_treatment_effect:
        mu_u = np.zeros_like(mu_u)
    return Coefficients(alpha, omega, beta, lam, mu_x, mu_u, mu_s, mu_z, c)


# ---------------------------------------------------------------- one-step recursions

def ar_mean(series: np.ndarray, exog: np.ndarray | None, t: int, lag_coef, exog_coef=None) -> np.ndarray:
    """(1/p) * sum_i (lag_coef[i] * series[t-i] + exog_coef[i] * exog[t-i]) with zero pre-history.

    ``series`` is (n, T, d) and ``exog`` is (n, T); lags before index 0 are zero.
    """
    lag_coef = np.asarray(lag_coef, dtype=float)
    p = lag_coef.shape[0]
    acc = np.zeros(series.shape[:1] + series.shape[2:])
    for i in range(1, p + 1):
        if t - i < 0:
            break
        acc += lag_coef[i - 1] * series[:, t - i]
        if exog is not None:
            acc += np.multiply.outer(exog[:, t - i], np.asarray(exog_coef, dtype=float)[i - 1])
    return acc / p


def civ_mean(S: np.ndarray, t: int, p: int) -> np.ndarray:
    acc = np.zeros(S.shape[0])
    for i in range(1, p + 1):
        if t - i < 0:
            break
        acc += S[:, t - i]
    return acc / p


def conditioning_mean(Z: np.ndarray, X: np.ndarray, t: int, p: int) -> np.ndarray:
    # X enters at the current index inside the lag sum, so it contributes p/p = 1
    acc = np.zeros(Z.shape[:1] + Z.shape[2:])
    for i in range(1, p + 1):
        if t - i >= 0:
            acc += Z[:, t - i]
        acc += X[:, t]
    return acc / p


def window_sum(series: np.ndarray, t: int, p: int) -> np.ndarray:
    """Sum over the last p steps up to and including index t."""
    return series[:, max(0, t - p + 1): t + 1].sum(axis=1)


def treatment_logit(coef: Coefficients, X, U, S, Z, t: int, p: int) -> np.ndarray:
    theta = (window_sum(X, t, p) @ coef.mu_x + window_sum(U, t, p) @ coef.mu_u
             + coef.mu_s * window_sum(S, t, p) + window_sum(Z, t, p) @ coef.mu_z)
    return coef.c * theta


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def outcome_value(cfg: GenConfig, W_t, Z_t, U_t) -> np.ndarray:
    return cfg.rho_w * W_t + cfg.rho_z * Z_t.sum(axis=-1) + cfg.rho_u * U_t.sum(axis=-1)


# ---------------------------------------------------------------- whole-series generators

def generate_dynamics(cfg: GenConfig, rng, coef: Coefficients | None = None, W=None):
    """Roll out X and U for a fixed treatment path ``W`` (default: no treatment)."""
    n, T = cfg.n_samples, cfg.horizon
    coef = coef or draw_coefficients(cfg, rng)
    W = np.zeros((n, T)) if W is None else W
    X = np.zeros((n, T, cfg.dim_x))
    U = np.zeros((n, T, cfg.dim_u))
    for t in range(T):
        X[:, t] = ar_mean(X, W, t, coef.alpha, coef.omega) + rng.normal(0, cfg.noise_sd_x, (n, cfg.dim_x))
        U[:, t] = ar_mean(U, W, t, coef.beta, coef.lam) + rng.normal(0, cfg.noise_sd_u, (n, cfg.dim_u))
        if t == 0 and cfg.init_sd > 0:
            X[:, 0] += rng.normal(0, cfg.init_sd, (n, cfg.dim_x))
            U[:, 0] += rng.normal(0, cfg.init_sd, (n, cfg.dim_u))
    return X, U


def generate_civ_path(cfg: GenConfig, rng) -> np.ndarray:
    n, T = cfg.n_samples, cfg.horizon
    S = np.zeros((n, T))
    for t in range(T):
        S[:, t] = civ_mean(S, t, cfg.p_order) + rng.normal(0, cfg.noise_sd_s, n)
        if t == 0 and cfg.init_sd > 0:
            S[:, 0] += rng.normal(0, cfg.init_sd, n)
    return S


def generate_conditioning(cfg: GenConfig, X: np.ndarray, rng) -> np.ndarray:
    n, T, d = X.shape
    Z = np.zeros((n, T, d))
    for t in range(T):
        Z[:, t] = conditioning_mean(Z, X, t, cfg.p_order) + rng.normal(0, cfg.noise_sd_u, (n, d))
        if t == 0 and cfg.init_sd > 0:
            Z[:, 0] += rng.normal(0, cfg.init_sd, (n, d))
    return Z


def generate_treatment(cfg: GenConfig, coef: Coefficients, X, U, S, Z, rng) -> np.ndarray:
    n, T = S.shape
    W = np.zeros((n, T))
    for t in range(T):
        prob = _sigmoid(treatment_logit(coef, X, U, S, Z, t, cfg.p_order))
        W[:, t] = (rng.random(n) < prob).astype(float)
    return W


def generate_outcome(cfg: GenConfig, W, Z, U) -> np.ndarray:
    return outcome_value(cfg, W, Z, U)


class ScreenError(RuntimeError):
    """No coefficient draw passed the relevance and overlap screens."""


def _simulate(cfg: GenConfig, rng):
    coef = draw_coefficients(cfg, rng)
    n, T, p = cfg.n_samples, cfg.horizon, cfg.p_order
    X = np.zeros((n, T, cfg.dim_x))
    U = np.zeros((n, T, cfg.dim_u))
    S = np.zeros((n, T))
    Z = np.zeros((n, T, cfg.dim_x))
    W = np.zeros((n, T))
    Y = np.zeros((n, T))
    overlap = np.empty(T)
    lo, hi = cfg.overlap_band, 1.0 - cfg.overlap_band
    for t in range(T):
        X[:, t] = ar_mean(X, W, t, coef.alpha, coef.omega) + rng.normal(0, cfg.noise_sd_x, (n, cfg.dim_x))
        U[:, t] = ar_mean(U, W, t, coef.beta, coef.lam) + rng.normal(0, cfg.noise_sd_u, (n, cfg.dim_u))
        S[:, t] = civ_mean(S, t, p) + rng.normal(0, cfg.noise_sd_s, n)
        if t == 0 and cfg.init_sd > 0:
            X[:, 0] += rng.normal(0, cfg.init_sd, (n, cfg.dim_x))
            U[:, 0] += rng.normal(0, cfg.init_sd, (n, cfg.dim_u))
            S[:, 0] += rng.normal(0, cfg.init_sd, n)
        Z[:, t] = conditioning_mean(Z, X, t, p) + rng.normal(0, cfg.noise_sd_u, (n, cfg.dim_x))
        if t == 0 and cfg.init_sd > 0:
            Z[:, 0] += rng.normal(0, cfg.init_sd, (n, cfg.dim_x))
        prob = _sigmoid(treatment_logit(coef, X, U, S, Z, t, p))
        overlap[t] = ((prob > lo) & (prob < hi)).mean()
        W[:, t] = (rng.random(n) < prob).astype(float)
        Y[:, t] = outcome_value(cfg, W[:, t], Z[:, t], U[:, t])
    return coef, X, U, S, Z, W, Y, overlap


def attempt_rng(seed: int, attempt: int):
    if attempt == 0:
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(attempt,)))


def generate_dataset(cfg: GenConfig) -> PanelDataset:
    """Interleave all recursions in time order; fully determined by ``cfg.seed``.

    A draw is kept when the instrument moves the treatment logit
    (|c * mu_s| >= min_civ_strength) and, at every step, at least
    ``min_overlap`` of units have propensity inside the overlap band.
    Otherwise the whole draw is repeated from a seed derived from
    (cfg.seed, attempt).
    """
    cfg.validate()
    for attempt in range(cfg.max_attempts):
        rng = attempt_rng(cfg.seed, attempt)
        coef, X, U, S, Z, W, Y, overlap = _simulate(cfg, rng)
        if abs(coef.c * coef.mu_s) >= cfg.min_civ_strength and overlap.min() >= cfg.min_overlap:
            break
    else:
        raise ScreenError(f"no draw passed the screens in {cfg.max_attempts} attempts (seed {cfg.seed})")
    n, T = W.shape
    X_obs = X
    meta = {"proxy_channel": None, "attempts": attempt + 1, "min_overlap": float(overlap.min())}
    if cfg.proxy_injection:
        proxy = S + rng.normal(0, cfg.proxy_noise_sd, (n, T))
        X_obs = np.concatenate([X, proxy[..., None]], axis=-1)
        meta["proxy_channel"] = cfg.dim_x
    meta["coefficients"] = coef
    return PanelDataset(X_obs, W, Y, U, S, Z, np.full(T, cfg.rho_w), meta)


def replicate_seed(master_seed: int, k: int) -> int:
    """Seed of replicate ``k``; depends only on (master_seed, k)."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(k,))
    return int(ss.generate_state(1, np.uint32)[0])


# ---------------------------------------------------------------- CSV panels

def _header(ds: PanelDataset) -> list[str]:
    cols = ["sample", "t"] + [f"x_{j}" for j in range(ds.X.shape[2])] + ["w", "y"]
    if ds.U is not None:
        cols += [f"u_{j}" for j in range(ds.U.shape[2])]
    if ds.S_true is not None:
        cols.append("s_true")
    if ds.Z_true is not None:
        cols += [f"z_{j}" for j in range(ds.Z_true.shape[2])]
    if ds.true_ace is not None:
        cols.append("ace_true")
    return cols


def write_panel(ds: PanelDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_header(ds))
        for i in range(ds.n):
            for t in range(ds.horizon):
                row = [i, t + 1, *ds.X[i, t].tolist(), int(ds.W[i, t]), ds.Y[i, t].item()]
                if ds.U is not None:
                    row += ds.U[i, t].tolist()
                if ds.S_true is not None:
                    row.append(ds.S_true[i, t].item())
                if ds.Z_true is not None:
                    row += ds.Z_true[i, t].tolist()
                if ds.true_ace is not None:
                    row.append(ds.true_ace[t].item())
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _group(header, prefix):
    idx = [k for k, name in enumerate(header) if name.startswith(prefix)]
    expected = [f"{prefix}{j}" for j in range(len(idx))]
    if [header[k] for k in idx] != expected:
        raise PanelParseError(f"columns {prefix}* must be numbered consecutively from 0", row=1)
    return idx


def read_panel(path) -> PanelDataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelParseError("empty file") from None
        rows = list(reader)
    if header[:2] != ["sample", "t"] or "w" not in header or "y" not in header:
        raise PanelParseError("header must start with 'sample,t' and contain 'w' and 'y'", row=1)
    allowed = {"sample", "t", "w", "y", "s_true", "ace_true"}
    for name in header:
        if name not in allowed and not name[:2] in ("x_", "u_", "z_"):
            raise PanelParseError(f"unknown column {name!r}", row=1, column=name)
    x_idx, u_idx, z_idx = _group(header, "x_"), _group(header, "u_"), _group(header, "z_")
    if not x_idx:
        raise PanelParseError("no covariate columns x_*", row=1)
    width = len(header)
    values = np.empty((len(rows), width))
    for r, row in enumerate(rows, start=2):
        if len(row) != width:
            raise PanelParseError(f"expected {width} fields, got {len(row)}", row=r)
        for k, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise PanelParseError(f"not a number: {cell!r}", row=r, column=header[k]) from None
            if not np.isfinite(v):
                raise PanelParseError(f"non-finite value {cell!r}", row=r, column=header[k])
            values[r - 2, k] = v
    col = {name: k for k, name in enumerate(header)}
    w = values[:, col["w"]]
    bad = np.flatnonzero((w != 0) & (w != 1))
    if bad.size:
        raise PanelParseError(f"treatment must be 0 or 1, got {rows[bad[0]][col['w']]!r}",
                              row=int(bad[0]) + 2, column="w")
    sample, t = values[:, 0], values[:, 1]
    samples = np.unique(sample)
    if len(rows) == 0:
        raise PanelParseError("no data rows")
    T = len(rows) // len(samples)
    if T * len(samples) != len(rows):
        raise PanelParseError("ragged panel: samples have different horizons")
    expect_sample = np.repeat(samples, T)
    expect_t = np.tile(np.arange(1, T + 1), len(samples))
    mismatch = np.flatnonzero((sample != expect_sample) | (t != expect_t))
    if mismatch.size:
        raise PanelParseError("rows must be sorted by (sample, t) with t = 1..T",
                              row=int(mismatch[0]) + 2)
    n = len(samples)
    grid = lambda idx: values[:, idx].reshape(n, T, len(idx))  # noqa: E731
    X = grid(x_idx)
    U = grid(u_idx) if u_idx else None
    Z = grid(z_idx) if z_idx else None
    S = values[:, col["s_true"]].reshape(n, T) if "s_true" in col else None
    ace = values[:, col["ace_true"]].reshape(n, T)[0].copy() if "ace_true" in col else None
    return PanelDataset(X, w.reshape(n, T), values[:, col["y"]].reshape(n, T), U, S, Z, ace)
