"""Sequential VAE that learns a latent instrument S_t and conditioning set Z_t.

An LSTM summarises the observed history into H_t. Two encoders give
q(S_t | H_t, S_{t-1}) and q(Z_t | H_t, Z_{t-1}); S has a standard-normal
prior and Z a Gaussian prior computed from H_t. A decoder reconstructs the
step input [X_t, W_{t-1}, Y_t] from (Z_t, S_t), g1 predicts W_t from
(Z_t, S_t, H_t) and g2/g3 give mean and variance of Y_{t+1} from (Z_t, H_t).

Training minimises  -ELBO - alpha * log p(W) - beta * log p(Y),
summed over steps and averaged over the minibatch.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffmath as dm
from .diffmath import DiffNode, OptimizerState, Tape, backward, optimizer_step

CHECKPOINT_VERSION = 1
PROB_CLAMP = 1e-7
VAR_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, batch, parts):
        self.epoch, self.batch, self.parts = epoch, batch, parts
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {parts}")


@dataclass
class ModelConfig:
    dim_s: int = 1
    dim_z: int | None = None  # None: number of covariate channels
    hidden: int = 128
    fc_hidden: int = 128
    alpha: float = 1.0
    beta: float = 1.0
    learning_rate: float = 1e-3
    init_sd: float = 0.01
    keep_prob: float = 0.8
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    binary_outcome: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dim_s < 1 or (self.dim_z is not None and self.dim_z < 1):
            raise ValueError("dim_s and dim_z must be >= 1")
        if self.hidden < 1 or self.fc_hidden < 1:
            raise ValueError("hidden sizes must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not 0 < self.keep_prob <= 1:
            raise ValueError("keep_prob must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.init_sd < 0:
            raise ValueError("learning_rate and init_sd must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class GaussianParams:
    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, float)
        self.log_variance = np.asarray(self.log_variance, float)
        if self.mean.shape != self.log_variance.shape:
            raise ValueError("mean and log_variance shapes differ")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_variance))):
            raise ValueError("Gaussian parameters must be finite")

    @property
    def variance(self):
        return np.exp(self.log_variance)


@dataclass
class TdcivModel:
    config: ModelConfig
    dim_in: int  # width of the step input [X_t, W_{t-1}, Y_t]
    horizon: int
    params: dict
    # per-(step, channel) standardisation fitted on the training panel
    in_mean: np.ndarray
    in_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @property
    def dim_z(self) -> int:
        return self.config.dim_z or (self.dim_in - 2)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


@dataclass
class LatentPath:
    S_mean: np.ndarray
    S_log_variance: np.ndarray
    Z_mean: np.ndarray
    Z_log_variance: np.ndarray
    H: np.ndarray
    S_sample: np.ndarray | None = None
    Z_sample: np.ndarray | None = None


@dataclass
class TrainResult:
    model: TdcivModel
    loss_trace: list = field(default_factory=list)
    clamp_events: int = 0


# ---------------------------------------------------------------- parameters

def _layer_shapes(cfg: ModelConfig, dim_in: int, dim_z: int) -> dict:
    m, F, ds, dz = cfg.hidden, cfg.fc_hidden, cfg.dim_s, dim_z
    out_y = 1 if cfg.binary_outcome else 2
    nets = {
        "enc_s": (m + ds, 2 * ds),
        "enc_z": (m + dz, 2 * dz),
        "prior_z": (m, 2 * dz),
        "dec": (dz + ds, 2 * dim_in),
        "g1": (dz + ds + m, 1),
        "gy": (dz + m, out_y),
    }
    shapes = {"lstm.W": (dim_in + m, 4 * m), "lstm.b": (4 * m,), "xi": (m,)}
    for name, (k, o) in nets.items():
        shapes[f"{name}.W1"] = (k, F)
        shapes[f"{name}.b1"] = (F,)
        shapes[f"{name}.W2"] = (F, o)
        shapes[f"{name}.b2"] = (o,)
    return shapes


def init_params(cfg: ModelConfig, dim_in: int, dim_z: int, rng) -> dict:
    """Weights ~ N(0, init_sd^2), biases zero; the initial state xi is a weight."""
    params = {}
    for name, shape in sorted(_layer_shapes(cfg, dim_in, dim_z).items()):
        is_bias = name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2")
        params[name] = np.zeros(shape) if is_bias else rng.normal(0.0, cfg.init_sd, size=shape)
    return params


def step_inputs(X: np.ndarray, W: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """(n, T, dx + 2) array of [X_t, W_{t-1}, Y_t] with W_0 = Y_1 = 0."""
    n, T, _ = X.shape
    w_prev = np.zeros((n, T))
    y_prev = np.zeros((n, T))
    w_prev[:, 1:] = W[:, :-1]
    y_prev[:, 1:] = Y[:, :-1]  # Y[:, t] holds Y_{t+1}
    return np.concatenate([X, w_prev[..., None], y_prev[..., None]], axis=-1)


def _standardiser(a: np.ndarray, axis=0):
    mu = a.mean(axis=axis)
    sd = a.std(axis=axis)
    return mu, np.where(sd > 1e-12, sd, 1.0)


def build_model(cfg: ModelConfig, X, W, Y) -> TdcivModel:
    inp = step_inputs(X, W, Y)
    in_mean, in_std = _standardiser(inp)
    y_mean, y_std = _standardiser(Y)
    dim_in = inp.shape[2]
    dim_z = cfg.dim_z or X.shape[2]
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, dim_in, dim_z, rng)
    return TdcivModel(cfg, dim_in, X.shape[1], params, in_mean, in_std, y_mean, y_std)


def prepare(model: TdcivModel, X, W, Y) -> dict:
    """Standardised arrays laid out for the forward pass."""
    if X.shape[1] != model.horizon:
        raise ValueError(f"horizon mismatch: model {model.horizon}, data {X.shape[1]}")
    inp = (step_inputs(X, W, Y) - model.in_mean) / model.in_std
    if inp.shape[2] != model.dim_in:
        raise ValueError(f"input width mismatch: model {model.dim_in}, data {inp.shape[2]}")
    y = (Y - model.y_mean) / model.y_std
    return {"inp": inp, "w": np.asarray(W, float), "y": y if not model.config.binary_outcome else np.asarray(Y, float)}


# ---------------------------------------------------------------- densities

def kl_gaussian(q: GaussianParams, p: GaussianParams) -> float:
    """KL(q || p) for diagonal Gaussians, summed over coordinates."""
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"dimension mismatch {q.mean.shape} vs {p.mean.shape}")
    d = q.mean - p.mean
    val = 0.5 * np.sum(p.log_variance - q.log_variance + (q.variance + d * d) / p.variance - 1.0)
    return float(max(val, 0.0))


def sample_reparam(params: GaussianParams, rng) -> np.ndarray:
    eps = rng.standard_normal(params.mean.shape)
    return params.mean + np.exp(0.5 * params.log_variance) * eps


def bernoulli_loglik(prob, w) -> np.ndarray:
    p = np.clip(np.asarray(prob, float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return w * np.log(p) + (1.0 - w) * np.log(1.0 - p)


def gaussian_loglik(x, mean, log_variance) -> np.ndarray:
    """Per-row log density, summed over the last axis."""
    x, mean, lv = (np.asarray(a, float) for a in (x, mean, log_variance))
    return np.sum(-0.5 * (LOG_2PI + lv + (x - mean) ** 2 / np.exp(lv)), axis=-1)


# tape versions, per-row sums over the last axis

def _kl_node(mq, lvq, mp=None, lvp=None) -> DiffNode:
    if mp is None:
        inner = dm.exp(lvq) + dm.square(mq) - 1.0 - lvq
    else:
        inner = lvp - lvq + (dm.exp(lvq) + dm.square(mq - mp)) * dm.exp(dm.neg(lvp)) - 1.0
    return dm.sum(inner, axis=-1) * 0.5


def _gauss_node(x, mean, lv) -> DiffNode:
    inner = lv + dm.square(x - mean) * dm.exp(dm.neg(lv)) + LOG_2PI
    return dm.sum(inner, axis=-1) * -0.5


def _bern_node(logit, w):
    p = dm.clip(dm.sigmoid(logit), PROB_CLAMP, 1.0 - PROB_CLAMP)
    clamped = int(np.sum((p.value <= PROB_CLAMP) | (p.value >= 1.0 - PROB_CLAMP)))
    ll = w * dm.log(p) + (1.0 - w) * dm.log(1.0 - p)
    return dm.sum(ll, axis=-1), clamped


# ---------------------------------------------------------------- forward pass

@dataclass
class LossParts:
    total: DiffNode
    recon: float
    kl_s: float
    kl_z: float
    log_w: float
    log_y: float
    clamped: int = 0

    @property
    def elbo(self) -> float:
        return self.recon - self.kl_s - self.kl_z

    def as_dict(self) -> dict:
        return {"total": float(self.total.value), "recon": self.recon, "kl_s": self.kl_s,
                "kl_z": self.kl_z, "log_w": self.log_w, "log_y": self.log_y}


def _mlp(p, name, x, mask=None):
    h = dm.dense_tanh(x, p[f"{name}.W1"], p[f"{name}.b1"], mask)
    return dm.affine(h, p[f"{name}.W2"], p[f"{name}.b2"])


def _split(node, k):
    return dm.take(node, 0, k), dm.take(node, k, 2 * k)


def _lstm_step(p, x, h, c, m):
    hc = dm.lstm_cell(x, h, c, p["lstm.W"], p["lstm.b"])
    return dm.take(hc, 0, m), dm.take(hc, m, 2 * m)


class _Noise:
    """Reparameterisation draws and dropout masks for one minibatch."""

    def __init__(self, model: TdcivModel, b: int, rng=None, sample=True, dropout=True):
        cfg = model.config
        T = model.horizon
        self.eps_s = self.eps_z = None
        self.masks = None
        if sample:
            self.eps_s = rng.standard_normal((T, b, cfg.dim_s))
            self.eps_z = rng.standard_normal((T, b, model.dim_z))
        if dropout and cfg.keep_prob < 1.0:
            keep = cfg.keep_prob
            self.masks = (rng.random((T, 6, b, cfg.fc_hidden)) < keep) / keep


NETS = ("enc_s", "enc_z", "prior_z", "dec", "g1", "gy")


def forward(model: TdcivModel, p: dict, batch: dict, noise: _Noise, alpha=None, beta=None,
            record=None) -> LossParts:
    """Loss over one minibatch. ``p`` maps parameter names to tape nodes.

    When ``record`` is a dict, per-step posterior parameters, samples and
    hidden states are appended to it.
    """
    cfg = model.config
    alpha = cfg.alpha if alpha is None else alpha
    beta = cfg.beta if beta is None else beta
    tape = p["xi"].tape
    inp, w, y = batch["inp"], batch["w"], batch["y"]
    b, T, _ = inp.shape
    m, ds, dz = cfg.hidden, cfg.dim_s, model.dim_z

    h = p["xi"] * tape.const(np.ones((b, 1)))
    c = tape.const(np.zeros((b, m)))
    s_prev = tape.const(np.zeros((b, ds)))
    z_prev = tape.const(np.zeros((b, dz)))
    recon = kl_s = kl_z = log_w = log_y = None
    clamped = 0

    def mask(t, k):
        return None if noise.masks is None else noise.masks[t, k]

    for t in range(T):
        x_t = tape.const(inp[:, t])
        h, c = _lstm_step(p, x_t, h, c, m)

        ms, lvs = _split(_mlp(p, "enc_s", dm.concat([h, s_prev]), mask(t, 0)), ds)
        mz, lvz = _split(_mlp(p, "enc_z", dm.concat([h, z_prev]), mask(t, 1)), dz)
        mpz, lvpz = _split(_mlp(p, "prior_z", h, mask(t, 2)), dz)
        if noise.eps_s is not None:
            s = ms + dm.exp(lvs * 0.5) * noise.eps_s[t]
            z = mz + dm.exp(lvz * 0.5) * noise.eps_z[t]
        else:
            s, z = ms, mz

        dec_m, dec_lv = _split(_mlp(p, "dec", dm.concat([z, s]), mask(t, 3)), model.dim_in)
        r_t = _gauss_node(x_t, dec_m, dec_lv)
        ks_t = _kl_node(ms, lvs)
        kz_t = _kl_node(mz, lvz, mpz, lvpz)

        logit_w = _mlp(p, "g1", dm.concat([z, s, h]), mask(t, 4))
        lw_t, nclamp = _bern_node(logit_w, w[:, t:t + 1])
        clamped += nclamp

        out_y = _mlp(p, "gy", dm.concat([z, h]), mask(t, 5))
        if cfg.binary_outcome:
            ly_t, nclamp = _bern_node(out_y, y[:, t:t + 1])
            clamped += nclamp
        else:
            y_mean = dm.take(out_y, 0, 1)
            y_var = dm.softplus(dm.take(out_y, 1, 2)) + VAR_FLOOR
            ly_t = _gauss_node(y[:, t:t + 1], y_mean, dm.log(y_var))

        recon = r_t if recon is None else recon + r_t
        kl_s = ks_t if kl_s is None else kl_s + ks_t
        kl_z = kz_t if kl_z is None else kl_z + kz_t
        log_w = lw_t if log_w is None else log_w + lw_t
        log_y = ly_t if log_y is None else log_y + ly_t

        if record is not None:
            for key, node in (("S_mean", ms), ("S_lv", lvs), ("Z_mean", mz), ("Z_lv", lvz),
                              ("S", s), ("Z", z), ("H", h)):
                record.setdefault(key, []).append(node.value)
        s_prev, z_prev = s, z

    elbo = recon - kl_s - kl_z
    per_row = dm.neg(elbo)
    if alpha:
        per_row = per_row - log_w * alpha
    if beta:
        per_row = per_row - log_y * beta
    total = dm.mean(per_row)
    avg = lambda node: float(node.value.mean())  # noqa: E731
    return LossParts(total, avg(recon), avg(kl_s), avg(kl_z), avg(log_w), avg(log_y), clamped)


def leaves(tape: Tape, params: dict) -> dict:
    return {k: tape.leaf(v, name=k) for k, v in params.items()}


def total_loss(model: TdcivModel, batch: dict, noise: _Noise | None = None, params=None,
               alpha=None, beta=None) -> LossParts:
    """Evaluate the training objective on a prepared batch (no sampling by default)."""
    if batch["inp"].shape[0] == 0:
        raise ValueError("empty batch")
    tape = Tape()
    noise = noise or _Noise(model, batch["inp"].shape[0], sample=False, dropout=False)
    return forward(model, leaves(tape, params or model.params), batch, noise, alpha, beta)


# ---------------------------------------------------------------- training

def _take_rows(batch, idx):
    return {k: v[idx] for k, v in batch.items()}


def train(model: TdcivModel, X, W, Y, on_epoch=None) -> TrainResult:
    """Minibatch Adam on the full objective; deterministic given config.seed."""
    cfg = model.config
    data = prepare(model, X, W, Y)
    n = data["inp"].shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    # separate stream from the one used at initialisation
    rng = np.random.default_rng([cfg.seed, 1])
    state = OptimizerState(learning_rate=cfg.learning_rate)
    trace, clamps = [], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        acc = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            batch = _take_rows(data, idx)
            noise = _Noise(model, len(idx), rng)
            tape = Tape()
            p = leaves(tape, model.params)
            try:
                parts = forward(model, p, batch, noise)
            except dm.DomainError as err:
                raise NonFiniteLossError(epoch, bi, {"error": str(err)}) from err
            loss = float(parts.total.value)
            if not np.isfinite(loss):
                raise NonFiniteLossError(epoch, bi, parts.as_dict())
            backward(tape, parts.total)
            optimizer_step(model.params, {k: node.grad for k, node in p.items()}, state)
            acc += loss * len(idx)
            clamps += parts.clamped
        trace.append(acc / n)
        if on_epoch is not None:
            on_epoch(epoch, trace[-1])
    return TrainResult(model, trace, clamps)


def extract_representations(model: TdcivModel, X, W, Y, chunk: int = 2048,
                            sample_seed: int | None = None) -> LatentPath:
    """Posterior means of S_t and Z_t (fed forward as the previous latents) plus H_t.

    With ``sample_seed`` the chain is run on reparameterised draws instead
    and the draws are returned alongside the means.
    """
    data = prepare(model, X, W, Y)
    n = data["inp"].shape[0]
    rng = None if sample_seed is None else np.random.default_rng(sample_seed)
    rec_all: dict = {}
    for start in range(0, n, chunk):
        batch = _take_rows(data, slice(start, start + chunk))
        b = batch["inp"].shape[0]
        noise = _Noise(model, b, rng, sample=rng is not None, dropout=False)
        rec: dict = {}
        tape = Tape()
        forward(model, leaves(tape, model.params), batch, noise, record=rec)
        for k, v in rec.items():
            rec_all.setdefault(k, []).append(np.stack(v, axis=1))
    out = {k: np.concatenate(v, axis=0) for k, v in rec_all.items()}
    path = LatentPath(out["S_mean"], out["S_lv"], out["Z_mean"], out["Z_lv"], out["H"])
    if rng is not None:
        path.S_sample, path.Z_sample = out["S"], out["Z"]
    return path


# ---------------------------------------------------------------- checkpoints

def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in np.ravel(a)]}


def _unarr(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_json(model: TdcivModel, extra: dict | None = None) -> str:
    doc = {
        "format": "tdciv-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "dim_in": model.dim_in,
        "horizon": model.horizon,
        "normalisation": {k: _arr(getattr(model, k)) for k in ("in_mean", "in_std", "y_mean", "y_std")},
        "params": {k: _arr(model.params[k]) for k in sorted(model.params)},
    }
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, sort_keys=True)


def save_checkpoint(model: TdcivModel, path, extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(checkpoint_json(model, extra))


def load_checkpoint(path) -> TdcivModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "tdciv-checkpoint":
        raise ValueError(f"{path}: not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    cfg = ModelConfig.from_dict(doc["config"])
    norm = {k: _unarr(v) for k, v in doc["normalisation"].items()}
    params = {k: _unarr(v) for k, v in doc["params"].items()}
    model = TdcivModel(cfg, doc["dim_in"], doc["horizon"], params, **norm)
    expected = _layer_shapes(cfg, model.dim_in, model.dim_z)
    for k, shape in expected.items():
        if k not in params or params[k].shape != tuple(shape):
            raise ValueError(f"{path}: parameter {k!r} missing or mis-shaped")
    return model
