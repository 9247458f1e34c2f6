"""Transformer-encoder regressor with hand-rolled reverse-mode gradients.

The network follows the canonical encoder: input projection, sinusoidal
positional encoding, post-norm blocks of multi-head self-attention and a
ReLU feed-forward, mean pooling over time, and a linear regression head.
Everything runs in float64 numpy; gradients are exact reverse-mode
derivatives of the mean-squared-error loss, verified against central finite
differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, TrainingDivergedError

_LN_EPS = 1e-5
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    dropout: float = 0.0
    seq_len: int = 16
    n_features: int = 39
    n_outputs: int = 38
    use_pos_enc: bool = True
    pooling: str = "mean"                 # or "last"
    feature_groups: tuple[tuple[int, ...], ...] | None = None   # grouped input projections

    def validate(self) -> None:
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff,
               self.seq_len, self.n_features, self.n_outputs) <= 0:
            raise ConfigError("all encoder dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.pooling not in ("mean", "last"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.feature_groups is not None:
            cols = sorted(c for g in self.feature_groups for c in g)
            if cols != list(range(self.n_features)):
                raise ConfigError("feature_groups must partition the feature columns")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    patience: int = 0          # 0 disables early stopping

    def validate(self) -> None:
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate, batch_size and epochs must be non-negative/positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.clip_norm < 0 or self.patience < 0:
            raise ConfigError("clip_norm and patience must be non-negative")


def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sin at even columns, cos at odd, area-standard rates."""
    if seq_len < 1 or d_model < 1:
        raise ConfigError("seq_len and d_model must be positive")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    pairs = np.arange(0, d_model, 2, dtype=np.float64)
    rates = pos / np.power(10000.0, pairs / d_model)[None, :]
    pe = np.zeros((seq_len, d_model))
    pe[:, 0::2] = np.sin(rates)
    pe[:, 1::2] = np.cos(rates)[:, : d_model // 2]
    return pe


def group_columns_by_joint(names: list[str]) -> tuple[tuple[int, ...], ...]:
    """Partition feature columns by the joint index named in each column."""
    groups: dict[str, list[int]] = {}
    for idx, name in enumerate(names):
        key = name.split("J")[-1].rstrip("]") if "J" in name else "shared"
        groups.setdefault(key, []).append(idx)
    return tuple(tuple(groups[k]) for k in sorted(groups))


class EncoderModel:
    """Weights, gradient buffers, and forward/backward passes."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)

        def linear(name, fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            self.params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"{name}.b"] = np.zeros(fan_out)

        c = config
        if c.feature_groups is None:
            linear("embed", c.n_features, c.d_model)
        else:
            for g, cols in enumerate(c.feature_groups):
                linear(f"embed.g{g}", len(cols), c.d_model)
        for layer in range(c.n_layers):
            for proj in ("Wq", "Wk", "Wv", "Wo"):
                linear(f"layer{layer}.attn.{proj}", c.d_model, c.d_model)
            self.params[f"layer{layer}.ln1.gamma"] = np.ones(c.d_model)
            self.params[f"layer{layer}.ln1.beta"] = np.zeros(c.d_model)
            linear(f"layer{layer}.ff.W1", c.d_model, c.d_ff)
            linear(f"layer{layer}.ff.W2", c.d_ff, c.d_model)
            self.params[f"layer{layer}.ln2.gamma"] = np.ones(c.d_model)
            self.params[f"layer{layer}.ln2.beta"] = np.zeros(c.d_model)
        linear("head", c.d_model, c.n_outputs)
        self.pe = positional_encoding(c.seq_len, c.d_model)
        self.zero_grads()

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- forward ----------------------------------------------------------

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        c = self.config
        if X.ndim != 3 or X.shape[1] != c.seq_len or X.shape[2] != c.n_features:
            raise ContractError(f"expected features shaped (batch, {c.seq_len}, {c.n_features}), "
                                f"got {X.shape}")
        if not np.isfinite(X).all():
            raise ContractError("input features contain non-finite values")
        return X

    def forward(self, X, train: bool = False, rng: np.random.Generator | None = None):
        """Return (predictions (B, P), cache). Deterministic when dropout is off."""
        X = self._check_input(X)
        c = self.config
        p = self.params
        drop = c.dropout if train else 0.0
        if drop > 0 and rng is None:
            rng = np.random.default_rng(0)
        cache: dict = {"X": X, "drop": drop, "layers": [], "attn": []}

        if c.feature_groups is None:
            h = X @ p["embed.W"] + p["embed.b"]
        else:
            h = np.zeros((X.shape[0], c.seq_len, c.d_model))
            for g, cols in enumerate(c.feature_groups):
                h += X[:, :, cols] @ p[f"embed.g{g}.W"] + p[f"embed.g{g}.b"]
        if c.use_pos_enc:
            h = h + self.pe[None]
        h, m = _dropout(h, drop, rng)
        cache["embed_mask"] = m

        for layer in range(c.n_layers):
            lc: dict = {}
            a_out, attn_cache = self._attention(h, layer)
            a_out, lc["attn_mask"] = _dropout(a_out, drop, rng)
            res1 = h + a_out
            n1, lc["ln1"] = _layernorm_forward(res1, p[f"layer{layer}.ln1.gamma"],
                                               p[f"layer{layer}.ln1.beta"])
            z1 = n1 @ p[f"layer{layer}.ff.W1.W"] + p[f"layer{layer}.ff.W1.b"]
            relu = np.maximum(z1, 0.0)
            f_out = relu @ p[f"layer{layer}.ff.W2.W"] + p[f"layer{layer}.ff.W2.b"]
            f_out, lc["ff_mask"] = _dropout(f_out, drop, rng)
            res2 = n1 + f_out
            h, lc["ln2"] = _layernorm_forward(res2, p[f"layer{layer}.ln2.gamma"],
                                              p[f"layer{layer}.ln2.beta"])
            lc["n1"] = n1
            lc["z1"] = z1
            lc["relu"] = relu
            cache["layers"].append(lc)
            cache["attn"].append(attn_cache)

        if c.pooling == "mean":
            pooled = h.mean(axis=1)
        else:
            pooled = h[:, -1, :]
        cache["h_final"] = h
        pred = pooled @ p["head.W"] + p["head.b"]
        cache["pooled"] = pooled
        return pred, cache

    def _attention(self, h, layer):
        c = self.config
        p = self.params
        B, T, D = h.shape
        H = c.n_heads
        dh = D // H

        def split(x):
            return x.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q = split(h @ p[f"layer{layer}.attn.Wq.W"] + p[f"layer{layer}.attn.Wq.b"])
        k = split(h @ p[f"layer{layer}.attn.Wk.W"] + p[f"layer{layer}.attn.Wk.b"])
        v = split(h @ p[f"layer{layer}.attn.Wv.W"] + p[f"layer{layer}.attn.Wv.b"])
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
        scores -= scores.max(axis=-1, keepdims=True)
        expd = np.exp(scores)
        attn = expd / expd.sum(axis=-1, keepdims=True)
        ctx = attn @ v
        merged = ctx.transpose(0, 2, 1, 3).reshape(B, T, D)
        out = merged @ p[f"layer{layer}.attn.Wo.W"] + p[f"layer{layer}.attn.Wo.b"]
        return out, {"h": h, "q": q, "k": k, "v": v, "attn": attn, "merged": merged}

    # -- backward ---------------------------------------------------------

    def backward(self, cache, dpred) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(param) into self.grads given d(loss)/d(pred)."""
        c = self.config
        p = self.params
        g = self.grads
        B, T = cache["X"].shape[0], c.seq_len

        g["head.W"] += cache["pooled"].T @ dpred
        g["head.b"] += dpred.sum(axis=0)
        dpooled = dpred @ p["head.W"].T
        if c.pooling == "mean":
            dh = np.repeat(dpooled[:, None, :], T, axis=1) / T
        else:
            dh = np.zeros_like(cache["h_final"])
            dh[:, -1, :] = dpooled

        for layer in range(c.n_layers - 1, -1, -1):
            lc = cache["layers"][layer]
            dres2, dgamma, dbeta = _layernorm_backward(dh, lc["ln2"])
            g[f"layer{layer}.ln2.gamma"] += dgamma
            g[f"layer{layer}.ln2.beta"] += dbeta
            df_out = _dropout_backward(dres2, lc["ff_mask"], cache["drop"])
            flat_relu = lc["relu"].reshape(-1, c.d_ff)
            g[f"layer{layer}.ff.W2.W"] += flat_relu.T @ df_out.reshape(-1, c.d_model)
            g[f"layer{layer}.ff.W2.b"] += df_out.sum(axis=(0, 1))
            drelu = df_out @ p[f"layer{layer}.ff.W2.W"].T
            dz1 = drelu * (lc["z1"] > 0)
            g[f"layer{layer}.ff.W1.W"] += lc["n1"].reshape(-1, c.d_model).T @ dz1.reshape(-1, c.d_ff)
            g[f"layer{layer}.ff.W1.b"] += dz1.sum(axis=(0, 1))
            dn1 = dres2 + dz1 @ p[f"layer{layer}.ff.W1.W"].T

            dres1, dgamma, dbeta = _layernorm_backward(dn1, lc["ln1"])
            g[f"layer{layer}.ln1.gamma"] += dgamma
            g[f"layer{layer}.ln1.beta"] += dbeta
            da_out = _dropout_backward(dres1, lc["attn_mask"], cache["drop"])
            dh = dres1 + self._attention_backward(da_out, layer, cache["attn"][layer])

        dh = _dropout_backward(dh, cache["embed_mask"], cache["drop"])
        X = cache["X"]
        if c.feature_groups is None:
            g["embed.W"] += X.reshape(-1, c.n_features).T @ dh.reshape(-1, c.d_model)
            g["embed.b"] += dh.sum(axis=(0, 1))
        else:
            for gi, cols in enumerate(c.feature_groups):
                Xg = X[:, :, cols].reshape(-1, len(cols))
                g[f"embed.g{gi}.W"] += Xg.T @ dh.reshape(-1, c.d_model)
                g[f"embed.g{gi}.b"] += dh.sum(axis=(0, 1))
        return g

    def _attention_backward(self, dout, layer, ac):
        c = self.config
        p = self.params
        g = self.grads
        h = ac["h"]
        B, T, D = h.shape
        H = c.n_heads
        dh_head = D // H

        g[f"layer{layer}.attn.Wo.W"] += ac["merged"].reshape(-1, D).T @ dout.reshape(-1, D)
        g[f"layer{layer}.attn.Wo.b"] += dout.sum(axis=(0, 1))
        dmerged = (dout @ p[f"layer{layer}.attn.Wo.W"].T).reshape(B, T, H, dh_head).transpose(0, 2, 1, 3)

        dattn = dmerged @ ac["v"].transpose(0, 1, 3, 2)
        dv = ac["attn"].transpose(0, 1, 3, 2) @ dmerged
        dscores = ac["attn"] * (dattn - (dattn * ac["attn"]).sum(axis=-1, keepdims=True))
        dscores /= math.sqrt(dh_head)
        dq = dscores @ ac["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ ac["q"]

        dh = np.zeros_like(h)
        flat_h = h.reshape(-1, D)
        for name, dx in (("Wq", dq), ("Wk", dk), ("Wv", dv)):
            dflat = dx.transpose(0, 2, 1, 3).reshape(-1, D)
            g[f"layer{layer}.attn.{name}.W"] += flat_h.T @ dflat
            g[f"layer{layer}.attn.{name}.b"] += dflat.sum(axis=0)
            dh += (dflat @ p[f"layer{layer}.attn.{name}.W"].T).reshape(B, T, D)
        return dh

    # -- convenience ------------------------------------------------------

    def predict(self, X, batch_size: int = 256) -> np.ndarray:
        X = self._check_input(X)
        out = [self.forward(X[i:i + batch_size])[0] for i in range(0, X.shape[0], batch_size)]
        return np.concatenate(out, axis=0)

    def loss(self, X, Y) -> float:
        pred, _ = self.forward(X)
        return float(np.mean((pred - np.asarray(Y, dtype=np.float64)) ** 2))

    def loss_and_grads(self, X, Y, train: bool = False, rng=None) -> float:
        Y = np.asarray(Y, dtype=np.float64)
        pred, cache = self.forward(X, train=train, rng=rng)
        if Y.shape != pred.shape:
            raise ContractError(f"target shape {Y.shape} does not match predictions {pred.shape}")
        diff = pred - Y
        self.zero_grads()
        self.backward(cache, 2.0 * diff / diff.size)
        return float(np.mean(diff ** 2))

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            self.params[k][...] = v


def _dropout(x, rate, rng):
    if rate <= 0.0:
        return x, None
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def _dropout_backward(dx, mask, rate):
    if mask is None:
        return dx
    return dx * mask / (1.0 - rate)


def _layernorm_forward(x, gamma, beta):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def _layernorm_backward(dy, cache):
    xhat, inv_std, gamma = cache
    dgamma = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbeta = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# Metrics

@dataclass
class Metrics:
    target_names: list[str]
    r2: np.ndarray       # per target; nan where the split variance is zero
    rmse: np.ndarray     # per target, normalized units

    @property
    def r2_mean(self) -> float:
        valid = ~np.isnan(self.r2)
        return float(self.r2[valid].mean()) if valid.any() else float("nan")

    @property
    def rmse_mean(self) -> float:
        return float(self.rmse.mean()) if self.rmse.size else float("nan")

    def by_name(self, name: str) -> tuple[float, float]:
        idx = self.target_names.index(name)
        return float(self.r2[idx]), float(self.rmse[idx])

    def group_mean_r2(self, prefix: str) -> float:
        vals = [r for n, r in zip(self.target_names, self.r2)
                if n.startswith(prefix) and not np.isnan(r)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {"target_names": self.target_names, "r2": self.r2.tolist(),
                "rmse": self.rmse.tolist(), "r2_mean": self.r2_mean, "rmse_mean": self.rmse_mean}

    @staticmethod
    def from_dict(d: dict) -> "Metrics":
        return Metrics(target_names=list(d["target_names"]),
                       r2=np.asarray(d["r2"], dtype=np.float64),
                       rmse=np.asarray(d["rmse"], dtype=np.float64))


def r2_rmse(targets: np.ndarray, predictions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column R^2 = 1 - SS_res / SS_tot and RMSE; R^2 is nan for constant columns."""
    targets = np.asarray(targets, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if targets.shape != predictions.shape or targets.ndim != 2:
        raise ContractError("targets and predictions must share a 2-D shape")
    ss_res = ((targets - predictions) ** 2).sum(axis=0)
    ss_tot = ((targets - targets.mean(axis=0)) ** 2).sum(axis=0)
    # variance at rounding-noise scale means the column is constant in this split
    floor = targets.shape[0] * 1e-18
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(ss_tot > floor, 1.0 - ss_res / ss_tot, np.nan)
    rmse = np.sqrt(ss_res / targets.shape[0])
    return r2, rmse


def evaluate(model: EncoderModel, X, Y, target_names: list[str]) -> Metrics:
    if np.asarray(X).shape[0] == 0:
        raise ContractError("cannot evaluate an empty split")
    predictions = model.predict(X)
    r2, rmse = r2_rmse(np.asarray(Y, dtype=np.float64), predictions)
    return Metrics(target_names=list(target_names), r2=r2, rmse=rmse)


# --------------------------------------------------------------------------
# Training

class AdamOptimizer:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        if cfg.clip_norm > 0:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > cfg.clip_norm:
                scale = cfg.clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
            params[k] -= cfg.learning_rate * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + cfg.adam_eps)


def train(dataset, enc_cfg: EncoderConfig, train_cfg: TrainConfig,
          log_every: int = 0) -> tuple[EncoderModel, list[dict]]:
    """Mini-batch Adam with clipping, per-epoch validation, and best-weight restore.

    ``dataset`` is a :class:`dynid.dataset.Dataset`; validation R^2 (mean over
    valid targets) drives early stopping when patience > 0.
    """
    enc_cfg.validate()
    train_cfg.validate()
    X, Y = dataset.train_X, dataset.train_y
    if X.shape[0] == 0 or dataset.val_X.shape[0] == 0:
        raise ConfigError("train and validation splits must both be non-empty")
    if enc_cfg.seq_len != X.shape[1] or enc_cfg.n_features != X.shape[2] or enc_cfg.n_outputs != Y.shape[1]:
        raise ConfigError(f"encoder config ({enc_cfg.seq_len}, {enc_cfg.n_features}, "
                          f"{enc_cfg.n_outputs}) does not match dataset shapes "
                          f"{X.shape} / {Y.shape}")
    rng = np.random.default_rng(train_cfg.seed)
    model = EncoderModel(enc_cfg, seed=train_cfg.seed)
    optimizer = AdamOptimizer(model.params, train_cfg)
    history: list[dict] = []
    best_r2 = -np.inf
    best_params = None
    stale = 0

    for epoch in range(train_cfg.epochs):
        order = rng.permutation(X.shape[0])
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            loss = model.loss_and_grads(X[batch], Y[batch], train=enc_cfg.dropout > 0, rng=rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError("training loss is non-finite", epoch)
            optimizer.step(model.params, model.grads)
            losses.append(loss)
        val_metrics = evaluate(model, dataset.val_X, dataset.val_y, dataset.target_names)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                 "val_r2_mean": val_metrics.r2_mean, "val_rmse_mean": val_metrics.rmse_mean}
        history.append(entry)
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch:4d}  loss {entry['train_loss']:.6f}  "
                  f"val R2 {entry['val_r2_mean']:.4f}")
        if train_cfg.patience:
            # early stopping on a validation-R2 plateau, restoring the best weights
            if val_metrics.r2_mean > best_r2 + 1e-9:
                best_r2 = val_metrics.r2_mean
                best_params = model.copy_params()
                stale = 0
            else:
                stale += 1
                if stale >= train_cfg.patience:
                    break
    if best_params is not None:
        model.load_params(best_params)
    return model, history


# --------------------------------------------------------------------------
# Checkpoints: versioned JSON header + raw tensors with a layout manifest

def save_model(path, model: EncoderModel) -> None:
    header = {"version": CHECKPOINT_VERSION, "config": asdict(model.config),
              "layout": {k: list(v.shape) for k, v in model.params.items()}}
    arrays = {f"param::{k}": v for k, v in model.params.items()}
    np.savez(path, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_model(path) -> EncoderModel:
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]))
        if header["version"] != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {header['version']}")
        cfg_dict = header["config"]
        if cfg_dict.get("feature_groups") is not None:
            cfg_dict["feature_groups"] = tuple(tuple(g) for g in cfg_dict["feature_groups"])
        config = EncoderConfig(**cfg_dict)
        model = EncoderModel(config, seed=0)
        for key, shape in header["layout"].items():
            arr = data[f"param::{key}"]
            if list(arr.shape) != shape:
                raise ContractError(f"checkpoint tensor {key} has shape {arr.shape}, expected {shape}")
            model.params[key][...] = arr
    return model
