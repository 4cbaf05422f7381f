"""Dual-head policy/value MLP in plain numpy.

The trunk is a stack of bias-free linear layers, each followed by 1D batch
normalization and ELU.  The policy head produces one logit per action; illegal
actions get ``-inf`` before the softmax so their probability is exactly zero.
The value head is squashed with ``tanh`` into ``(-1, 1)``.

Training objective per sample (averaged over the batch)::

    J' = -sum_a pi(a) log p(a)  +  (v - z)^2  -  beta * H(p)

Gradients are computed analytically; ``tests/test_policynet.py`` checks them
against central finite differences.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .board import ACTION_DIM, FEATURE_DIM

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "pnmcts-net/1"


class NoLegalAction(ValueError):
    """Raised when the action mask admits no action at all."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = FEATURE_DIM
    hidden_layers: int = 10
    hidden_width: int = 512
    action_dim: int = ACTION_DIM
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if min(self.input_dim, self.hidden_layers, self.hidden_width, self.action_dim) <= 0:
            raise ValueError("all network dimensions must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epsilon: float = 0.1  # gradient norm is clipped to 1 + epsilon
    beta: float = 0.01  # entropy weight
    batch_size: int = 64
    accumulation_steps: int = 4
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


@dataclass
class NetParams:
    config: NetConfig
    weights: dict[str, np.ndarray]
    stats: dict[str, np.ndarray]
    version: int = 0
    _folded: list | None = field(default=None, repr=False, compare=False)

    @property
    def dtype(self):
        return self.weights["Wp"].dtype

    def astype(self, dtype) -> "NetParams":
        return NetParams(
            self.config,
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: v.astype(dtype) for k, v in self.stats.items()},
            self.version,
        )

    def copy(self) -> "NetParams":
        return self.astype(self.dtype)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())

    def folded(self):
        """Inference-mode trunk with batch norm folded into each linear layer."""
        if self._folded is None:
            cfg = self.config
            layers = []
            for k in range(cfg.hidden_layers):
                scale = self.weights[f"g{k}"] / np.sqrt(self.stats[f"var{k}"] + cfg.bn_eps)
                W = self.weights[f"W{k}"] * scale[None, :]
                b = self.weights[f"b{k}"] - self.stats[f"mean{k}"] * scale
                layers.append((W, b))
            self._folded = layers
        return self._folded


def init_params(config: NetConfig = NetConfig(), seed: int | None = 0, dtype=np.float32) -> NetParams:
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    s: dict[str, np.ndarray] = {}
    fan_in = config.input_dim
    for k in range(config.hidden_layers):
        w[f"W{k}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, config.hidden_width))
        w[f"g{k}"] = np.ones(config.hidden_width)
        w[f"b{k}"] = np.zeros(config.hidden_width)
        s[f"mean{k}"] = np.zeros(config.hidden_width)
        s[f"var{k}"] = np.ones(config.hidden_width)
        fan_in = config.hidden_width
    # small heads: an untrained net starts close to uniform priors and zero value
    w["Wp"] = rng.normal(0.0, 0.01 / np.sqrt(fan_in), (fan_in, config.action_dim))
    w["bp"] = np.zeros(config.action_dim)
    w["Wv"] = rng.normal(0.0, 0.01 / np.sqrt(fan_in), (fan_in, 1))
    w["bv"] = np.zeros(1)
    return NetParams(config, {k: v.astype(dtype) for k, v in w.items()}, {k: v.astype(dtype) for k, v in s.items()})


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def _masked_log_softmax(logits, mask):
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def predict_batch(params: NetParams, features: np.ndarray, masks: np.ndarray):
    """Inference-mode forward on a batch.  Rows whose mask is all false get a zero policy."""
    x = np.asarray(features, dtype=params.dtype)
    masks = np.asarray(masks, dtype=bool)
    h = x
    for W, b in params.folded():
        h = _elu(h @ W + b)
    logits = h @ params.weights["Wp"] + params.weights["bp"]
    any_legal = masks.any(axis=-1, keepdims=True)
    safe_mask = np.where(any_legal, masks, True)
    with np.errstate(invalid="ignore"):
        policy = np.where(masks, np.exp(_masked_log_softmax(logits, safe_mask)), 0.0)
    value = np.tanh(h @ params.weights["Wv"] + params.weights["bv"])[..., 0]
    return policy, value


def forward(params: NetParams, features: np.ndarray, mask: np.ndarray):
    """Policy over all actions (zero where masked) and a scalar value in ``(-1, 1)``."""
    features = np.asarray(features)
    mask = np.asarray(mask, dtype=bool).ravel()
    if features.shape[-1] != params.config.input_dim:
        raise ValueError(f"expected {params.config.input_dim} features, got {features.shape[-1]}")
    if mask.size != params.config.action_dim:
        raise ValueError(f"expected mask of size {params.config.action_dim}, got {mask.size}")
    if not mask.any():
        raise NoLegalAction("no legal action on this state")
    policy, value = predict_batch(params, features[None, :], mask[None, :])
    return policy[0], float(value[0])


def _train_forward(params: NetParams, x: np.ndarray, masks: np.ndarray):
    cfg = params.config
    w = params.weights
    cache = []
    h = x
    for k in range(cfg.hidden_layers):
        z = h @ w[f"W{k}"]
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
        zhat = (z - mu) * inv_std
        y = w[f"g{k}"] * zhat + w[f"b{k}"]
        h_next = _elu(y)
        cache.append((h, zhat, inv_std, y, h_next, mu, var))
        h = h_next
    logits = h @ w["Wp"] + w["bp"]
    logp = _masked_log_softmax(logits, masks)
    u = h @ w["Wv"] + w["bv"]
    v = np.tanh(u)[:, 0]
    return cache, h, logp, v


def loss(params: NetParams, batch, cfg: TrainConfig = TrainConfig(), return_stats: bool = False):
    """Batch objective and its gradient for every trainable array.

    ``batch`` is ``(features, masks, target_policies, target_values)`` with
    leading batch dimension.  Trunk batch norm runs in training mode.
    """
    x, masks, pi, z = batch
    dtype = params.dtype
    x = np.asarray(x, dtype=dtype)
    masks = np.asarray(masks, dtype=bool)
    pi = np.asarray(pi, dtype=dtype)
    z = np.asarray(z, dtype=dtype)
    B = x.shape[0]
    w = params.weights
    ncfg = params.config

    cache, h, logp, v = _train_forward(params, x, masks)
    p = np.where(masks, np.exp(logp), 0.0)
    safe_logp = np.where(masks, logp, 0.0)
    ce = -(pi * safe_logp).sum(axis=1)
    entropy = -(p * safe_logp).sum(axis=1)
    mse = (v - z) ** 2
    total = float(np.mean(ce + mse - cfg.beta * entropy))

    grads: dict[str, np.ndarray] = {}
    pi_mass = pi.sum(axis=1, keepdims=True)
    dlogits = p * pi_mass - pi + cfg.beta * p * (safe_logp + entropy[:, None])
    dlogits = np.where(masks, dlogits, 0.0) / B
    du = (2.0 * (v - z) * (1.0 - v**2) / B)[:, None]
    grads["Wp"] = h.T @ dlogits
    grads["bp"] = dlogits.sum(axis=0)
    grads["Wv"] = h.T @ du
    grads["bv"] = du.sum(axis=0)
    dh = dlogits @ w["Wp"].T + du @ w["Wv"].T

    for k in reversed(range(ncfg.hidden_layers)):
        h_prev, zhat, inv_std, y, h_out, _, _ = cache[k]
        dy = dh * np.where(y > 0, 1.0, h_out + 1.0)
        grads[f"g{k}"] = (dy * zhat).sum(axis=0)
        grads[f"b{k}"] = dy.sum(axis=0)
        dzhat = dy * w[f"g{k}"]
        dz = (inv_std / B) * (B * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0))
        grads[f"W{k}"] = h_prev.T @ dz
        dh = dz @ w[f"W{k}"].T

    grads = {k: g.astype(dtype, copy=False) for k, g in grads.items()}
    if return_stats:
        stats = {}
        for k, (_, _, _, _, _, mu, var) in enumerate(cache):
            stats[f"mean{k}"] = mu
            stats[f"var{k}"] = var
        return total, grads, stats
    return total, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def average_gradients(grad_batches) -> dict[str, np.ndarray] | None:
    kept = []
    for i, g in enumerate(grad_batches):
        if all(np.all(np.isfinite(a)) for a in g.values()):
            kept.append(g)
        else:
            logger.warning("discarding gradient batch %d: non-finite values", i)
    if not kept:
        return None
    return {k: sum(g[k] for g in kept) / len(kept) for k in kept[0]}


def accumulate_and_step(params: NetParams, grad_batches, cfg: TrainConfig, state: AdamState,
                        batch_stats=None) -> NetParams:
    """Average gradient batches, clip the global norm to ``1 + epsilon`` and take one Adam step.

    ``state`` is updated in place.  ``batch_stats`` (per-batch normalization
    statistics returned by :func:`loss`) refresh the running statistics.
    """
    grad_batches = list(grad_batches)
    if not grad_batches:
        raise ValueError("need at least one gradient batch")
    grads = average_gradients(grad_batches)
    if grads is None:
        return params
    grads = clip_by_global_norm(grads, 1.0 + cfg.epsilon)

    state.t += 1
    b1, b2 = cfg.adam_b1, cfg.adam_b2
    new_w = {}
    for k, wk in params.weights.items():
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        m = b1 * (m if m is not None else 0.0) + (1 - b1) * g
        v = b2 * (v if v is not None else 0.0) + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        mhat = m / (1 - b1**state.t)
        vhat = v / (1 - b2**state.t)
        new_w[k] = (wk - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(wk.dtype)

    new_stats = dict(params.stats)
    if batch_stats:
        mom = params.config.bn_momentum
        for k in new_stats:
            avg = np.mean([s[k] for s in batch_stats], axis=0)
            new_stats[k] = ((1 - mom) * params.stats[k] + mom * avg).astype(params.stats[k].dtype)
    return NetParams(params.config, new_w, new_stats, params.version + 1)


def save_checkpoint(params: NetParams, path: str | Path, extra: dict | None = None) -> None:
    header = {
        "version_tag": CHECKPOINT_VERSION,
        "config": params.config.__dict__,
        "param_version": params.version,
        "dtype": str(params.dtype),
        "extra": extra or {},
    }
    arrays = {f"w::{k}": v for k, v in params.weights.items()}
    arrays.update({f"s::{k}": v for k, v in params.stats.items()})
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path, expect: NetConfig | None = None) -> NetParams:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    with data:
        header = json.loads(str(data["__header__"]))
        if header.get("version_tag") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version_tag')!r}")
        config = NetConfig(**header["config"])
        if expect is not None and (config.input_dim, config.action_dim) != (expect.input_dim, expect.action_dim):
            raise CheckpointError(
                f"{path}: checkpoint dims {(config.input_dim, config.action_dim)} do not match "
                f"{(expect.input_dim, expect.action_dim)}"
            )
        weights = {k[3:]: data[k] for k in data.files if k.startswith("w::")}
        stats = {k[3:]: data[k] for k in data.files if k.startswith("s::")}
    return NetParams(config, weights, stats, header["param_version"])


def checkpoint_header(path: str | Path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return json.loads(str(data["__header__"]))
