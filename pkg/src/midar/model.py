"""GRU-enhanced APPNP detection-outcome model.

Pipeline per frame: RM-LoS graph -> normalized node features -> two-layer
MLP encoder -> K personalized-PageRank power iterations -> GRU gate
blending propagated and original embeddings -> linear decoder -> softmax
over {TP, FN}. Training uses exact reverse-mode gradients (finite-
difference audited) and AdamW with decoupled weight decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, NumericError
from .rmlos import (DEFAULT_HALF_EXTENT, NUM_FEATURES, FeatureStats,
                    SceneFrame, build_rmlos, fit_feature_stats,
                    normalize_features, propagation_matrix)

SCHEMA_VERSION = 1

# Matrix-valued parameters receive weight decay; bias vectors do not.
DECAYED_TENSORS = ("w1", "w2", "w_r", "u_r", "w_a", "u_a", "w_h", "u_h", "w_d")
BIAS_TENSORS = ("b1", "b2", "b_r", "b_a", "b_h", "b_d")
TENSOR_NAMES = DECAYED_TENSORS + BIAS_TENSORS


@dataclass
class ModelParams:
    """All learnable tensors plus hyperparameters and feature statistics."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_a: np.ndarray
    u_a: np.ndarray
    b_a: np.ndarray
    w_h: np.ndarray
    u_h: np.ndarray
    b_h: np.ndarray
    w_d: np.ndarray
    b_d: np.ndarray
    iterations: int = 6
    alpha: float = 0.1
    hidden_dim: int = 128
    dropout_rate: float = 0.3
    stats: FeatureStats = field(default_factory=FeatureStats.identity)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        d = self.hidden_dim
        expected = {
            "w1": (NUM_FEATURES, d), "b1": (d,), "w2": (d, d), "b2": (d,),
            "w_r": (d, d), "u_r": (d, d), "b_r": (d,),
            "w_a": (d, d), "u_a": (d, d), "b_a": (d,),
            "w_h": (d, d), "u_h": (d, d), "b_h": (d,),
            "w_d": (d, 2), "b_d": (2,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(
                    f"tensor {name}: expected shape {shape}, got {arr.shape}")
            setattr(self, name, arr)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 70
    batch_size: int = 32
    seed: int = 0
    classification_threshold: float = 0.4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0.0 < self.classification_threshold < 1.0):
            raise ValueError("classification_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class NodePrediction:
    vehicle_id: str
    p_fn: float
    label: int  # 0 = TP, 1 = FN


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(stats: FeatureStats | None = None, *, hidden_dim: int = 128,
                iterations: int = 6, alpha: float = 0.1,
                dropout_rate: float = 0.3, seed: int = 0) -> ModelParams:
    """Seeded Glorot-uniform initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    d = hidden_dim
    return ModelParams(
        w1=_glorot(rng, NUM_FEATURES, d), b1=np.zeros(d),
        w2=_glorot(rng, d, d), b2=np.zeros(d),
        w_r=_glorot(rng, d, d), u_r=_glorot(rng, d, d), b_r=np.zeros(d),
        w_a=_glorot(rng, d, d), u_a=_glorot(rng, d, d), b_a=np.zeros(d),
        w_h=_glorot(rng, d, d), u_h=_glorot(rng, d, d), b_h=np.zeros(d),
        w_d=_glorot(rng, d, 2), b_d=np.zeros(2),
        iterations=iterations, alpha=alpha, hidden_dim=d,
        dropout_rate=dropout_rate,
        stats=stats if stats is not None else FeatureStats.identity(),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Overflowing exp(-x) saturates to inf and the quotient to 0, which is
    # the right limit; suppress the spurious warning.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def _dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    # Inverted dropout: surviving activations are rescaled so the expected
    # value is unchanged.
    return (rng.random(shape) >= rate) / (1.0 - rate)


def mlp_encode(x_norm: np.ndarray, params: ModelParams, *,
               training: bool = False,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Two-layer MLP producing node embeddings (n x d)."""
    x_norm = np.asarray(x_norm, dtype=np.float64)
    if x_norm.ndim != 2 or x_norm.shape[1] != NUM_FEATURES:
        raise ValueError(f"expected (n, {NUM_FEATURES}) features, "
                         f"got {x_norm.shape}")
    hidden = np.maximum(x_norm @ params.w1 + params.b1, 0.0)
    if training and params.dropout_rate > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        hidden = hidden * _dropout_mask(rng, hidden.shape, params.dropout_rate)
    return hidden @ params.w2 + params.b2


def appnp_propagate(embeddings: np.ndarray, prop: np.ndarray, iterations: int,
                    alpha: float) -> np.ndarray:
    """K power iterations z <- (1-alpha) * prop @ z + alpha * embeddings."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    z = embeddings
    for _ in range(iterations):
        z = (1.0 - alpha) * (prop @ z) + alpha * embeddings
    return z


def ppnp_exact(embeddings: np.ndarray, prop: np.ndarray,
               alpha: float) -> np.ndarray:
    """Closed-form fixed point alpha * (I - (1-alpha) prop)^-1 @ embeddings.

    Serves as the convergence oracle for :func:`appnp_propagate`.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    n = prop.shape[0]
    system = np.eye(n) - (1.0 - alpha) * prop
    try:
        return alpha * np.linalg.solve(system, embeddings)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular propagation system: {exc}") from exc


def gru_blend(propagated: np.ndarray, embeddings: np.ndarray,
              params: ModelParams) -> np.ndarray:
    """Per-node, per-feature gated blend of propagated and original
    embeddings (reset gate, update gate, candidate state)."""
    reset = _sigmoid(propagated @ params.w_r + embeddings @ params.u_r
                     + params.b_r)
    update = _sigmoid(propagated @ params.w_a + embeddings @ params.u_a
                      + params.b_a)
    candidate = np.tanh(propagated @ params.w_h
                        + (reset * embeddings) @ params.u_h + params.b_h)
    return (1.0 - update) * embeddings + update * candidate


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood; probabilities clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, 1e-12)).mean())


# -- forward/backward core ---------------------------------------------------


def _forward_cache(x_norm: np.ndarray, prop: np.ndarray, params: ModelParams,
                   masks: tuple[np.ndarray, np.ndarray] | None) -> dict:
    pre1 = x_norm @ params.w1 + params.b1
    act1 = np.maximum(pre1, 0.0)
    act1d = act1 * masks[0] if masks is not None else act1
    emb_raw = act1d @ params.w2 + params.b2
    emb = emb_raw * masks[1] if masks is not None else emb_raw

    z = emb
    for _ in range(params.iterations):
        z = (1.0 - params.alpha) * (prop @ z) + params.alpha * emb

    reset = _sigmoid(z @ params.w_r + emb @ params.u_r + params.b_r)
    update = _sigmoid(z @ params.w_a + emb @ params.u_a + params.b_a)
    gated = reset * emb
    candidate = np.tanh(z @ params.w_h + gated @ params.u_h + params.b_h)
    blended = (1.0 - update) * emb + update * candidate
    logits = blended @ params.w_d + params.b_d
    probs = _softmax_rows(logits)
    return {
        "x": x_norm, "prop": prop, "pre1": pre1, "act1d": act1d, "emb": emb,
        "z": z, "reset": reset, "update": update, "gated": gated,
        "candidate": candidate, "blended": blended, "probs": probs,
        "masks": masks,
    }


def _backward(cache: dict, d_logits: np.ndarray,
              params: ModelParams) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    z, emb = cache["z"], cache["emb"]
    reset, update = cache["reset"], cache["update"]
    candidate, gated = cache["candidate"], cache["gated"]

    grads["w_d"] = cache["blended"].T @ d_logits
    grads["b_d"] = d_logits.sum(axis=0)
    d_blend = d_logits @ params.w_d.T

    d_update = d_blend * (candidate - emb)
    d_cand = d_blend * update
    d_emb = d_blend * (1.0 - update)

    d_hpre = d_cand * (1.0 - candidate ** 2)
    grads["w_h"] = z.T @ d_hpre
    grads["u_h"] = gated.T @ d_hpre
    grads["b_h"] = d_hpre.sum(axis=0)
    d_z = d_hpre @ params.w_h.T
    d_gated = d_hpre @ params.u_h.T
    d_reset = d_gated * emb
    d_emb = d_emb + d_gated * reset

    d_apre = d_update * update * (1.0 - update)
    grads["w_a"] = z.T @ d_apre
    grads["u_a"] = emb.T @ d_apre
    grads["b_a"] = d_apre.sum(axis=0)
    d_z = d_z + d_apre @ params.w_a.T
    d_emb = d_emb + d_apre @ params.u_a.T

    d_rpre = d_reset * reset * (1.0 - reset)
    grads["w_r"] = z.T @ d_rpre
    grads["u_r"] = emb.T @ d_rpre
    grads["b_r"] = d_rpre.sum(axis=0)
    d_z = d_z + d_rpre @ params.w_r.T
    d_emb = d_emb + d_rpre @ params.u_r.T

    # Unroll the K propagation steps: each contributes alpha * d_z to the
    # teleport term and routes the rest through prop^T.
    prop_t = cache["prop"].T
    for _ in range(params.iterations):
        d_emb = d_emb + params.alpha * d_z
        d_z = (1.0 - params.alpha) * (prop_t @ d_z)
    d_emb = d_emb + d_z

    masks = cache["masks"]
    if masks is not None:
        d_emb = d_emb * masks[1]
    grads["w2"] = cache["act1d"].T @ d_emb
    grads["b2"] = d_emb.sum(axis=0)
    d_act1 = d_emb @ params.w2.T
    if masks is not None:
        d_act1 = d_act1 * masks[0]
    d_pre1 = d_act1 * (cache["pre1"] > 0.0)
    grads["w1"] = cache["x"].T @ d_pre1
    grads["b1"] = d_pre1.sum(axis=0)
    return grads


@dataclass
class _PreparedFrame:
    """Graph-derived tensors cached once per frame before training."""

    x_norm: np.ndarray
    prop: np.ndarray
    labels: np.ndarray       # per non-ego node, -1 where unlabeled
    node_rows: np.ndarray    # row indices of labeled nodes

    @property
    def n_labeled(self) -> int:
        return len(self.node_rows)


def _prepare(frame: SceneFrame, labels: Mapping[str, int] | None,
             stats: FeatureStats, half_extent: float) -> _PreparedFrame:
    graph = build_rmlos(frame, half_extent)
    x_norm = normalize_features(graph.features, stats)
    prop = propagation_matrix(graph)
    lab = np.full(graph.n_nodes, -1, dtype=np.int64)
    if labels:
        for i, vid in enumerate(graph.node_ids[1:], start=1):
            if vid in labels:
                lab[i] = int(labels[vid])
    return _PreparedFrame(x_norm=x_norm, prop=prop, labels=lab,
                          node_rows=np.flatnonzero(lab >= 0))


def _frame_loss_grads(prep: _PreparedFrame, params: ModelParams,
                      masks) -> tuple[float, dict[str, np.ndarray]]:
    cache = _forward_cache(prep.x_norm, prep.prop, params, masks)
    rows = prep.node_rows
    probs = cache["probs"][rows]
    labels = prep.labels[rows]
    loss = cross_entropy_loss(probs, labels)
    d_logits = np.zeros_like(cache["probs"])
    d_logits[rows] = probs
    d_logits[rows, labels] -= 1.0
    d_logits[rows] /= len(rows)
    return loss, _backward(cache, d_logits, params)


def forward(frame: SceneFrame, params: ModelParams, *,
            half_extent: float = DEFAULT_HALF_EXTENT,
            threshold: float = 0.4) -> list[NodePrediction]:
    """Inference over one frame: FN probability per in-range vehicle.

    Pure function of (frame, params); the ego node is excluded from the
    output. An empty frame yields an empty list.
    """
    graph = build_rmlos(frame, half_extent)
    if graph.n_nodes == 1:
        return []
    x_norm = normalize_features(graph.features, params.stats)
    emb = mlp_encode(x_norm, params)
    z = appnp_propagate(emb, propagation_matrix(graph), params.iterations,
                        params.alpha)
    blended = gru_blend(z, emb, params)
    probs = _softmax_rows(blended @ params.w_d + params.b_d)
    return [
        NodePrediction(vehicle_id=vid, p_fn=float(probs[i, 1]),
                       label=int(probs[i, 1] >= threshold))
        for i, vid in enumerate(graph.node_ids) if i > 0
    ]


def param_gradients(batch: Sequence[tuple[SceneFrame, Mapping[str, int]]],
                    params: ModelParams, *,
                    half_extent: float = DEFAULT_HALF_EXTENT,
                    training: bool = False,
                    mask_seed: int = 0) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over a frame batch and its exact gradients.

    The loss is the mean over frames of the per-frame mean node loss;
    frames without any labeled in-range node are skipped. With
    ``training=True`` dropout masks are drawn from ``mask_seed`` so
    repeated calls are bit-identical.
    """
    preps = [_prepare(f, lab, params.stats, half_extent) for f, lab in batch]
    preps = [p for p in preps if p.n_labeled > 0]
    if not preps:
        raise DataError("no labeled in-range vehicles in batch")
    rng = np.random.default_rng(mask_seed) if training else None
    total = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}
    loss_sum = 0.0
    for prep in preps:
        masks = None
        if training and params.dropout_rate > 0.0:
            shape = (prep.x_norm.shape[0], params.hidden_dim)
            masks = (_dropout_mask(rng, shape, params.dropout_rate),
                     _dropout_mask(rng, shape, params.dropout_rate))
        loss, grads = _frame_loss_grads(prep, params, masks)
        loss_sum += loss
        for name, g in grads.items():
            total[name] += g
    scale = 1.0 / len(preps)
    for name in total:
        total[name] *= scale
    return loss_sum * scale, total


# -- optimizer and training loop ---------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def init_adamw_state(params: ModelParams) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {name: (np.zeros_like(arr), np.zeros_like(arr))
            for name, arr in params.tensors().items()}


def adamw_step(params: ModelParams, grads: Mapping[str, np.ndarray],
               state: dict, lr: float, weight_decay: float,
               step_index: int) -> ModelParams:
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    ``step_index`` starts at 1. Bias vectors are exempt from weight decay.
    Parameters and optimizer state are updated in place.
    """
    bc1 = 1.0 - ADAM_BETA1 ** step_index
    bc2 = 1.0 - ADAM_BETA2 ** step_index
    for name, arr in params.tensors().items():
        g = grads[name]
        m, v = state[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if weight_decay > 0.0 and name in DECAYED_TENSORS:
            arr -= lr * weight_decay * arr
    return params


def train(dataset: Sequence[tuple[SceneFrame, Mapping[str, int]]],
          config: TrainConfig, *, hidden_dim: int = 128, iterations: int = 6,
          alpha: float = 0.1, dropout_rate: float = 0.3,
          half_extent: float = DEFAULT_HALF_EXTENT,
          ) -> tuple[ModelParams, list[float]]:
    """Train on labeled frames; returns final parameters and the per-epoch
    training-loss history. Fully reproducible given ``config.seed``."""
    if not dataset:
        raise DataError("empty training dataset")

    raw = [(f, build_rmlos(f, half_extent), lab) for f, lab in dataset]
    stats = fit_feature_stats([g.features for _, g, _ in raw])

    preps = []
    for frame, graph, labels in raw:
        lab = np.full(graph.n_nodes, -1, dtype=np.int64)
        for i, vid in enumerate(graph.node_ids[1:], start=1):
            if vid in labels:
                lab[i] = int(labels[vid])
        prep = _PreparedFrame(
            x_norm=normalize_features(graph.features, stats),
            prop=propagation_matrix(graph), labels=lab,
            node_rows=np.flatnonzero(lab >= 0))
        if prep.n_labeled > 0:
            preps.append(prep)
    if not preps:
        raise DataError("no labeled in-range vehicles in dataset")

    params = init_params(stats, hidden_dim=hidden_dim, iterations=iterations,
                         alpha=alpha, dropout_rate=dropout_rate,
                         seed=config.seed)
    state = init_adamw_state(params)
    rng = np.random.default_rng(config.seed + 1)
    batch_size = max(1, config.batch_size)
    history: list[float] = []
    step = 0

    for _ in range(config.epochs):
        order = rng.permutation(len(preps))
        epoch_loss = 0.0
        n_frames = 0
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            total = {name: np.zeros_like(arr)
                     for name, arr in params.tensors().items()}
            batch_loss = 0.0
            for idx in chunk:
                prep = preps[idx]
                masks = None
                if dropout_rate > 0.0:
                    shape = (prep.x_norm.shape[0], params.hidden_dim)
                    masks = (_dropout_mask(rng, shape, dropout_rate),
                             _dropout_mask(rng, shape, dropout_rate))
                loss, grads = _frame_loss_grads(prep, params, masks)
                batch_loss += loss
                for name, g in grads.items():
                    total[name] += g
            scale = 1.0 / len(chunk)
            for name in total:
                total[name] *= scale
            step += 1
            adamw_step(params, total, state, config.learning_rate,
                       config.weight_decay, step)
            epoch_loss += batch_loss
            n_frames += len(chunk)
        history.append(epoch_loss / n_frames)

    return params, history
