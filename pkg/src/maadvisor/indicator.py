"""Workload-level index regression scoring.

Plan trees are featurized node by node, encoded with subtree-masked
multi-head attention (a node only sees its own subtree), pooled into a
workload vector, and scored in [-1, 1] by a tanh MLP on the difference
between the vectors with and without the indexes. Everything is plain
numpy in float64: forward, backward, and the Adam loop, so analytic
gradients can be checked against finite differences directly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .model import (
    DatabaseSchema,
    IndexConfiguration,
    ValidationError,
    Workload,
    canonical_key,
)
from .oracle import SyntheticCostOracle
from .plans import PLAN_OPERATORS, LabeledPair, PlanNode, build_workload_plans

N_OPERATORS = len(PLAN_OPERATORS)  # 12
NAME_DIM = 16
FEATURE_DIM = N_OPERATORS + 2 + 2 * NAME_DIM  # 46
MODEL_DIM = 64
N_HEADS = 4
HEAD_DIM = MODEL_DIM // N_HEADS
FF_DIM = 128
N_LAYERS = 2
LOG_NORM = math.log1p(1e12)
LN_EPS = 1e-5

_OP_INDEX = {op: i for i, op in enumerate(PLAN_OPERATORS)}

Embedder = Callable[[Optional[str]], np.ndarray]


def embed_name(text: Optional[str]) -> np.ndarray:
    """Deterministic 16-dim hashing embedding of character trigrams.

    Stable across processes and platforms; empty or absent names map to
    the zero vector. Swap in any other Embedder for richer semantics.
    """
    vec = np.zeros(NAME_DIM)
    if not text:
        return vec
    padded = f"#{text.lower()}#"
    grams = [padded[i : i + 3] for i in range(max(len(padded) - 2, 1))]
    for gram in grams:
        digest = hashlib.blake2b(gram.encode(), digest_size=8).digest()
        value = int.from_bytes(digest, "big")
        sign = 1.0 if (value >> 8) & 1 else -1.0
        vec[value % NAME_DIM] += sign
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def _norm_log(value: float) -> float:
    return float(np.clip(math.log1p(max(value, 0.0)) / LOG_NORM, 0.0, 1.0))


def featurize_plan(
    tree: PlanNode, embedder: Embedder = embed_name
) -> tuple[np.ndarray, np.ndarray]:
    """Pre-order (features, subtree mask) for one plan tree.

    mask[i, j] is True iff node j lies in the subtree rooted at node i,
    node i included.
    """
    nodes: list[PlanNode] = []
    spans: list[tuple[int, int]] = []

    def visit(node: PlanNode) -> None:
        position = len(nodes)
        nodes.append(node)
        spans.append((position, position))  # placeholder end
        for child in node.children:
            visit(child)
        spans[position] = (position, len(nodes))

    visit(tree)
    n = len(nodes)
    features = np.zeros((n, FEATURE_DIM))
    mask = np.zeros((n, n), dtype=bool)
    for i, node in enumerate(nodes):
        features[i, _OP_INDEX[node.operator]] = 1.0
        features[i, N_OPERATORS] = _norm_log(node.est_cost)
        features[i, N_OPERATORS + 1] = _norm_log(node.est_cardinality)
        features[i, N_OPERATORS + 2 : N_OPERATORS + 2 + NAME_DIM] = embedder(node.table)
        features[i, N_OPERATORS + 2 + NAME_DIM :] = embedder(node.column)
        start, end = spans[i]
        mask[i, start:end] = True
    return features, mask


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _layer_names(layer: int) -> list[str]:
    prefix = f"l{layer}_"
    return [
        prefix + name
        for name in (
            "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
            "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
        )
    ]


@dataclass
class IndicatorParams:
    """All dense weights of the encoder and the difference MLP."""

    matrices: dict[str, np.ndarray]
    seed: int
    pooling: str = "mean"  # "mean" | "concat"
    slot_count: int = 128

    @property
    def pooled_dim(self) -> int:
        return MODEL_DIM if self.pooling == "mean" else MODEL_DIM * self.slot_count

    def names(self) -> list[str]:
        return sorted(self.matrices)

    def copy(self) -> "IndicatorParams":
        return IndicatorParams(
            {k: v.copy() for k, v in self.matrices.items()},
            self.seed,
            self.pooling,
            self.slot_count,
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.matrices[n].ravel() for n in self.names()])

    def from_vector(self, vector: np.ndarray) -> "IndicatorParams":
        out = self.copy()
        offset = 0
        for name in self.names():
            shape = self.matrices[name].shape
            size = int(np.prod(shape))
            out.matrices[name] = vector[offset : offset + size].reshape(shape).copy()
            offset += size
        return out

    def save(self, path) -> None:
        doc = {
            "version": 1,
            "dims": {
                "feature": FEATURE_DIM,
                "model": MODEL_DIM,
                "heads": N_HEADS,
                "ff": FF_DIM,
                "layers": N_LAYERS,
                "pooling": self.pooling,
                "slot_count": self.slot_count,
            },
            "matrices": {k: v.tolist() for k, v in self.matrices.items()},
            "seed": self.seed,
        }
        with open(path, "w") as handle:
            json.dump(doc, handle)

    @classmethod
    def load(cls, path) -> "IndicatorParams":
        with open(path) as handle:
            doc = json.load(handle)
        if doc.get("version") != 1:
            raise ValidationError("unsupported indicator params version")
        dims = doc.get("dims", {})
        return cls(
            matrices={k: np.asarray(v, dtype=float) for k, v in doc["matrices"].items()},
            seed=int(doc.get("seed", 0)),
            pooling=dims.get("pooling", "mean"),
            slot_count=int(dims.get("slot_count", 128)),
        )


def init_params(seed: int = 0, pooling: str = "mean", slot_count: int = 128) -> IndicatorParams:
    if pooling not in ("mean", "concat"):
        raise ValidationError(f"unknown pooling mode {pooling!r}")
    rng = np.random.default_rng(seed)

    def xavier(fan_in: int, fan_out: int) -> np.ndarray:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    mats: dict[str, np.ndarray] = {
        "w_in": xavier(FEATURE_DIM, MODEL_DIM),
        "b_in": np.zeros(MODEL_DIM),
    }
    for layer in range(N_LAYERS):
        p = f"l{layer}_"
        for gate in ("wq", "wk", "wv", "wo"):
            mats[p + gate] = xavier(MODEL_DIM, MODEL_DIM)
        for gate in ("bq", "bk", "bv", "bo"):
            mats[p + gate] = np.zeros(MODEL_DIM)
        mats[p + "ln1_g"] = np.ones(MODEL_DIM)
        mats[p + "ln1_b"] = np.zeros(MODEL_DIM)
        mats[p + "w1"] = xavier(MODEL_DIM, FF_DIM)
        mats[p + "b1"] = np.zeros(FF_DIM)
        mats[p + "w2"] = xavier(FF_DIM, MODEL_DIM)
        mats[p + "b2"] = np.zeros(MODEL_DIM)
        mats[p + "ln2_g"] = np.ones(MODEL_DIM)
        mats[p + "ln2_b"] = np.zeros(MODEL_DIM)
    pooled = MODEL_DIM if pooling == "mean" else MODEL_DIM * slot_count
    mats["mlp_w1"] = xavier(pooled, MODEL_DIM)
    mats["mlp_b1"] = np.zeros(MODEL_DIM)
    mats["mlp_w2"] = xavier(MODEL_DIM, 1)
    mats["mlp_b2"] = np.zeros(1)
    return IndicatorParams(mats, seed, pooling, slot_count)


def zero_grads(params: IndicatorParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.matrices.items()}


# ---------------------------------------------------------------------------
# encoder forward / backward
# ---------------------------------------------------------------------------


def _layernorm_forward(x, gain, bias):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv)


def _layernorm_backward(dy, cache, gain):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def _split_heads(x):
    b, n, _ = x.shape
    return x.reshape(b, n, N_HEADS, HEAD_DIM).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def encoder_forward(
    params: IndicatorParams, features: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, list]:
    """Encode a padded batch of plans: (B, N, 46) + (B, N, N) -> (B, N, 64)."""
    mats = params.matrices
    h = features @ mats["w_in"] + mats["b_in"]
    caches = [(features,)]
    scale = 1.0 / math.sqrt(HEAD_DIM)
    for layer in range(N_LAYERS):
        p = f"l{layer}_"
        q = h @ mats[p + "wq"] + mats[p + "bq"]
        k = h @ mats[p + "wk"] + mats[p + "bk"]
        v = h @ mats[p + "wv"] + mats[p + "bv"]
        qh, kh, vh = _split_heads(q), _split_heads(k), _split_heads(v)
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        scores = np.where(mask[:, None, :, :], scores, -1e30)
        scores -= scores.max(-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(-1, keepdims=True)
        context = _merge_heads(weights @ vh)
        attn_out = context @ mats[p + "wo"] + mats[p + "bo"]
        res1 = h + attn_out
        normed1, ln1 = _layernorm_forward(res1, mats[p + "ln1_g"], mats[p + "ln1_b"])
        hidden = np.maximum(normed1 @ mats[p + "w1"] + mats[p + "b1"], 0.0)
        ff_out = hidden @ mats[p + "w2"] + mats[p + "b2"]
        res2 = normed1 + ff_out
        normed2, ln2 = _layernorm_forward(res2, mats[p + "ln2_g"], mats[p + "ln2_b"])
        caches.append((h, qh, kh, vh, weights, context, ln1, normed1, hidden, ln2))
        h = normed2
    return h, caches


def encoder_backward(
    params: IndicatorParams,
    dh: np.ndarray,
    caches: list,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients for a batch encoded by encoder_forward."""
    mats = params.matrices
    scale = 1.0 / math.sqrt(HEAD_DIM)
    for layer in range(N_LAYERS - 1, -1, -1):
        p = f"l{layer}_"
        h, qh, kh, vh, weights, context, ln1, normed1, hidden, ln2 = caches[layer + 1]
        dres2, dg, db = _layernorm_backward(dh, ln2, mats[p + "ln2_g"])
        grads[p + "ln2_g"] += dg
        grads[p + "ln2_b"] += db
        dnormed1 = dres2.copy()
        dff = dres2
        grads[p + "w2"] += np.einsum("bnf,bnd->fd", hidden, dff)
        grads[p + "b2"] += dff.sum((0, 1))
        dhidden = (dff @ mats[p + "w2"].T) * (hidden > 0)
        grads[p + "w1"] += np.einsum("bnd,bnf->df", normed1, dhidden)
        grads[p + "b1"] += dhidden.sum((0, 1))
        dnormed1 += dhidden @ mats[p + "w1"].T
        dres1, dg, db = _layernorm_backward(dnormed1, ln1, mats[p + "ln1_g"])
        grads[p + "ln1_g"] += dg
        grads[p + "ln1_b"] += db
        dh_prev = dres1.copy()
        dattn = dres1
        grads[p + "wo"] += np.einsum("bnd,bne->de", context, dattn)
        grads[p + "bo"] += dattn.sum((0, 1))
        dcontext = _split_heads(dattn @ mats[p + "wo"].T)
        dweights = dcontext @ vh.transpose(0, 1, 3, 2)
        dvh = weights.transpose(0, 1, 3, 2) @ dcontext
        dscores = weights * (dweights - (dweights * weights).sum(-1, keepdims=True))
        dqh = (dscores @ kh) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
        for name, dxh in (("q", dqh), ("k", dkh), ("v", dvh)):
            dx = _merge_heads(dxh)
            grads[p + "w" + name] += np.einsum("bnd,bne->de", h, dx)
            grads[p + "b" + name] += dx.sum((0, 1))
            dh_prev += dx @ mats[p + "w" + name].T
        dh = dh_prev
    (features,) = caches[0]
    grads["w_in"] += np.einsum("bnf,bnd->fd", features, dh)
    grads["b_in"] += dh.sum((0, 1))


def _pad_batch(
    featurized: Sequence[tuple[np.ndarray, np.ndarray]]
) -> tuple[np.ndarray, np.ndarray]:
    n_max = max(f.shape[0] for f, _ in featurized)
    batch = len(featurized)
    features = np.zeros((batch, n_max, FEATURE_DIM))
    mask = np.zeros((batch, n_max, n_max), dtype=bool)
    mask[:, np.arange(n_max), np.arange(n_max)] = True  # padding attends to itself
    for i, (feats, m) in enumerate(featurized):
        n = feats.shape[0]
        features[i, :n] = feats
        mask[i, :n, :n] = m
    return features, mask


def encode_nodes(
    features: np.ndarray, mask: np.ndarray, params: IndicatorParams
) -> np.ndarray:
    """All node vectors of one plan; row 0 is the root."""
    out, _ = encoder_forward(params, features[None], mask[None])
    return out[0]


def encode_query(features: np.ndarray, mask: np.ndarray, params: IndicatorParams) -> np.ndarray:
    """Root vector representing one whole query plan."""
    return encode_nodes(features, mask, params)[0]


# ---------------------------------------------------------------------------
# pair scoring and training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreparedPair:
    before: tuple[tuple[np.ndarray, np.ndarray], ...]
    after: tuple[tuple[np.ndarray, np.ndarray], ...]
    label: float


def prepare_pair(pair: LabeledPair, embedder: Embedder = embed_name) -> PreparedPair:
    return PreparedPair(
        before=tuple(featurize_plan(p, embedder) for p in pair.plans_before),
        after=tuple(featurize_plan(p, embedder) for p in pair.plans_after),
        label=float(pair.label),
    )


def _pool(roots: np.ndarray, params: IndicatorParams) -> np.ndarray:
    if params.pooling == "mean":
        return roots.mean(0)
    if roots.shape[0] > params.slot_count:
        raise ValidationError(
            f"workload has {roots.shape[0]} queries, more than {params.slot_count} slots"
        )
    slots = np.zeros((params.slot_count, MODEL_DIM))
    slots[: roots.shape[0]] = roots
    return slots.ravel()


def _pool_backward(dvec: np.ndarray, n_queries: int, params: IndicatorParams) -> np.ndarray:
    if params.pooling == "mean":
        return np.repeat(dvec[None, :], n_queries, axis=0) / n_queries
    return dvec.reshape(params.slot_count, MODEL_DIM)[:n_queries]


def _side_vector(params, side):
    features, mask = _pad_batch(side)
    encoded, caches = encoder_forward(params, features, mask)
    roots = encoded[:, 0, :]
    return _pool(roots, params), (features, mask, caches, len(side))


def score_pair(params: IndicatorParams, pair: PreparedPair) -> float:
    """tanh MLP score of the after-minus-before workload representation."""
    if len(pair.before) != len(pair.after):
        raise ValidationError("before/after query counts differ")
    v_before, _ = _side_vector(params, pair.before)
    v_after, _ = _side_vector(params, pair.after)
    mats = params.matrices
    diff = v_after - v_before
    hidden = np.maximum(diff @ mats["mlp_w1"] + mats["mlp_b1"], 0.0)
    raw = hidden @ mats["mlp_w2"] + mats["mlp_b2"]
    return float(np.tanh(raw[0]))


def loss_and_grads(
    params: IndicatorParams, pairs: Sequence[PreparedPair]
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error against the +-1 labels, with full gradients."""
    if not pairs:
        raise ValidationError("empty batch")
    mats = params.matrices
    grads = zero_grads(params)
    total = 0.0
    for pair in pairs:
        v_before, cache_b = _side_vector(params, pair.before)
        v_after, cache_a = _side_vector(params, pair.after)
        diff = v_after - v_before
        pre_hidden = diff @ mats["mlp_w1"] + mats["mlp_b1"]
        hidden = np.maximum(pre_hidden, 0.0)
        raw = float((hidden @ mats["mlp_w2"] + mats["mlp_b2"])[0])
        score = math.tanh(raw)
        total += (score - pair.label) ** 2
        dscore = 2.0 * (score - pair.label) / len(pairs)
        draw = dscore * (1.0 - score * score)
        grads["mlp_w2"] += np.outer(hidden, [draw])
        grads["mlp_b2"] += draw
        dhidden = mats["mlp_w2"][:, 0] * draw
        dpre = dhidden * (pre_hidden > 0)
        grads["mlp_w1"] += np.outer(diff, dpre)
        grads["mlp_b1"] += dpre
        ddiff = mats["mlp_w1"] @ dpre
        for sign, (features, mask, caches, n_queries) in (
            (1.0, cache_a),
            (-1.0, cache_b),
        ):
            droots = sign * _pool_backward(ddiff, n_queries, params)
            dh = np.zeros((features.shape[0], features.shape[1], MODEL_DIM))
            dh[:, 0, :] = droots
            encoder_backward(params, dh, caches, grads)
    return total / len(pairs), grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0


def train_indicator(
    pairs: Sequence[LabeledPair],
    config: TrainConfig = TrainConfig(),
    pooling: str = "mean",
    embedder: Embedder = embed_name,
) -> tuple[IndicatorParams, list[float]]:
    """Adam on MSE over tanh scores; deterministic for a fixed seed."""
    if not pairs:
        raise ValidationError("empty training set")
    labels = {p.label for p in pairs}
    if len(labels) < 2:
        raise ValidationError("training needs both classes present")
    prepared = [prepare_pair(p, embedder) for p in pairs]
    params = init_params(config.seed, pooling=pooling)
    rng = np.random.default_rng(config.seed)
    moment1 = zero_grads(params)
    moment2 = zero_grads(params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(len(prepared))
        epoch_loss = 0.0
        for start in range(0, len(prepared), config.batch_size):
            batch = [prepared[i] for i in order[start : start + config.batch_size]]
            loss, grads = loss_and_grads(params, batch)
            epoch_loss += loss * len(batch)
            step += 1
            for name, grad in grads.items():
                moment1[name] = beta1 * moment1[name] + (1 - beta1) * grad
                moment2[name] = beta2 * moment2[name] + (1 - beta2) * grad * grad
                m_hat = moment1[name] / (1 - beta1**step)
                v_hat = moment2[name] / (1 - beta2**step)
                params.matrices[name] -= (
                    config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
                )
        history.append(epoch_loss / len(prepared))
    return params, history


def sign_accuracy(params: IndicatorParams, pairs: Sequence[LabeledPair]) -> float:
    prepared = [prepare_pair(p) for p in pairs]
    hits = 0
    for pair in prepared:
        score = score_pair(params, pair)
        predicted = 1 if score >= 0 else -1
        if predicted == int(pair.label):
            hits += 1
    return hits / len(prepared)


def score_indexes(
    plans_before: Sequence[PlanNode],
    plans_after_by_index: Mapping[str, Sequence[PlanNode]],
    params: IndicatorParams,
    embedder: Embedder = embed_name,
) -> dict[str, float]:
    """Score each candidate index's after-plans against shared before-plans."""
    before = tuple(featurize_plan(p, embedder) for p in plans_before)
    scores: dict[str, float] = {}
    for key, plans_after in plans_after_by_index.items():
        if len(plans_after) != len(plans_before):
            raise ValidationError(f"{key}: before/after query counts differ")
        after = tuple(featurize_plan(p, embedder) for p in plans_after)
        scores[key] = score_pair(params, PreparedPair(before, after, 0.0))
    return scores


def revision_scores(
    workload: Workload,
    config: IndexConfiguration,
    schema: DatabaseSchema,
    oracle: SyntheticCostOracle,
    params: IndicatorParams,
) -> dict[str, float]:
    """Scores for the revision step: each index against the config without it."""
    after_plans = build_workload_plans(workload, config, schema, oracle)
    scores: dict[str, float] = {}
    for index in config.indexes:
        rest = IndexConfiguration(
            tuple(i for i in config.indexes if i is not index), 0.0
        )
        before_plans = build_workload_plans(workload, rest, schema, oracle)
        scores.update(
            score_indexes(before_plans, {canonical_key(index): after_plans}, params)
        )
    return scores


def make_revision_scorer(
    schema: DatabaseSchema, oracle: SyntheticCostOracle, params: IndicatorParams
):
    """Adapter matching the pipeline's indicator_scorer callable."""

    def scorer(workload: Workload, config: IndexConfiguration) -> dict[str, float]:
        return revision_scores(workload, config, schema, oracle, params)

    return scorer
