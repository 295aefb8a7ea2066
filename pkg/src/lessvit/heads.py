"""Downstream probes: linear head, spectral mixture-of-experts, kNN, PCA.

All probes consume frozen encoder features. The linear and kNN probes read
the global CLS token; the mixture-of-experts head reads the per-channel CLS
tokens, letting each expert vote from the few channels its gate ranks
highest; the PCA path projects patch tokens onto their top principal axes
for visual inspection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .embedding import TokenGrid
from .hypermae import AdamW
from .tensor import Tape, Tensor

__all__ = [
    "MoeHead",
    "grid_features",
    "linear_head",
    "train_linear_probe",
    "linear_predict",
    "moe_forward",
    "train_moe",
    "knn_predict",
    "knn_probe",
    "pca_patch_features",
    "export_ppm",
]


def grid_features(grid: TokenGrid) -> dict[str, np.ndarray]:
    """Pull the probe-facing features out of an encoded token grid."""
    toks = grid.tokens.data
    return {
        "global_cls": toks[:, 0, 0, :],
        "channel_cls": toks[:, 0, 1:, :],
        "patch_tokens": toks[:, 1:, 1:, :],
    }


# ---------------------------------------------------------------------------
# Linear probe


def linear_head(features, w, b) -> Tensor:
    """Affine map from pooled features to class logits."""
    f = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    return tc.add(tc.matmul(f, w), b)


def train_linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    epochs: int = 100,
    lr: float = 1e-2,
    weight_decay: float = 1e-2,
    seed: int = 0,
) -> tuple[Tensor, Tensor]:
    """Full-batch cross-entropy training of one affine layer."""
    rng = np.random.default_rng(seed)
    d = features.shape[1]
    w = Tensor(rng.normal(0.0, 0.02, size=(d, n_classes)), requires_grad=True, name="probe.w")
    b = Tensor(np.zeros(n_classes), requires_grad=True, name="probe.b")
    opt = AdamW({"probe.w": w, "probe.b": b}, weight_decay=weight_decay)
    feats = Tensor(features)
    y = np.asarray(labels, dtype=np.int64)
    for _ in range(epochs):
        with Tape() as tape:
            loss = tc.cross_entropy(linear_head(feats, w, b), y)
        grads = tape.backward(loss, [w, b])
        opt.step(grads, lr)
    return w, b


def linear_predict(features: np.ndarray, w: Tensor, b: Tensor) -> np.ndarray:
    return np.argmax(features @ w.data + b.data, axis=1)


# ---------------------------------------------------------------------------
# Spectral mixture of experts


@dataclass
class MoeHead:
    """E gated linear experts over the C per-channel CLS features.

    Each expert softmaxes its gate over channels, keeps the top-k, averages
    those channels' CLS vectors with renormalized gate weights, and maps the
    pooled vector to class logits.
    """

    gates: list[Tensor]  # E x (C,)
    weights: list[Tensor]  # E x (D, K)
    biases: list[Tensor]  # E x (K,)
    top_k: int

    @classmethod
    def init(cls, rng: np.random.Generator, n_experts: int, n_channels: int,
             dim: int, n_classes: int, top_k: int = 3) -> "MoeHead":
        if n_channels < top_k:
            raise ValueError(f"{n_channels} channels but top_k={top_k}")
        return cls(
            gates=[Tensor(rng.normal(0.0, 0.5, size=(n_channels,)), requires_grad=True,
                          name=f"moe.gate{e}") for e in range(n_experts)],
            weights=[Tensor(rng.normal(0.0, 0.02, size=(dim, n_classes)), requires_grad=True,
                            name=f"moe.w{e}") for e in range(n_experts)],
            biases=[Tensor(np.zeros(n_classes), requires_grad=True,
                           name=f"moe.b{e}") for e in range(n_experts)],
            top_k=top_k,
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for t in [*self.gates, *self.weights, *self.biases]:
            out[t.name] = t
        return out


def moe_forward(channel_cls, head: MoeHead) -> np.ndarray:
    """Majority vote over expert argmaxes; ties fall to summed softmax mass.

    ``channel_cls`` is (B, C, D) or (C, D); returns (B,) class predictions.
    """
    x = np.asarray(channel_cls.data if isinstance(channel_cls, Tensor) else channel_cls)
    if x.ndim == 2:
        x = x[None]
    b, c, d = x.shape
    n_classes = head.biases[0].shape[0]
    votes = np.zeros((b, len(head.gates)), dtype=np.int64)
    prob_mass = np.zeros((b, n_classes))
    for e, (gate, w, bias) in enumerate(zip(head.gates, head.weights, head.biases)):
        g = gate.data - gate.data.max()
        probs = np.exp(g) / np.exp(g).sum()
        order = np.argsort(-probs, kind="stable")
        chosen = order[: head.top_k]
        gw = probs[chosen] / probs[chosen].sum()
        pooled = np.einsum("k,bkd->bd", gw, x[:, chosen, :])
        logits = pooled @ w.data + bias.data
        shifted = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        votes[:, e] = logits.argmax(axis=1)
        prob_mass += p
    preds = np.empty(b, dtype=np.int64)
    for i in range(b):
        counts = np.bincount(votes[i], minlength=n_classes)
        top = counts.max()
        tied = np.flatnonzero(counts == top)
        if len(tied) == 1:
            preds[i] = tied[0]
        else:
            mass = prob_mass[i, tied]
            preds[i] = tied[np.argmax(mass)]  # argmax takes the smallest on equal mass
    return preds


def train_moe(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    n_experts: int,
    top_k: int = 3,
    epochs: int = 100,
    lr: float = 1e-2,
    seed: int = 0,
) -> MoeHead:
    """Train each expert's gate and linear map on its own cross-entropy."""
    rng = np.random.default_rng(seed)
    b, c, d = features.shape
    head = MoeHead.init(rng, n_experts, c, d, n_classes, top_k=top_k)
    params = head.parameters()
    opt = AdamW(params, weight_decay=1e-2)
    y = np.asarray(labels, dtype=np.int64)
    x = Tensor(features)
    for _ in range(epochs):
        with Tape() as tape:
            loss = None
            for gate, w, bias in zip(head.gates, head.weights, head.biases):
                probs = tc.softmax(tc.reshape(gate, (1, c)))
                chosen = np.sort(np.argsort(-probs.data[0], kind="stable")[:top_k])
                sel = tc.take(tc.reshape(probs, (c,)), chosen, axis=0)  # (K,)
                denom = tc.tsum(sel, keepdims=True)  # (1,)
                # pool with renormalized gate weights; selection is discrete,
                # the surviving weights stay differentiable
                selected = tc.take(x, chosen, axis=1)  # (B, K, D)
                gw = tc.reshape(tc.mul(sel, tc.reshape(_reciprocal(denom), (1,))), (1, top_k, 1))
                pooled = tc.tsum(tc.mul(selected, tc.broadcast_to(gw, (b, top_k, d))), axis=1)
                logits = tc.add(tc.matmul(pooled, w), bias)
                term = tc.cross_entropy(logits, y)
                loss = term if loss is None else tc.add(loss, term)
        grads = tape.backward(loss, list(params.values()))
        opt.step(grads, lr)
    return head


def _reciprocal(t: Tensor) -> Tensor:
    """1/x for a positive scalar tensor, with the matching gradient."""
    out = Tensor(1.0 / t.data)
    tc._record(out, (t,), lambda g: (-g / (t.data * t.data),))
    return out


# ---------------------------------------------------------------------------
# kNN probe


def knn_predict(train_features, train_labels, query_features, k: int = 20) -> np.ndarray:
    """Cosine-distance k-nearest-neighbor majority vote.

    Ties among neighbors resolve by training index (stable sort); ties in
    the vote resolve to the smallest label index.
    """
    tf = np.asarray(train_features, dtype=np.float64)
    qf = np.asarray(query_features, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    if tf.shape[0] == 0:
        raise ValueError("empty training set")
    if k > tf.shape[0]:
        raise ValueError(f"k={k} exceeds training size {tf.shape[0]}")
    tn = tf / (np.linalg.norm(tf, axis=1, keepdims=True) + 1e-12)
    qn = qf / (np.linalg.norm(qf, axis=1, keepdims=True) + 1e-12)
    dist = 1.0 - qn @ tn.T
    preds = np.empty(qf.shape[0], dtype=np.int64)
    for i in range(qf.shape[0]):
        nearest = np.argsort(dist[i], kind="stable")[:k]
        counts = np.bincount(y[nearest])
        preds[i] = int(np.argmax(counts))  # first max = smallest label index
    return preds


def knn_probe(train_features, train_labels, query_features, query_labels, k: int = 20) -> float:
    preds = knn_predict(train_features, train_labels, query_features, k=k)
    return float(np.mean(preds == np.asarray(query_labels)))


# ---------------------------------------------------------------------------
# PCA of patch features


def pca_patch_features(
    patch_features: np.ndarray,
    n_components: int = 3,
    max_iter: int = 1000,
    tol: float = 1e-12,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top principal components by power iteration with deflation.

    Returns (scores, components, eigenvalues): scores are the centered data
    projected per component and min-max scaled to [0, 1] for rendering;
    components are orthonormal rows. Rank deficiency yields fewer components
    with a warning.
    """
    x = np.asarray(patch_features, dtype=np.float64)
    n, d = x.shape
    if n < n_components:
        raise ValueError(f"{n} samples cannot support {n_components} components")
    xc = x - x.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / max(n - 1, 1)
    work = cov.copy()
    rng = np.random.default_rng(seed)
    comps: list[np.ndarray] = []
    vals: list[float] = []
    scale = np.trace(cov) / d
    for _ in range(n_components):
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = work @ v
            for prev in comps:  # keep iterates orthogonal to found components
                w -= (w @ prev) * prev
            norm = np.linalg.norm(w)
            if norm < 1e-300:
                break
            v_new = w / norm
            if min(np.linalg.norm(v_new - v), np.linalg.norm(v_new + v)) < tol:
                v = v_new
                break
            v = v_new
        lam = float(v @ work @ v)
        if lam <= max(1e-12 * scale, 1e-300):
            warnings.warn(
                f"covariance rank below {n_components}; returning {len(comps)} components"
            )
            break
        j = np.argmax(np.abs(v))
        if v[j] < 0:
            v = -v
        comps.append(v)
        vals.append(lam)
        work = work - lam * np.outer(v, v)
    components = np.stack(comps) if comps else np.zeros((0, d))
    raw = xc @ components.T
    scores = np.zeros_like(raw)
    for j in range(raw.shape[1]):
        lo, hi = raw[:, j].min(), raw[:, j].max()
        scores[:, j] = (raw[:, j] - lo) / (hi - lo) if hi > lo else 0.5
    return scores, components, np.array(vals)


def export_ppm(scores_grid: np.ndarray, path: str) -> None:
    """Write an (H, W, 3) array of [0, 1] scores as a plain-text PPM (P3)."""
    arr = np.clip(np.asarray(scores_grid), 0.0, 1.0)
    h, w, _ = arr.shape
    quantized = (arr * 255).astype(np.uint8)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"P3\n{w} {h}\n255\n")
        for row in quantized:
            f.write(" ".join(str(v) for px in row for v in px) + "\n")
