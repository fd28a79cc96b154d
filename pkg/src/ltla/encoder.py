"""Feature-to-simplex heads: the trainable prior over the decoder's state.

The conditional likelihood of a continuation given a prior p over hidden
states is sum_z p[z] * beta[z] with beta from one backward pass, so the
gradient w.r.t. the head's output logits is simply (posterior - softmax):
no autodiff framework is needed.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import TrainingDiverged
from .hmm import Belief, HmmParams, backward_likelihood


@dataclass
class EncoderHead:
    variant: str  # "linear" | "mlp"
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray | None = None
    b2: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in {"linear", "mlp"}:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "mlp" and (self.W2 is None or self.b2 is None):
            raise ValueError("mlp variant requires W2 and b2")

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.b1.shape[0] if self.variant == "linear" else self.b2.shape[0]


def linear_head(feature_dim: int, hidden_size: int, rng=None, scale: float = 0.0) -> EncoderHead:
    """Zero-initialized by default: the prior starts uniform."""
    W1 = np.zeros((feature_dim, hidden_size))
    if rng is not None and scale > 0:
        W1 = rng.normal(0.0, scale, size=W1.shape)
    return EncoderHead(variant="linear", W1=W1, b1=np.zeros(hidden_size))


def mlp_head(feature_dim: int, hidden_size: int, rng, width: int | None = None) -> EncoderHead:
    width = width if width is not None else 4 * hidden_size
    W1 = rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(feature_dim, width))
    W2 = rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, hidden_size))
    return EncoderHead(variant="mlp", W1=W1, b1=np.zeros(width), W2=W2, b2=np.zeros(hidden_size))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_logits(head: EncoderHead, feats: np.ndarray):
    """feats: (N, F). Returns (logits, hidden activations or None)."""
    if head.variant == "linear":
        return feats @ head.W1 + head.b1, None
    hact = np.tanh(feats @ head.W1 + head.b1)
    return hact @ head.W2 + head.b2, hact


def encode_prior(head: EncoderHead, features: np.ndarray) -> Belief:
    """Softmax of the head's output logits; strictly positive for finite weights."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (head.feature_dim,):
        raise ValueError(f"expected {head.feature_dim} features, got {features.shape}")
    logits, _ = _forward_logits(head, features[None, :])
    return Belief(_softmax(logits)[0], 0.0)


def encode_prior_batch(head: EncoderHead, features: np.ndarray) -> np.ndarray:
    """(N, F) feature rows to (N, H) prior rows."""
    logits, _ = _forward_logits(head, np.asarray(features, dtype=np.float64))
    return _softmax(logits)


def hybrid_loglik(head: EncoderHead, features, continuation, params: HmmParams) -> float:
    """log sum_z q_head(z | features) * q(continuation | z)."""
    from .hmm import continuation_loglik

    return continuation_loglik(encode_prior(head, features), continuation, params)


@dataclass
class Gradients:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray | None = None
    b2: np.ndarray | None = None

    def global_norm(self) -> float:
        parts = [self.W1, self.b1] + ([self.W2, self.b2] if self.W2 is not None else [])
        return float(np.sqrt(sum(float((p**2).sum()) for p in parts)))


def _grad_from_betas(head, feats, betas, logscales):
    """Gradient of the mean conditional loglik plus its value.

    betas[n] * exp(logscales[n]) is q(continuation_n | z); only the
    direction of beta matters for the gradient (scale cancels in the
    softmax-normalized identity).
    """
    N = feats.shape[0]
    logits, hact = _forward_logits(head, feats)
    s = _softmax(logits)
    weighted = s * betas
    denom = weighted.sum(axis=1)
    if np.any(denom <= 0.0):
        bad = int(np.argmin(denom))
        raise TrainingDiverged(step=-1, value=float("-inf")) from ValueError(
            f"continuation {bad} has zero mass under every hidden state"
        )
    mean_loglik = float(np.mean(np.log(denom) + logscales))
    dlogits = (weighted / denom[:, None] - s) / N
    if head.variant == "linear":
        grad = Gradients(W1=feats.T @ dlogits, b1=dlogits.sum(axis=0))
    else:
        gW2 = hact.T @ dlogits
        gb2 = dlogits.sum(axis=0)
        dh = dlogits @ head.W2.T
        da = (1.0 - hact**2) * dh
        grad = Gradients(W1=feats.T @ da, b1=da.sum(axis=0), W2=gW2, b2=gb2)
    return grad, mean_loglik


def encoder_grad(head: EncoderHead, batch, params: HmmParams):
    """Exact gradient of the mean hybrid loglik over (features, continuation)
    pairs, via one backward pass per continuation."""
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    feats = np.stack([np.asarray(f, dtype=np.float64) for f, _ in batch])
    betas = np.empty((len(batch), params.hidden_size))
    logscales = np.empty(len(batch))
    for i, (_, cont) in enumerate(batch):
        betas[i], logscales[i] = backward_likelihood(cont, params)
    return _grad_from_betas(head, feats, betas, logscales)


def precompute_betas(continuations, params: HmmParams):
    """Backward vectors for many continuations, grouped by length so the
    batched kernel applies. Dense-only fast path with a generic fallback."""
    N = len(continuations)
    betas = np.empty((N, params.hidden_size))
    logscales = np.empty(N)
    if params.is_dense:
        by_len = {}
        for i, cont in enumerate(continuations):
            by_len.setdefault(len(cont), []).append(i)
        for L, idxs in by_len.items():
            toks = np.array([list(continuations[i]) for i in idxs], dtype=np.int64).reshape(
                len(idxs), L
            )
            u, ls = kernels.backward_batch(toks, params.transition_dense(), params.emission_dense())
            betas[idxs] = u
            logscales[idxs] = ls
    else:
        for i, cont in enumerate(continuations):
            betas[i], logscales[i] = backward_likelihood(cont, params)
    return betas, logscales


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 64
    steps: int = 2000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning rate must be positive and batch size >= 1")


def default_train_config(variant: str, **overrides) -> TrainConfig:
    lr = 1e-2 if variant == "linear" else 3e-3
    return TrainConfig(**{"learning_rate": lr, **overrides})


def _head_params(head: EncoderHead):
    if head.variant == "linear":
        return [head.W1, head.b1]
    return [head.W1, head.b1, head.W2, head.b2]


def _grad_parts(grad: Gradients, variant: str):
    if variant == "linear":
        return [grad.W1, grad.b1]
    return [grad.W1, grad.b1, grad.W2, grad.b2]


def train_encoder(head: EncoderHead, dataset, params: HmmParams, cfg: TrainConfig):
    """Adaptive-moment ascent on the mean conditional loglik.

    dataset: sequence of (features, continuation) pairs. Returns the
    trained head and the per-step mean negative loglik curve. Deterministic
    given cfg.seed in single-threaded mode.
    """
    feats_all = np.stack([np.asarray(f, dtype=np.float64) for f, _ in dataset])
    betas_all, logscales_all = precompute_betas([c for _, c in dataset], params)

    values = [p.copy() for p in _head_params(head)]
    m = [np.zeros_like(p) for p in values]
    v = [np.zeros_like(p) for p in values]
    rng = np.random.default_rng(cfg.seed)
    curve = []
    N = len(dataset)
    current = _rebuild(head, values)
    for step in range(cfg.steps):
        idx = rng.choice(N, size=min(cfg.batch_size, N), replace=False)
        grad, loglik = _grad_from_betas(
            current, feats_all[idx], betas_all[idx], logscales_all[idx]
        )
        nll = -loglik
        if not np.isfinite(nll):
            raise TrainingDiverged(step=step, value=nll)
        curve.append(nll)
        parts = _grad_parts(grad, head.variant)
        norm = grad.global_norm()
        scale = 1.0 if norm <= cfg.clip_norm else cfg.clip_norm / norm
        for i, g in enumerate(parts):
            g = g * scale
            m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g
            v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g
            mhat = m[i] / (1 - cfg.beta1 ** (step + 1))
            vhat = v[i] / (1 - cfg.beta2 ** (step + 1))
            # ascent: the gradient points toward higher loglik
            values[i] = values[i] + cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
        current = _rebuild(head, values)
    return current, curve


def _rebuild(head: EncoderHead, values) -> EncoderHead:
    if head.variant == "linear":
        return replace(head, W1=values[0], b1=values[1])
    return replace(head, W1=values[0], b1=values[1], W2=values[2], b2=values[3])


# -- serialization -------------------------------------------------------------


def to_json_dict(head: EncoderHead) -> dict:
    doc = {"variant": head.variant, "W1": head.W1.tolist(), "b1": head.b1.tolist()}
    if head.variant == "mlp":
        doc["W2"] = head.W2.tolist()
        doc["b2"] = head.b2.tolist()
    return doc


def from_json_dict(d: dict) -> EncoderHead:
    kwargs = {}
    if d["variant"] == "mlp":
        kwargs = {
            "W2": np.asarray(d["W2"], dtype=np.float64),
            "b2": np.asarray(d["b2"], dtype=np.float64),
        }
    return EncoderHead(
        variant=d["variant"],
        W1=np.asarray(d["W1"], dtype=np.float64),
        b1=np.asarray(d["b1"], dtype=np.float64),
        **kwargs,
    )


def save(head: EncoderHead, path):
    with open(path, "w") as f:
        json.dump(to_json_dict(head), f)


def load(path) -> EncoderHead:
    with open(path) as f:
        return from_json_dict(json.load(f))
