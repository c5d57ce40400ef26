"""Minimal dense network machinery: layers, losses, Adam, checkpoints.

Gradients are hand-derived per loss; there is no autograd. Forward passes
accept a single vector or a batch matrix (rows = samples). Batch losses
are means over rows so gradients keep a consistent scale across batch
sizes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BatchTooSmall, DimensionMismatch, ParseError

LEAKY_SLOPE = 0.2
BCE_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"PITAMLP1"

_ACT_TO_TAG = {"identity": 0, "leaky_relu": 1, "sigmoid": 2, "softmax": 3}
_TAG_TO_ACT = {tag: act for act, tag in _ACT_TO_TAG.items()}


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        if self.activation not in _ACT_TO_TAG:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class MlpModel:
    layers: list[Layer]
    step: int = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.append(layer.W)
            params.append(layer.b)
        return params


def init_mlp(dims, rng, hidden_activation="leaky_relu", output_activation="sigmoid") -> MlpModel:
    """Glorot-uniform weights, zero biases; dims chains input to output."""
    if len(dims) < 2:
        raise ValueError("need at least an input and an output dimension")
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = output_activation if k == len(dims) - 2 else hidden_activation
        layers.append(Layer(W=W, b=b, activation=act))
    return MlpModel(layers=layers)


def _apply_activation(z, activation):
    if activation == "identity":
        return z
    if activation == "leaky_relu":
        return np.where(z >= 0, z, LEAKY_SLOPE * z)
    if activation == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if activation == "softmax":
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown activation {activation!r}")


def _activation_vjp(grad_a, z, a, activation):
    """Pull a gradient w.r.t. the activation output back to the pre-activation."""
    if activation == "identity":
        return grad_a
    if activation == "leaky_relu":
        return grad_a * np.where(z >= 0, 1.0, LEAKY_SLOPE)
    if activation == "sigmoid":
        return grad_a * a * (1.0 - a)
    if activation == "softmax":
        inner = (grad_a * a).sum(axis=-1, keepdims=True)
        return a * (grad_a - inner)
    raise ValueError(f"unknown activation {activation!r}")


def mlp_forward(model: MlpModel, x):
    """Forward pass; returns (output, cache) with per-layer activations."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise DimensionMismatch(f"input dim {x.shape[-1]} != model input {model.input_dim}")
    a = x
    zs = []
    activations = [a]
    for layer in model.layers:
        z = a @ layer.W.T + layer.b
        a = _apply_activation(z, layer.activation)
        zs.append(z)
        activations.append(a)
    return a, (zs, activations)


def mlp_backward(model: MlpModel, cache, grad_output):
    """Backprop grad_output (dL/doutput) to per-layer (dW, db) and dL/dinput."""
    zs, activations = cache
    grad = np.asarray(grad_output, dtype=np.float64)
    grads = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        grad_z = _activation_vjp(grad, zs[k], activations[k + 1], layer.activation)
        a_prev = activations[k]
        if grad_z.ndim == 1:
            dW = np.outer(grad_z, a_prev)
            db = grad_z.copy()
        else:
            dW = grad_z.T @ a_prev
            db = grad_z.sum(axis=0)
        grads[k] = (dW, db)
        grad = grad_z @ layer.W
    return grads, grad


def positive_weight(pos_count: float, total_count: float, t: float = 4.0) -> float:
    """Class-imbalance weight min(t, negatives/positives); t when never seen."""
    if total_count <= 0:
        raise ValueError("total_count must be positive")
    if pos_count <= 0:
        return float(t)
    return float(min(t, (total_count - pos_count) / pos_count))


def positive_weights(detections: np.ndarray, t: float = 4.0) -> np.ndarray:
    """Per-ingredient weights from a (records x ingredients) detection matrix."""
    detections = np.asarray(detections, dtype=np.float64)
    total = detections.shape[0]
    return np.array([positive_weight(c, total, t) for c in detections.sum(axis=0)])


def weighted_bce_loss(p, y, w, clamp: float = BCE_CLAMP):
    """Positive-weighted binary cross entropy; batch rows are averaged.

    p is clamped into [clamp, 1-clamp] before the logs; the gradient is
    taken at the clamped values.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if p.shape != y.shape or w.shape[-1] != p.shape[-1]:
        raise DimensionMismatch(f"shapes p{p.shape} y{y.shape} w{w.shape} do not agree")
    pc = np.clip(p, clamp, 1.0 - clamp)
    terms = w * y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)
    grad = -(w * y / pc - (1.0 - y) / (1.0 - pc))
    if p.ndim == 1:
        return float(-terms.sum()), grad
    n = p.shape[0]
    return float(-terms.sum() / n), grad / n


def amount_ce_loss(v_hat, v, eps: float = 1e-6):
    """Cross entropy between target amounts and predicted mass.

    The target is mass-normalized to 1 internally; eps keeps the log finite
    on the sparse prediction. Returns the loss (negated sum, so it is
    minimized) and its gradient w.r.t. v_hat.
    """
    v_hat = np.asarray(v_hat, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v_hat.shape != v.shape:
        raise DimensionMismatch(f"shapes {v_hat.shape} vs {v.shape}")
    totals = v.sum(axis=-1, keepdims=True)
    v_norm = v / totals
    terms = v_norm * np.log(v_hat + eps)
    grad = -v_norm / (v_hat + eps)
    if v_hat.ndim == 1:
        return float(-terms.sum()), grad
    n = v_hat.shape[0]
    return float(-terms.sum() / n), grad / n


def _cos_grad(x, y, cos_xy, nx, ny):
    return y / (nx * ny) - cos_xy * x / (nx * nx)


def triplet_retrieval_loss(q_r: np.ndarray, q_i: np.ndarray, margin: float = 0.3):
    """Text-anchored hinge loss with in-batch hard negative mining.

    For each anchor q_r[i], the negative is the most similar non-matching
    feature of either modality; ties prefer the text candidate with the
    lowest row index. Returns (loss, grad_q_r, grad_q_i).
    """
    q_r = np.asarray(q_r, dtype=np.float64)
    q_i = np.asarray(q_i, dtype=np.float64)
    n = q_r.shape[0]
    if n < 2:
        raise BatchTooSmall(f"need at least 2 pairs for negative mining, got {n}")
    if q_r.shape != q_i.shape:
        raise DimensionMismatch(f"shapes {q_r.shape} vs {q_i.shape}")

    nr = np.linalg.norm(q_r, axis=1)
    ni = np.linalg.norm(q_i, axis=1)
    if np.any(nr == 0) or np.any(ni == 0):
        raise ValueError("zero-norm feature vector in triplet batch")
    ur = q_r / nr[:, None]
    ui = q_i / ni[:, None]

    sim_txt = ur @ ur.T  # anchor i vs text j
    sim_img = ur @ ui.T  # anchor i vs image j
    pos = np.diag(sim_img).copy()
    np.fill_diagonal(sim_txt, -np.inf)
    candidates = np.concatenate([sim_txt, sim_img], axis=1)
    for i in range(n):
        candidates[i, n + i] = -np.inf  # own image is the positive, not a negative
    hardest = candidates.argmax(axis=1)
    neg = candidates[np.arange(n), hardest]

    hinge = margin - pos + neg
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).mean())

    grad_r = np.zeros_like(q_r)
    grad_i = np.zeros_like(q_i)
    scale = 1.0 / n
    for i in np.flatnonzero(active):
        # d/d(anchor, positive) of -cos(q_r[i], q_i[i])
        grad_r[i] -= scale * _cos_grad(q_r[i], q_i[i], pos[i], nr[i], ni[i])
        grad_i[i] -= scale * _cos_grad(q_i[i], q_r[i], pos[i], ni[i], nr[i])
        j = hardest[i]
        if j < n:
            u, nu = q_r[j], nr[j]
        else:
            u, nu = q_i[j - n], ni[j - n]
        grad_r[i] += scale * _cos_grad(q_r[i], u, neg[i], nr[i], nu)
        g_u = scale * _cos_grad(u, q_r[i], neg[i], nu, nr[i])
        if j < n:
            grad_r[j] += g_u
        else:
            grad_i[j - n] += g_u
    return loss, grad_r, grad_i


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params, lr: float = 1e-4) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr,
    )


def adam_step(params, grads, state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to params in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionMismatch("params/grads/state length mismatch")
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def save_checkpoint(model: MlpModel, path) -> None:
    """Binary checkpoint: magic, layer count, per-layer dims/tag/f32 data, step."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(model.layers)))
        for layer in model.layers:
            out_dim, in_dim = layer.W.shape
            fh.write(struct.pack("<IIB", out_dim, in_dim, _ACT_TO_TAG[layer.activation]))
            fh.write(layer.W.astype("<f4").tobytes(order="C"))
            fh.write(layer.b.astype("<f4").tobytes(order="C"))
        fh.write(struct.pack("<Q", model.step))


def load_checkpoint(path) -> MlpModel:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", path=path)
        (n_layers,) = struct.unpack("<I", fh.read(4))
        layers = []
        for _ in range(n_layers):
            header = fh.read(9)
            if len(header) != 9:
                raise ParseError("truncated layer header", path=path)
            out_dim, in_dim, tag = struct.unpack("<IIB", header)
            if tag not in _TAG_TO_ACT:
                raise ParseError(f"unknown activation tag {tag}", path=path)
            W = np.frombuffer(fh.read(out_dim * in_dim * 4), dtype="<f4").reshape(out_dim, in_dim)
            b = np.frombuffer(fh.read(out_dim * 4), dtype="<f4")
            layers.append(Layer(W=W.astype(np.float64), b=b.astype(np.float64), activation=_TAG_TO_ACT[tag]))
        tail = fh.read(8)
        if len(tail) != 8:
            raise ParseError("missing training-step counter", path=path)
        (step,) = struct.unpack("<Q", tail)
    return MlpModel(layers=layers, step=step)
