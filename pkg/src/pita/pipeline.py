"""Training stages and the cascaded detection -> amount inference path.

Stages are trained sequentially: the detector learns from weighted BCE on
presence vectors, then the amount head learns on the detector's frozen
hard masks. In full mode the amount head sees the embedding concatenated
with the hard mask and its softmax output is masked and renormalized; in
no_id mode the raw softmax is trained directly and top-k thresholding is
applied only at prediction time.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset
from .errors import EmptyDataset, InvalidK, NumericalBlowup, UndefinedMetric
from .groups import SubstitutionModel
from .metrics import recipe_metrics
from .nn import (
    MlpModel,
    amount_ce_loss,
    init_adam,
    init_mlp,
    adam_step,
    mlp_backward,
    mlp_forward,
    positive_weights,
    weighted_bce_loss,
)
from .rng import stage_rng
from .transport import SinkhornConfig, sinkhorn_batch

log = logging.getLogger("pita.pipeline")

MODES = ("full", "no_id")
LOSSES = ("wasserstein", "cross_entropy")


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "full"
    loss: str = "wasserstein"
    detection_threshold: float = 0.5
    top_k: int = 10
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    lr: float = 1e-4
    hidden_dims: tuple[int, ...] = (1024, 1024)
    amount_constant: float = 1000.0
    pos_weight_clamp: float = 4.0
    ce_eps: float = 1e-6
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not 0.0 < self.detection_threshold < 1.0:
            raise ValueError(f"detection_threshold must lie in (0, 1), got {self.detection_threshold}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")


@dataclass
class TrainedPipeline:
    id_model: MlpModel | None
    ap_model: MlpModel
    substitution: SubstitutionModel
    config: PipelineConfig


def _detection_matrix(dataset: Dataset) -> np.ndarray:
    return np.stack([dataset.detection_vector(rec) for rec in dataset.records])


def _amount_targets(dataset: Dataset) -> np.ndarray:
    """Per-record mass fractions (rows sum to 1)."""
    rows = [dataset.amount_vector(rec) for rec in dataset.records]
    V = np.stack(rows)
    return V / V.sum(axis=1, keepdims=True)


def _record_embeddings(dataset: Dataset) -> np.ndarray:
    return np.stack([dataset.embedding_of(rec) for rec in dataset.records])


def train_id(train: Dataset, config: PipelineConfig, val: Dataset | None = None, rng=None):
    """Train the detector MLP; returns (model, per-epoch log)."""
    if len(train) == 0:
        raise EmptyDataset("id training split is empty")
    rng = rng if rng is not None else stage_rng(config.seed, "train_id")
    X = _record_embeddings(train)
    Y = _detection_matrix(train)
    w = positive_weights(Y, t=config.pos_weight_clamp)
    size = train.vocabulary.size
    model = init_mlp([X.shape[1], *config.hidden_dims, size], rng, output_activation="sigmoid")
    state = init_adam(model.parameters(), lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            p, cache = mlp_forward(model, X[batch])
            loss, grad_p = weighted_bce_loss(p, Y[batch], w)
            if not np.isfinite(loss):
                raise NumericalBlowup(f"id loss became non-finite at epoch {epoch}")
            grads, _ = mlp_backward(model, cache, grad_p)
            adam_step(model.parameters(), [g for pair in grads for g in pair], state)
            model.step += 1
            losses.append(loss)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val is not None and len(val) > 0:
            pv, _ = mlp_forward(model, _record_embeddings(val))
            vloss, _ = weighted_bce_loss(pv, _detection_matrix(val), w)
            entry["val_loss"] = float(vloss)
        history.append(entry)
        log.info("id epoch %d: %s", epoch, entry)
    return model, history


def detect(id_model: MlpModel, q, threshold: float = 0.5):
    """Soft probabilities and the strict-threshold hard detection."""
    p, _ = mlp_forward(id_model, q)
    return p, (p > threshold).astype(np.float64)


def top_k_threshold(scores, k: int) -> np.ndarray:
    """Binary vector keeping the k highest scores; ties go to lower indices."""
    scores = np.asarray(scores, dtype=np.float64)
    size = scores.shape[-1]
    if k > size:
        raise InvalidK(f"k={k} exceeds vector length {size}")
    if k < 1:
        raise InvalidK(f"k must be >= 1, got {k}")
    order = np.lexsort((np.arange(size), -scores))
    out = np.zeros(size)
    out[order[:k]] = 1.0
    return out


def _ap_inputs(config: PipelineConfig, Q: np.ndarray, masks: np.ndarray | None) -> np.ndarray:
    if config.mode == "full":
        return np.concatenate([Q, masks], axis=-1)
    return Q


def _mask_with_fallback(hard: np.ndarray, soft: np.ndarray) -> np.ndarray:
    """Replace all-zero detection rows by the argmax one-hot of the soft scores."""
    hard = hard.copy()
    empty = hard.sum(axis=-1) == 0
    if np.any(empty):
        idx = soft[empty].argmax(axis=-1)
        hard[np.flatnonzero(empty), idx] = 1.0
    return hard


def train_ap(
    train: Dataset,
    id_model: MlpModel | None,
    substitution: SubstitutionModel,
    config: PipelineConfig,
    val: Dataset | None = None,
    rng=None,
):
    """Train the amount head on the frozen detector's masks; (model, log)."""
    if len(train) == 0:
        raise EmptyDataset("ap training split is empty")
    if config.mode == "full" and id_model is None:
        raise ValueError("full mode needs a trained id model")
    rng = rng if rng is not None else stage_rng(config.seed, "train_ap")
    Q = _record_embeddings(train)
    V = _amount_targets(train)
    size = train.vocabulary.size

    masks = None
    if config.mode == "full":
        p, hard = detect(id_model, Q, config.detection_threshold)
        masks = hard  # AP input uses the raw thresholded detection
        train_masks = _mask_with_fallback(hard, p)
    X = _ap_inputs(config, Q, masks)
    model = init_mlp([X.shape[1], *config.hidden_dims, size], rng, output_activation="softmax")
    state = init_adam(model.parameters(), lr=config.lr)
    cost = substitution.M ** config.sinkhorn.p

    def batch_loss_and_grad(raw, targets, batch_masks):
        n = raw.shape[0]
        if batch_masks is not None:
            masked = raw * batch_masks
            s = masked.sum(axis=1, keepdims=True)
            pred = masked / s
        else:
            masked = None
            pred = raw
        if config.loss == "wasserstein":
            values, g_pred, _ = sinkhorn_batch(pred, targets, cost, config.sinkhorn)
            loss = float(values.mean())
            g_pred = g_pred / n
        else:
            loss, g_pred = amount_ce_loss(pred, targets, eps=config.ce_eps)
        if batch_masks is not None:
            inner = (g_pred * pred).sum(axis=1, keepdims=True)
            g_masked = (g_pred - inner) / s
            g_raw = g_masked * batch_masks
        else:
            g_raw = g_pred
        return loss, g_raw

    history = []
    val_ctx = None
    if val is not None and len(val) > 0:
        Qv = _record_embeddings(val)
        Vv = _amount_targets(val)
        if config.mode == "full":
            pv, hv = detect(id_model, Qv, config.detection_threshold)
            vmasks = _mask_with_fallback(hv, pv)
            Xv = _ap_inputs(config, Qv, hv)
        else:
            vmasks = None
            Xv = Qv
        val_ctx = (Xv, Vv, vmasks)

    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            raw, cache = mlp_forward(model, X[batch])
            bmasks = train_masks[batch] if config.mode == "full" else None
            loss, g_raw = batch_loss_and_grad(raw, V[batch], bmasks)
            if not np.isfinite(loss):
                raise NumericalBlowup(f"ap loss became non-finite at epoch {epoch}")
            grads, _ = mlp_backward(model, cache, g_raw)
            adam_step(model.parameters(), [g for pair in grads for g in pair], state)
            model.step += 1
            losses.append(loss)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_ctx is not None:
            Xv, Vv, vmasks = val_ctx
            raw_v, _ = mlp_forward(model, Xv)
            vloss, _ = batch_loss_and_grad(raw_v, Vv, vmasks)
            entry["val_loss"] = float(vloss)
        history.append(entry)
        log.info("ap epoch %d: %s", epoch, entry)
    return model, history


def predict(pipeline: TrainedPipeline, q: np.ndarray) -> np.ndarray:
    """Amount vector for one embedding; nonnegative, sums to C."""
    return predict_batch(pipeline, np.asarray(q, dtype=np.float64)[None, :])[0]


def predict_batch(pipeline: TrainedPipeline, Q: np.ndarray) -> np.ndarray:
    config = pipeline.config
    C = config.amount_constant
    if config.mode == "full":
        p, hard = detect(pipeline.id_model, Q, config.detection_threshold)
        x = np.concatenate([Q, hard], axis=-1)
        raw, _ = mlp_forward(pipeline.ap_model, x)
        out = np.zeros_like(raw)
        empty = hard.sum(axis=1) == 0
        if np.any(empty):
            # detector fired nothing: all mass on its single best guess
            idx = p[empty].argmax(axis=1)
            out[np.flatnonzero(empty), idx] = C
        rest = ~empty
        if np.any(rest):
            masked = raw[rest] * hard[rest]
            out[rest] = C * masked / masked.sum(axis=1, keepdims=True)
        return out
    raw, _ = mlp_forward(pipeline.ap_model, Q)
    out = np.zeros_like(raw)
    for i in range(raw.shape[0]):
        mask = top_k_threshold(raw[i], config.top_k)
        masked = raw[i] * mask
        out[i] = C * masked / masked.sum()
    return out


def uniform_baseline_amounts(y_hat: np.ndarray, amount_constant: float = 1000.0) -> np.ndarray:
    """Reference predictor: spread C uniformly over the detected set."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    total = y_hat.sum()
    if total == 0:
        raise ValueError("uniform baseline needs a nonempty detection")
    return amount_constant * y_hat / total


def evaluate(pipeline: TrainedPipeline, dataset: Dataset, substitution: SubstitutionModel | None = None, jobs: int = 1) -> dict:
    """Mean metrics over a split plus the per-recipe breakdown."""
    if len(dataset) == 0:
        raise EmptyDataset(f"evaluation split {dataset.split!r} is empty")
    substitution = substitution if substitution is not None else pipeline.substitution
    C = pipeline.config.amount_constant
    Q = _record_embeddings(dataset)
    V_hat = predict_batch(pipeline, Q)

    def one(idx_rec):
        idx, rec = idx_rec
        v = dataset.amount_vector(rec, C)
        y = (v > 0).astype(np.float64)
        v_hat = V_hat[idx]
        y_hat = (v_hat > 0).astype(np.float64)
        try:
            m = recipe_metrics(y, y_hat, v, v_hat, substitution, C)
        except UndefinedMetric:
            log.warning("recipe %s has empty ground truth; skipped", rec.id)
            return rec.id, None
        return rec.id, m

    items = list(enumerate(dataset.records))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]

    per_recipe = [
        {"id": rid, **m.as_dict()} for rid, m in results if m is not None
    ]
    if not per_recipe:
        raise EmptyDataset("no recipe with nonempty ground truth to evaluate")
    report = {"n": len(per_recipe)}
    for key in ("cvg", "iou", "emd", "cvg_group", "iou_group", "emd_group"):
        report[key] = float(np.mean([row[key] for row in per_recipe]))
    report["per_recipe"] = per_recipe
    return report
