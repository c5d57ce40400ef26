"""Shared-projection alignment of paired text/image features.

A single fully connected layer maps both modalities into the common food
embedding space; sharing the weights is what ties the two views together.
Training minimizes the text-anchored hinge loss with in-batch hard
negative mining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchTooSmall, DimensionMismatch
from .nn import MlpModel, init_adam, init_mlp, adam_step, mlp_backward, mlp_forward, triplet_retrieval_loss
from .rng import stage_rng


@dataclass(frozen=True)
class PairedFeatures:
    """Row-aligned raw text and image feature matrices."""

    z_r: np.ndarray
    z_i: np.ndarray

    def __post_init__(self):
        z_r = np.asarray(self.z_r, dtype=np.float64)
        z_i = np.asarray(self.z_i, dtype=np.float64)
        object.__setattr__(self, "z_r", z_r)
        object.__setattr__(self, "z_i", z_i)
        if z_r.shape != z_i.shape:
            raise DimensionMismatch(f"paired features disagree: {z_r.shape} vs {z_i.shape}")
        if not (np.isfinite(z_r).all() and np.isfinite(z_i).all()):
            raise ValueError("non-finite feature entries")

    def __len__(self) -> int:
        return self.z_r.shape[0]


def init_projection(in_dim: int, rng, out_dim: int | None = None) -> MlpModel:
    """One shared linear layer; identity output activation."""
    return init_mlp([in_dim, out_dim or in_dim], rng, output_activation="identity")


def project(model: MlpModel, z) -> np.ndarray:
    out, _ = mlp_forward(model, z)
    return out


def train_projection(
    features: PairedFeatures,
    margin: float = 0.3,
    epochs: int = 10,
    batch_size: int = 64,
    lr: float = 1e-4,
    seed: int = 0,
    out_dim: int | None = None,
    rng=None,
):
    """Train the shared projection; returns (model, per-epoch log)."""
    n = len(features)
    if n < 2:
        raise BatchTooSmall(f"need at least 2 pairs, got {n}")
    rng = rng if rng is not None else stage_rng(seed, "retrieval")
    model = init_projection(features.z_r.shape[1], rng, out_dim)
    state = init_adam(model.parameters(), lr=lr)
    log = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            if batch.size < 2:
                continue  # cannot mine a negative from a single pair
            q_r, cache_r = mlp_forward(model, features.z_r[batch])
            q_i, cache_i = mlp_forward(model, features.z_i[batch])
            loss, grad_r, grad_i = triplet_retrieval_loss(q_r, q_i, margin)
            grads_r, _ = mlp_backward(model, cache_r, grad_r)
            grads_i, _ = mlp_backward(model, cache_i, grad_i)
            # one parameter set serves both modalities: gradients add
            flat = []
            for (dWr, dbr), (dWi, dbi) in zip(grads_r, grads_i):
                flat.append(dWr + dWi)
                flat.append(dbr + dbi)
            adam_step(model.parameters(), flat, state)
            model.step += 1
            losses.append(loss)
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses))})
    return model, log
