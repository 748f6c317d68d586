"""Dual-view contrastive pre-training.

The attribute-only MLP view is the anchor side; the structure-aware GNN view
supplies the positive (same node) and the negatives (all other nodes). As
written, the denominator of the per-anchor term excludes the positive pair,
so the loss can go below zero; a config flag restores the conventional
denominator for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamState,
    Tape,
    Tensor,
    add,
    adam_step,
    backward,
    cosine_sim_matrix,
    derive_seed,
    exp,
    log,
    mul,
    row_sum,
    scale,
    sub,
    total_sum,
)
from .encoders import EncoderParams, freeze, gnn_forward, init_encoder_params, mlp_forward, parameters
from .errors import ContractError, NumericError, ParameterError
from .graph import GraphData, gcn_normalize


@dataclass
class PretrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    weight_decay: float = 1e-4
    tau: float = 0.5
    dropout: float = 0.2
    hidden_dim: int = 128
    seed: int = 0
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 0:
            raise ParameterError("epochs must be non-negative")


def _masked_logsumexp_rows(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log-sum-exp restricted to mask entries, max-shifted for stability."""
    shift = np.where(mask > 0, logits.data, -np.inf).max(axis=1, keepdims=True)
    shifted = add(logits, Tensor(-shift))
    ex = mul(exp(shifted), Tensor(mask))
    return add(log(row_sum(ex)), Tensor(shift))


def ntxent_pretrain_loss(z1: Tensor, z2: Tensor, tau: float,
                         include_positive_in_denominator: bool = False) -> Tensor:
    """Temperature-scaled contrastive loss anchored on the first view.

    For each row i the positive is row i of the second view; negatives are
    the other rows of the second view. The positive is excluded from the
    denominator unless `include_positive_in_denominator` is set.
    """
    if z1.shape != z2.shape:
        raise ContractError(f"views must have equal shape, got {z1.shape} vs {z2.shape}")
    n = z1.rows
    if n < 2:
        raise ContractError("contrastive loss needs at least 2 rows (the denominator is empty otherwise)")
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    logits = scale(cosine_sim_matrix(z1, z2), 1.0 / float(tau))
    eye = np.eye(n)
    denom_mask = np.ones((n, n)) if include_positive_in_denominator else 1.0 - eye
    log_denom = _masked_logsumexp_rows(logits, denom_mask)
    positive = row_sum(mul(logits, Tensor(eye)))
    return scale(total_sum(sub(log_denom, positive)), 1.0 / n)


def pretrain(g: GraphData, cfg: PretrainConfig) -> tuple[EncoderParams, list[float]]:
    """Full-batch contrastive training; returns frozen encoders + loss history."""
    if g.n_nodes < 2:
        raise ContractError("pre-training needs at least 2 nodes")
    params = init_encoder_params(g.features.cols, cfg.hidden_dim, cfg.seed)
    a_norm = gcn_normalize(g.adjacency)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        epoch_seed = derive_seed(cfg.seed, epoch)
        with Tape() as tape:
            z1 = mlp_forward(g.features, params, "train", epoch_seed, cfg.dropout)
            z2 = gnn_forward(g.features, a_norm, params, "train", epoch_seed, cfg.dropout)
            loss = ntxent_pretrain_loss(z1, z2, cfg.tau, cfg.include_positive_in_denominator)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"pre-training loss became non-finite at epoch {epoch}")
        backward(tape, loss)
        adam_step(parameters(params), opt)
        losses.append(value)
    return freeze(params), losses


def write_loss_log(path, losses) -> None:
    """Tab-separated epoch/loss pairs, one line per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        for epoch, value in enumerate(losses):
            fh.write(f"{epoch}\t{value!r}\n")
