"""Supervised contrastive, pairwise contrastive and cross-entropy losses.

The torch functions drive training through autograd. The ``*_and_grad``
functions are float64 NumPy versions with closed-form gradients.
"""

from __future__ import annotations

import numpy as np
import torch

DEFAULT_TEMPERATURE = 0.07
_NORM_TOL = 1e-5


def _check_supcon_inputs(n: int, labels_len: int, temperature: float):
    if n < 2:
        raise ValueError("SupCon needs at least two samples")
    if labels_len != n:
        raise ValueError("z and labels differ in length")
    if not 0 < temperature <= 10:
        raise ValueError(f"temperature must lie in (0, 10], got {temperature}")


def supcon_loss(z: torch.Tensor, labels, temperature: float = DEFAULT_TEMPERATURE,
                reduction: str = "sum", check_norm: bool = True) -> torch.Tensor:
    """Supervised contrastive loss over unit-norm embeddings ``z`` (N, D).

    For each anchor i with P_i > 0 same-label partners::

        l_i = -1/P_i * sum_{j != i, y_j = y_i} log( exp(z_i.z_j/t) / sum_{k != i} exp(z_i.z_k/t) )

    Anchors without partners contribute 0. ``reduction="sum"`` adds the
    l_i; ``"mean"`` averages them over anchors that have partners.
    """
    labels = torch.as_tensor(labels).reshape(-1)
    n = z.shape[0]
    _check_supcon_inputs(n, len(labels), temperature)
    if not torch.isfinite(z).all():
        raise ValueError("non-finite embeddings")
    if check_norm:
        norms = z.detach().norm(dim=1)
        if (norms - 1).abs().max() > _NORM_TOL:
            raise ValueError("embeddings must be L2-normalised")
    sim = z @ z.T / temperature
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]) & ~self_mask
    n_pos = pos.sum(1)
    pos_log_prob = log_prob.masked_fill(~pos, 0.0).sum(1)
    has_pos = n_pos > 0
    per_anchor = torch.where(has_pos, -pos_log_prob / n_pos.clamp(min=1), torch.zeros_like(pos_log_prob))
    if reduction == "sum":
        return per_anchor.sum()
    if reduction == "mean":
        return per_anchor.sum() / has_pos.sum().clamp(min=1)
    raise ValueError(f"unknown reduction {reduction!r}")


def supcon_loss_and_grad(z: np.ndarray, labels, temperature: float = DEFAULT_TEMPERATURE,
                         reduction: str = "sum", check_norm: bool = True) -> tuple[float, np.ndarray]:
    """Float64 SupCon loss and its exact gradient with respect to ``z``.

    With s_ik = z_i.z_k/t and p_ik the softmax of s_i. over k != i, the loss
    depends on s through G_ik = w_i (p_ik - [pos_ik]/P_i), so
    dL/dz = (G + G^T) z / t.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    n = z.shape[0]
    _check_supcon_inputs(n, len(labels), temperature)
    if not np.isfinite(z).all():
        raise ValueError("non-finite embeddings")
    if check_norm and np.abs(np.linalg.norm(z, axis=1) - 1).max() > _NORM_TOL:
        raise ValueError("embeddings must be L2-normalised")
    sim = z @ z.T / temperature
    np.fill_diagonal(sim, -np.inf)
    row_max = sim.max(axis=1, keepdims=True)
    lse = row_max + np.log(np.exp(sim - row_max).sum(axis=1, keepdims=True))
    log_prob = sim - lse
    prob = np.exp(log_prob)
    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    n_pos = pos.sum(1)
    has_pos = n_pos > 0
    safe = np.maximum(n_pos, 1)
    per_anchor = np.where(has_pos, -np.where(pos, log_prob, 0.0).sum(1) / safe, 0.0)
    G = (prob - pos / safe[:, None]) * has_pos[:, None]
    np.fill_diagonal(G, 0.0)
    grad = (G + G.T) @ z / temperature
    loss = per_anchor.sum()
    if reduction == "mean":
        k = max(int(has_pos.sum()), 1)
        loss, grad = loss / k, grad / k
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return float(loss), grad


def pairwise_contrastive_loss(u, v, same_class: bool, margin: float = 1.0) -> float:
    """Squared distance for same-class pairs, hinge ``max(0, margin - d^2)`` otherwise."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError("u and v must have equal dimensions")
    d2 = float(np.sum((u - v) ** 2))
    return d2 if same_class else max(0.0, margin - d2)


def _check_ce(n_classes: int, labels):
    if len(labels) and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("label outside logit width")


def cross_entropy_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    _check_ce(logits.shape[1], labels)
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -log_prob.gather(1, labels[:, None]).mean()


def cross_entropy_and_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    _check_ce(logits.shape[1], labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_prob = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    b = len(labels)
    loss = -log_prob[np.arange(b), labels].mean()
    grad = np.exp(log_prob)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b
