"""Classifier head, threshold decoding, and the training losses.

The classifier emits one logit per relation plus a learned threshold (TH)
class at the last index.  A relation is predicted for a cell exactly when its
logit strictly exceeds the TH logit.  The classification loss ranks positive
classes above TH and TH above negative classes; the reconstruction loss ties
the label distributions of the original-path and mask-path matrices together
with a symmetrized KL divergence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch
from torch import Tensor, nn

NEG_INF = -1e30
PROB_FLOOR = 1e-12


@dataclass
class LabelScores:
    """Per-cell class logits; index R (the last) is the TH class."""

    logits: Tensor  # (N_e, N_e, R + 1)
    valid: Tensor  # (N_e, N_e) bool; False on the diagonal

    @property
    def num_relations(self) -> int:
        return self.logits.shape[-1] - 1


@dataclass
class LossBreakdown:
    recon: Tensor | float
    cls: Tensor | float
    alpha: float
    beta: float
    total: Tensor | float

    def detached(self) -> "LossBreakdown":
        def value(x):
            return float(x.detach()) if isinstance(x, Tensor) else float(x)

        return LossBreakdown(
            recon=value(self.recon),
            cls=value(self.cls),
            alpha=self.alpha,
            beta=self.beta,
            total=value(self.total),
        )


class Classifier(nn.Module):
    """Single affine layer from pair features to R + 1 logits."""

    def __init__(self, pair_dim: int, num_relations: int):
        super().__init__()
        self.linear = nn.Linear(pair_dim, num_relations + 1)
        self.num_relations = num_relations

    def forward(self, corrected: Tensor, valid: Tensor) -> LabelScores:
        return LabelScores(logits=self.linear(corrected), valid=valid)


def _triple_keys(gold: Iterable) -> list[tuple[int, int, int]]:
    keys = []
    for item in gold:
        if hasattr(item, "key"):
            keys.append(item.key())
        else:
            h, t, r = item
            keys.append((int(h), int(t), int(r)))
    return keys


def gold_label_tensor(
    gold: Iterable, num_entities: int, num_relations: int, device=None, dtype=None
) -> Tensor:
    """(N_e, N_e, R) one-hot positives from gold (head, tail, relation) keys."""
    labels = torch.zeros(num_entities, num_entities, num_relations, device=device, dtype=dtype)
    for h, t, r in _triple_keys(gold):
        labels[h, t, r] = 1.0
    return labels


def decode(scores: LabelScores) -> set[tuple[int, int, int]]:
    """Triples (s, o, r) for every valid cell whose relation logit strictly
    exceeds the TH logit; ties are negative."""
    r_count = scores.num_relations
    th = scores.logits[..., r_count : r_count + 1]
    positive = (scores.logits[..., :r_count] > th) & scores.valid.unsqueeze(-1)
    out = set()
    for s, o, r in torch.nonzero(positive).tolist():
        out.add((s, o, r))
    return out


def loss_atl(scores: LabelScores, gold: Iterable | Tensor) -> Tensor:
    """Adaptive-threshold classification loss, averaged over valid cells.

    Per cell with positive set P and negative set N (the remaining
    relations): the positive term scores each r in P against softmax over
    P + {TH}; the threshold term scores TH against softmax over N + {TH}.
    ``gold`` is an iterable of (head, tail, relation) triples or an already
    built (N_e, N_e, R) one-hot tensor.
    """
    logits = scores.logits
    n, r_count = logits.shape[0], scores.num_relations
    if isinstance(gold, Tensor):
        positives = gold.to(dtype=logits.dtype)
    else:
        positives = gold_label_tensor(gold, n, r_count, device=logits.device, dtype=logits.dtype)
    th_onehot = torch.zeros_like(logits)
    th_onehot[..., r_count] = 1.0

    pos_member = torch.cat([positives, torch.ones_like(positives[..., :1])], dim=-1)
    pos_logits = logits.masked_fill(pos_member == 0, NEG_INF)
    pos_terms = torch.log_softmax(pos_logits, dim=-1)
    loss_pos = -(pos_terms * torch.cat([positives, torch.zeros_like(positives[..., :1])], dim=-1)).sum(-1)

    neg_member = torch.cat([1.0 - positives, torch.ones_like(positives[..., :1])], dim=-1)
    neg_logits = logits.masked_fill(neg_member == 0, NEG_INF)
    loss_th = -(torch.log_softmax(neg_logits, dim=-1) * th_onehot).sum(-1)

    cell_loss = (loss_pos + loss_th)[scores.valid]
    if cell_loss.numel() == 0:
        return logits.sum() * 0.0
    return cell_loss.mean()


def cell_distributions(scores: LabelScores) -> Tensor:
    """Softmax over all R + 1 classes, per cell."""
    return torch.softmax(scores.logits, dim=-1)


def loss_recon(p: Tensor, q: Tensor, valid: Tensor) -> Tensor:
    """Mean symmetrized KL divergence between corresponding cell
    distributions, over the given valid cells (natural log, probabilities
    floored before the log for stability)."""
    if p.shape != q.shape:
        raise ValueError(f"distribution fields must align, got {tuple(p.shape)} vs {tuple(q.shape)}")
    log_p = torch.log(p.clamp_min(PROB_FLOOR))
    log_q = torch.log(q.clamp_min(PROB_FLOOR))
    kl_pq = (p * (log_p - log_q)).sum(-1)
    kl_qp = (q * (log_q - log_p)).sum(-1)
    sym = 0.5 * (kl_pq + kl_qp)
    sym = sym[valid]
    if sym.numel() == 0:
        return p.sum() * 0.0
    return sym.mean()


def total_loss(
    recon: Tensor | float, cls: Tensor | float, alpha: float = 1.0, beta: float = 1.0
) -> LossBreakdown:
    return LossBreakdown(recon=recon, cls=cls, alpha=alpha, beta=beta, total=alpha * recon + beta * cls)
