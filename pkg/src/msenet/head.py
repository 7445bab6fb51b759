"""Prototype construction, per-stage distances and the softmax classifier.

Shapes used throughout:
    stage vectors   list of 5 tensors, entry p is (B, C_p)
    prototype bank  list of 5 tensors, entry p is (N, C_p)
    stage distances (Q, N, 5)
    aggregated      (Q, N)
"""

from __future__ import annotations

import warnings
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

DEFAULT_WEIGHT_INIT = (1.0, 1.1, 1.2, 1.3, 1.4)
LOSS_EPS = 1e-12


class DivergenceWarning(RuntimeWarning):
    """A query assigned (numerically) zero probability to its true class."""


def compute_prototypes(support_vectors: Sequence[torch.Tensor], labels: torch.Tensor, n_way: int) -> list[torch.Tensor]:
    """Per-class mean of the support vectors at every stage.

    Every class in ``0..n_way-1`` must contribute the same number of vectors.
    """
    labels = torch.as_tensor(labels)
    counts = torch.bincount(labels, minlength=n_way)
    if counts.numel() != n_way or (counts != counts[0]).any() or counts[0] == 0:
        raise ShapeError(f"support set is ragged: per-class counts {counts.tolist()} for {n_way} classes")
    k = int(counts[0])
    order = torch.argsort(labels, stable=True)
    bank = []
    for v in support_vectors:
        if v.shape[0] != labels.shape[0]:
            raise ShapeError(f"{v.shape[0]} support vectors but {labels.shape[0]} labels")
        bank.append(v[order].view(n_way, k, -1).mean(dim=1))
    return bank


def stage_distances(query_vectors: Sequence[torch.Tensor], bank: Sequence[torch.Tensor],
                    squared: bool = False) -> torch.Tensor:
    """Euclidean distance from every query to every prototype at each stage, (Q, N, S)."""
    if len(query_vectors) != len(bank):
        raise ShapeError(f"{len(query_vectors)} query stages vs {len(bank)} prototype stages")
    out = []
    for p, (q, c) in enumerate(zip(query_vectors, bank), start=1):
        if q.shape[1] != c.shape[1]:
            raise ShapeError(f"stage {p}: query dim {q.shape[1]} != prototype dim {c.shape[1]}")
        diff = q.unsqueeze(1) - c.unsqueeze(0)
        sq = diff.pow(2).sum(dim=2)
        out.append(sq if squared else torch.linalg.vector_norm(diff, dim=2))
    return torch.stack(out, dim=2)


def aggregate_distances(dt: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """``d[i, j] = sum_p w[p] * dt[i, j, p]``."""
    if dt.shape[-1] != w.shape[0]:
        raise ShapeError(f"{dt.shape[-1]} stage distances but {w.shape[0]} weights")
    return dt @ w


def class_posterior(aggregated: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of negated distances."""
    return torch.softmax(-aggregated, dim=-1)


def log_posterior(aggregated: torch.Tensor) -> torch.Tensor:
    return F.log_softmax(-aggregated, dim=-1)


def episode_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = LOSS_EPS) -> torch.Tensor:
    """Mean negative log-probability of the true class.

    Probabilities below ``eps`` are clamped and a ``DivergenceWarning`` is
    emitted.
    """
    labels = torch.as_tensor(labels, device=probs.device)
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(f"labels must lie in 0..{probs.shape[1] - 1}")
    p_true = probs.gather(1, labels.view(-1, 1)).squeeze(1)
    if (p_true < eps).any():
        warnings.warn(f"{int((p_true < eps).sum())} queries have true-class probability < {eps}",
                      DivergenceWarning, stacklevel=2)
        p_true = p_true.clamp_min(eps)
    return -torch.log(p_true).mean()


def predict(aggregated: torch.Tensor) -> torch.Tensor:
    """Nearest class per query; ties go to the lowest class index."""
    return torch.argmin(aggregated, dim=-1)


class StageWeightHead(nn.Module):
    """Holds the five stage weights ``w`` and a mask of the active stages.

    ``w`` is a parameter when ``learnable`` and a buffer otherwise; either way
    it serialises as ``head.w`` inside a model.
    """

    def __init__(self, w_init: Sequence[float] = DEFAULT_WEIGHT_INIT, stages: Sequence[int] = (1, 2, 3, 4, 5),
                 learnable: bool = True, squared: bool = False):
        super().__init__()
        if len(w_init) != 5:
            raise ShapeError(f"need 5 stage weights, got {len(w_init)}")
        w = torch.tensor([float(x) for x in w_init])
        if learnable:
            self.w = nn.Parameter(w)
        else:
            self.register_buffer("w", w)
        self.register_buffer("stage_mask", torch.tensor([1.0 if p in stages else 0.0 for p in range(1, 6)]))
        self.squared = squared

    @property
    def effective_weights(self) -> torch.Tensor:
        return self.w * self.stage_mask

    def forward(self, support_vectors, support_labels, query_vectors, n_way: int):
        """Per-stage distances (Q, N, 5) and their weighted sum (Q, N)."""
        bank = compute_prototypes(support_vectors, support_labels, n_way)
        dt = stage_distances(query_vectors, bank, squared=self.squared)
        return dt, aggregate_distances(dt, self.effective_weights.to(dt.dtype))
