"""Per-stage self-attention refinement followed by global average pooling.

For a stage map f with L = H*W positions::

    q', k', v' = 1x1 convs of f        (q', k' have C/r channels, v' has C)
    S[i, j]    = q'_i . k'_j
    beta[i, j] = exp(S[i, j]) / sum_i exp(S[i, j])     (columns sum to 1)
    y_j        = gamma * sum_i beta[i, j] v'_i + f_j

Only the pooled vector mean_j(y_j) is consumed downstream. It equals
``gamma * W_v (f @ rho) + mean_j f_j`` with ``rho_i = mean_j beta[i, j]``,
so the model path never materialises y and computes ``rho`` block by
block (see ``attention_mass``). The unfused functions are kept as the
reference path and for inspection.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
from torch.autograd.function import once_differentiable

from .errors import ShapeError

DEFAULT_REDUCTION = 8
DEFAULT_GAMMA = 0.2
# elements of one (images x columns x L) score block; sized for L2 cache
_BLOCK = 1 << 19


def reduced_channels(channels: int, reduction: int = DEFAULT_REDUCTION) -> int:
    return max(1, channels // reduction)


def conv1x1(f: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) x (O, C) -> (B, O, H, W)."""
    if f.shape[1] != weight.shape[1]:
        raise ShapeError(f"1x1 conv expects {weight.shape[1]} input channels, got {f.shape[1]}")
    return torch.einsum("oc,bchw->bohw", weight, f)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Column-normalised attention map, shape (B, L, L), ``beta[b, i, j]``."""
    if q.shape != k.shape:
        raise ShapeError(f"query/key projections differ in shape: {tuple(q.shape)} vs {tuple(k.shape)}")
    scores = torch.bmm(q.flatten(2).transpose(1, 2), k.flatten(2))
    if not torch.isfinite(scores).all():
        raise FloatingPointError("non-finite attention scores; upstream activations have blown up")
    return torch.softmax(scores, dim=1)


def _row_gamma(gamma, batch: int, like: torch.Tensor) -> torch.Tensor:
    gamma = torch.as_tensor(gamma, dtype=like.dtype, device=like.device)
    if gamma.dim() == 0:
        return gamma
    if gamma.shape != (batch,):
        raise ShapeError(f"gamma must be a scalar or have shape ({batch},), got {tuple(gamma.shape)}")
    return gamma.view(batch, 1, 1, 1)


def apply_attention(f: torch.Tensor, beta: torch.Tensor, v: torch.Tensor, gamma) -> torch.Tensor:
    """``y_j = gamma * sum_i beta[i, j] v_i + f_j``; same shape as ``f``."""
    b, c, h, w = f.shape
    if v.shape != f.shape:
        raise ShapeError(f"value projection {tuple(v.shape)} must match the feature map {tuple(f.shape)}")
    if beta.shape != (b, h * w, h * w):
        raise ShapeError(f"attention map must be ({b}, {h * w}, {h * w}), got {tuple(beta.shape)}")
    attended = torch.bmm(v.flatten(2), beta).view(b, c, h, w)
    return _row_gamma(gamma, b, f) * attended + f


def global_avg_pool(y: torch.Tensor) -> torch.Tensor:
    return y.mean(dim=(2, 3))


class _AttentionMass(torch.autograd.Function):
    """rho[b, i] = mean_j softmax_i(q_i . k_j), computed in cache-sized blocks.

    Saves only q, k and the per-column log-normaliser; the backward pass
    recomputes each block of beta. With g = dL/drho / L and
    c_j = sum_i beta[i, j] g_i the score gradient is
    beta[i, j] (g_i - c_j), which is contracted against k and q without
    materialising it.
    """

    @staticmethod
    def forward(ctx, q, k):
        bsz, _, n = q.shape
        rho = q.new_zeros(bsz, n)
        lse = q.new_empty(bsz, n)
        imgs, cols = _blocks(bsz, n)
        for b0 in range(0, bsz, imgs):
            qb = q[b0:b0 + imgs]
            for j0 in range(0, n, cols):
                kb = k[b0:b0 + imgs, :, j0:j0 + cols]
                e = torch.bmm(kb.transpose(1, 2), qb)  # (b, J, L): row j holds S[:, j]
                m = e.amax(dim=2, keepdim=True)
                e.sub_(m).exp_()
                z = e.sum(dim=2, keepdim=True)
                lse[b0:b0 + imgs, j0:j0 + cols] = (m + torch.log(z)).squeeze(2)
                rho[b0:b0 + imgs] += torch.bmm(z.reciprocal_().transpose(1, 2), e).squeeze(1)
        rho /= n
        ctx.save_for_backward(q, k, lse)
        return rho

    @staticmethod
    @once_differentiable
    def backward(ctx, grad):
        q, k, lse = ctx.saved_tensors
        bsz, r, n = q.shape
        imgs, cols = _blocks(bsz, n)
        g = (grad / n).unsqueeze(1)  # (B, 1, L)
        qg = torch.cat([q * g, q, g], dim=1)  # (B, 2r+1, L)
        dq = torch.zeros_like(q)
        dk = torch.zeros_like(k)
        for b0 in range(0, bsz, imgs):
            qgb = qg[b0:b0 + imgs]
            for j0 in range(0, n, cols):
                kb = k[b0:b0 + imgs, :, j0:j0 + cols]
                beta_t = torch.baddbmm(-lse[b0:b0 + imgs, j0:j0 + cols].unsqueeze(2),
                                       kb.transpose(1, 2), qgb[:, r:2 * r]).exp_()  # (b, J, L)
                a = torch.bmm(qgb, beta_t.transpose(1, 2))  # (b, 2r+1, J)
                c = a[:, 2 * r:]  # (b, 1, J)
                dk[b0:b0 + imgs, :, j0:j0 + cols] = a[:, :r] - c * a[:, r:2 * r]
                bq = torch.bmm(torch.cat([kb, kb * c], dim=1), beta_t)  # (b, 2r, L)
                dq[b0:b0 + imgs] += g[b0:b0 + imgs] * bq[:, :r] - bq[:, r:]
        return dq, dk


def _blocks(bsz: int, n: int) -> tuple[int, int]:
    cols = max(1, min(n, _BLOCK // n))
    imgs = max(1, min(bsz, _BLOCK // (n * cols)))
    return imgs, cols


def attention_mass(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Average attention each source position receives, shape (B, L)."""
    if q.shape != k.shape:
        raise ShapeError(f"query/key projections differ in shape: {tuple(q.shape)} vs {tuple(k.shape)}")
    return _AttentionMass.apply(q.flatten(2), k.flatten(2))


class StageAttention(nn.Module):
    """Self-attention parameters for one stage: ``wq``, ``wk``, ``wv`` and ``gamma``.

    With ``split_gamma`` a second scalar ``gamma_query`` is used for query
    images while ``gamma`` applies to support images.
    """

    def __init__(self, channels: int, reduction: int = DEFAULT_REDUCTION, gamma: float = DEFAULT_GAMMA,
                 split_gamma: bool = False, generator: torch.Generator | None = None):
        super().__init__()
        self.channels = channels
        r = reduced_channels(channels, reduction)
        bound = 1.0 / math.sqrt(channels)

        def init(shape):
            return nn.Parameter((torch.rand(shape, generator=generator) * 2 - 1) * bound)

        self.wq = init((r, channels))
        self.wk = init((r, channels))
        self.wv = init((channels, channels))
        self.gamma = nn.Parameter(torch.tensor(float(gamma)))
        self.gamma_query = nn.Parameter(torch.tensor(float(gamma))) if split_gamma else None

    def qkv(self, f):
        return conv1x1(f, self.wq), conv1x1(f, self.wk), conv1x1(f, self.wv)

    def row_gamma(self, batch: int, query_mask: torch.Tensor | None):
        if self.gamma_query is None or query_mask is None:
            return self.gamma
        if query_mask.shape != (batch,):
            raise ShapeError(f"query_mask must have shape ({batch},), got {tuple(query_mask.shape)}")
        return torch.where(query_mask, self.gamma_query, self.gamma)

    def refine(self, f, query_mask=None):
        """Attended feature map y (unfused reference path)."""
        q, k, v = self.qkv(f)
        beta = attention_weights(q, k)
        return apply_attention(f, beta, v, self.row_gamma(f.shape[0], query_mask))

    def forward(self, f, query_mask=None):
        """Pooled attended vector, shape (B, C)."""
        if f.shape[1] != self.channels:
            raise ShapeError(f"stage expects {self.channels} channels, got {f.shape[1]}")
        q, k = conv1x1(f, self.wq), conv1x1(f, self.wk)
        rho = attention_mass(q, k)
        mixed = torch.bmm(f.flatten(2), rho.unsqueeze(2)).squeeze(2)  # sum_i f_i rho_i
        attended = mixed @ self.wv.T
        gamma = self.row_gamma(f.shape[0], query_mask)
        if gamma.dim() == 1:
            gamma = gamma.unsqueeze(1)
        return gamma * attended + global_avg_pool(f)


class StageAttentionSet(nn.ModuleDict):
    """One ``StageAttention`` per active stage, keyed ``p1`` .. ``p5``.

    Integer stage indices (1-based) are accepted wherever a key is.
    """

    def __init__(self, channels: Sequence[int], stages: Sequence[int] = (1, 2, 3, 4, 5),
                 reduction: int = DEFAULT_REDUCTION, gamma: float = DEFAULT_GAMMA,
                 split_gamma: bool = False, seed: int = 0):
        if len(channels) != 5:
            raise ValueError(f"expected 5 stage channel counts, got {len(channels)}")
        gen = torch.Generator().manual_seed(seed)
        super().__init__({
            f"p{p}": StageAttention(channels[p - 1], reduction, gamma, split_gamma, gen) for p in stages
        })

    @staticmethod
    def _key(p) -> str:
        if isinstance(p, str):
            return p
        if not 1 <= p <= 5:
            raise IndexError(f"stage index must be in 1..5, got {p}")
        return f"p{p}"

    def __getitem__(self, p) -> StageAttention:
        key = self._key(p)
        if key not in self._modules:
            raise KeyError(f"stage {p} has no attention module")
        return self._modules[key]

    def __contains__(self, p) -> bool:
        return self._key(p) in self._modules


def project_qkv(f: torch.Tensor, params: StageAttentionSet, p: int):
    """1x1 projections (q', k', v') of stage ``p`` (1-based)."""
    return params[p].qkv(f)


def attend_all_stages(pyramid: Sequence[torch.Tensor], params: StageAttentionSet | None,
                      query_mask: torch.Tensor | None = None, fused: bool = True) -> list[torch.Tensor]:
    """Pooled per-stage vectors; stages without attention are plain GAP."""
    if len(pyramid) != 5:
        raise ShapeError(f"expected 5 stage maps, got {len(pyramid)}")
    out = []
    for p, f in enumerate(pyramid, start=1):
        if params is None or p not in params:
            out.append(global_avg_pool(f))
        elif fused:
            out.append(params[p](f, query_mask))
        else:
            out.append(global_avg_pool(params[p].refine(f, query_mask)))
    return out
