"""The full classifier: backbone taps, stage attention and the weighted metric head."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .attention import StageAttentionSet, attend_all_stages
from .backbone import MultiScaleBackbone, count_parameters
from .head import DEFAULT_WEIGHT_INIT, StageWeightHead


class MSENet(nn.Module):
    """Multi-scale prototypical classifier.

    Ablation switches:
      ``multiscale=False``        only stage 5 contributes (weight fixed to 1 unless learnable)
      ``learnable_weight=False``  stage weights are a fixed buffer
      ``self_attention=False``    no attention parameters; stages are plain GAP
    """

    def __init__(self, backbone: MultiScaleBackbone, *, multiscale: bool = True, learnable_weight: bool = True,
                 self_attention: bool = True, w_init: Sequence[float] = DEFAULT_WEIGHT_INIT,
                 gamma_init: float = 0.2, reduction: int = 8, split_gamma: bool = False,
                 freeze_gamma: bool = False, distance: str = "euclidean", seed: int = 0):
        super().__init__()
        self.backbone = backbone
        self.multiscale = multiscale
        self.learnable_weight = learnable_weight
        self.self_attention = self_attention
        stages = (1, 2, 3, 4, 5) if multiscale else (5,)

        self.attn = None
        if self_attention:
            self.attn = StageAttentionSet(backbone.channels, stages, reduction, gamma_init, split_gamma, seed)
            if freeze_gamma:
                for mod in self.attn.values():
                    for g in (mod.gamma, mod.gamma_query):
                        if g is not None:
                            g.requires_grad_(False)

        w = list(w_init) if multiscale else [0.0, 0.0, 0.0, 0.0, 1.0]
        self.head = StageWeightHead(w, stages, learnable_weight, squared=distance == "squared")

    @property
    def variant(self) -> str:
        return self.backbone.variant

    @property
    def w(self) -> torch.Tensor:
        return self.head.w

    @property
    def stage_weights(self) -> torch.Tensor:
        return self.head.effective_weights

    def toggles(self) -> dict[str, bool]:
        return {"multiscale": self.multiscale, "learnable_weight": self.learnable_weight,
                "self_attention": self.self_attention}

    def num_parameters(self) -> int:
        return count_parameters(self)

    def embed(self, images: torch.Tensor, query_mask: torch.Tensor | None = None) -> list[torch.Tensor]:
        """Five pooled (optionally attended) stage vectors per image."""
        return attend_all_stages(self.backbone(images), self.attn, query_mask)

    def episode_distances(self, support, support_labels, query, n_way: int):
        """Per-stage distances (Q, N, 5) and their weighted sum (Q, N)."""
        n_s = support.shape[0]
        images = torch.cat([support, query])
        mask = torch.arange(images.shape[0]) >= n_s
        vecs = self.embed(images, mask)
        return self.head([v[:n_s] for v in vecs], support_labels, [v[n_s:] for v in vecs], n_way)

    def forward(self, episode) -> torch.Tensor:
        _, agg = self.episode_distances(episode.support, episode.support_labels, episode.query, episode.n_way)
        return agg
