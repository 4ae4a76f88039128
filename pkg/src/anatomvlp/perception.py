"""Discrepancy-aware fusion of original tokens with their VQ-VAE reconstructions.

Residual MLP over the tokenwise concatenation, with a zero-initialized output
layer so the fused path is the identity at the start of fine-tuning.
"""

import torch
import torch.nn as nn


class PerceptionError(ValueError):
    pass


class DiscrepancyFusion(nn.Module):
    def __init__(self, token_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(2 * token_dim, 2 * token_dim),
            nn.ReLU(),
            nn.Linear(2 * token_dim, token_dim),
        )
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, f: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        """f, q: (..., L, D) matched per token; returns fused tokens (..., L, D)."""
        if f.shape != q.shape:
            raise PerceptionError("original and reconstructed tokens must be shape-aligned")
        return f + self.mlp(torch.cat([f, q], dim=-1))
