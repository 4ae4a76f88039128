"""Anatomy-conditioned latent VQ-VAE for normality modeling.

Transformer token encoder/decoder, a per-anatomy partitioned codebook updated
by EMA from normal samples only, the reconstruction + commitment loss, and
reconstruction-error anomaly scoring. Codebook vectors never receive
gradients; they change only through `Codebook.ema_update`.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn


class NormalityError(ValueError):
    pass


@dataclass
class VQVAEConfig:
    anatomy_count: int = 5
    token_dim: int = 128       # D of the visual tokens
    code_dim: int = 64         # C
    codes_per_anatomy: int = 16  # K
    heads: int = 4
    layers: int = 2
    decay: float = 0.99        # EMA gamma
    epsilon: float = 1e-5
    beta: float = 0.25


@dataclass
class Reconstruction:
    q: torch.Tensor                 # (L, D) reconstructed tokens
    selected_indices: torch.Tensor  # (L,) codebook indices within the partition
    residual_energy: float          # mean over tokens of ||f - q||^2


class Codebook(nn.Module):
    """M x K x C prototype store with EMA accumulators, one partition per anatomy."""

    def __init__(self, config: VQVAEConfig):
        super().__init__()
        M, K, C = config.anatomy_count, config.codes_per_anatomy, config.code_dim
        self.decay = config.decay
        self.epsilon = config.epsilon
        self.register_buffer("vectors", 0.1 * torch.randn(M, K, C))
        self.register_buffer("ema_counts", torch.zeros(M, K))
        self.register_buffer("ema_sums", torch.zeros(M, K, C))
        self._sync_vectors()

    def _sync_vectors(self):
        self.vectors.copy_(self.ema_sums / (self.ema_counts.unsqueeze(-1) + self.epsilon))

    def seed_from_latents(self, latents_per_anatomy: dict):
        """Initialize each partition from sampled normal latents (count 1 each)."""
        with torch.no_grad():
            for j, z in latents_per_anatomy.items():
                K = self.vectors.shape[1]
                if z.shape[0] < K:
                    reps = (K + z.shape[0] - 1) // z.shape[0]
                    z = z.repeat(reps, 1)[:K]
                self.ema_sums[j] = z[:K].detach()
                self.ema_counts[j] = 1.0
            self._sync_vectors()

    def lookup(self, z: torch.Tensor, anatomy_id: int):
        """Nearest codebook vector within the anatomy's partition.

        Ties break toward the lowest index (exact elementwise distances)."""
        if not torch.isfinite(z).all():
            raise NormalityError("non-finite latents")
        part = self.vectors[anatomy_id]                       # (K, C)
        d = (z.unsqueeze(-2) - part).pow(2).sum(-1)           # (..., K)
        # explicit first-minimum selection so ties break toward the lowest index
        K = part.shape[0]
        is_min = d <= d.min(dim=-1, keepdim=True).values
        rank = torch.arange(K, device=d.device).expand_as(d)
        idx = torch.where(is_min, rank, torch.full_like(rank, K)).min(dim=-1).values
        return part[idx], idx

    def ema_update(self, assignments):
        """assignments: iterable of (anatomy_id, indices (L,), latents (L, C)),
        drawn from normal samples only. All codes decay each call; unassigned
        codes drift toward the smoothing floor."""
        with torch.no_grad():
            counts = torch.zeros_like(self.ema_counts)
            sums = torch.zeros_like(self.ema_sums)
            for anatomy_id, idx, z in assignments:
                counts[anatomy_id].index_add_(0, idx, torch.ones_like(idx, dtype=counts.dtype))
                sums[anatomy_id].index_add_(0, idx, z.detach().to(sums.dtype))
            self.ema_counts.mul_(self.decay).add_(counts, alpha=1.0 - self.decay)
            self.ema_sums.mul_(self.decay).add_(sums, alpha=1.0 - self.decay)
            self._sync_vectors()


def quantize(z: torch.Tensor, codebook: Codebook, anatomy_id: int):
    """Straight-through nearest-neighbor quantization within one partition.

    Returns (quantized latents with gradient pass-through, selected vectors
    without pass-through, indices)."""
    e_sel, idx = codebook.lookup(z, anatomy_id)
    z_q = z + (e_sel - z).detach()
    return z_q, e_sel, idx


class TokenAutoencoder(nn.Module):
    """Transformer token encoder/decoder with a learnable condition token per
    anatomy, prepended before self-attention and stripped from the output."""

    def __init__(self, config: VQVAEConfig):
        super().__init__()
        self.config = config
        C, D = config.code_dim, config.token_dim
        self.condition = nn.Parameter(0.02 * torch.randn(config.anatomy_count, C))
        self.in_proj = nn.Linear(D, C)
        self.out_proj = nn.Linear(C, D)

        def blocks():
            layer = nn.TransformerEncoderLayer(C, config.heads, dim_feedforward=2 * C,
                                               batch_first=True, dropout=0.0)
            return nn.TransformerEncoder(layer, config.layers)

        self.encoder = blocks()
        self.decoder = blocks()

    def _run(self, net, x, anatomy_ids, padding_mask):
        # x (N, L, C); prepend the condition token, run, strip it again
        cond = self.condition[anatomy_ids].unsqueeze(1)       # (N, 1, C)
        h = torch.cat([cond, x], dim=1)
        if padding_mask is not None:
            pad = torch.cat([torch.zeros_like(padding_mask[:, :1]), padding_mask], dim=1)
        else:
            pad = None
        out = net(h, src_key_padding_mask=pad)
        return out[:, 1:]

    def encode(self, tokens: torch.Tensor, anatomy_ids, padding_mask=None) -> torch.Tensor:
        """tokens (N, L, D) -> latents (N, L, C)."""
        anatomy_ids = torch.as_tensor(anatomy_ids)
        if anatomy_ids.ndim == 0:
            anatomy_ids = anatomy_ids.unsqueeze(0)
        return self._run(self.encoder, self.in_proj(tokens), anatomy_ids, padding_mask)

    def decode(self, z_q: torch.Tensor, anatomy_ids, padding_mask=None) -> torch.Tensor:
        """quantized latents (N, L, C) -> reconstructed tokens (N, L, D)."""
        anatomy_ids = torch.as_tensor(anatomy_ids)
        if anatomy_ids.ndim == 0:
            anatomy_ids = anatomy_ids.unsqueeze(0)
        return self.out_proj(self._run(self.decoder, z_q, anatomy_ids, padding_mask))


def encode_tokens(model: TokenAutoencoder, tokens, condition_anatomy_id: int, anatomy_id: int):
    """Single-sequence encode with an anatomy-id consistency check."""
    if condition_anatomy_id != anatomy_id:
        raise NormalityError("anatomy_id mismatch between tokens and condition token")
    return model.encode(tokens.unsqueeze(0), [anatomy_id])[0]


def vqvae_loss(f: torch.Tensor, q: torch.Tensor, z: torch.Tensor,
               e_sel: torch.Tensor, beta: float = 0.25) -> torch.Tensor:
    """Reconstruction plus commitment for one (sample, anatomy) entry.

    Sum of squares per token, averaged over the token sequence. Codebook
    vectors are detached; EMA owns them."""
    if f.shape != q.shape or z.shape != e_sel.shape:
        raise NormalityError("shape mismatch in vqvae_loss inputs")
    recon = (f - q).pow(2).sum(-1).mean()
    commit = (e_sel.detach() - z).pow(2).sum(-1).mean()
    return recon + beta * commit


def vqvae_batch_loss(entries, beta: float = 0.25) -> torch.Tensor:
    """Average vqvae_loss over normal entries; errors if there are none."""
    losses = [vqvae_loss(f, q, z, e, beta) for f, q, z, e in entries]
    if not losses:
        raise NormalityError("batch contains no normal entries")
    return torch.stack(losses).mean()


def masked_entry_losses(f, q, z, e_sel, padding_mask, beta: float = 0.25):
    """Per-sequence vqvae_loss over a padded batch; padded tokens are ignored.

    f, q: (N, L, D); z, e_sel: (N, L, C); padding_mask (N, L) True = pad."""
    real = (~padding_mask).to(f.dtype)
    denom = real.sum(1).clamp(min=1)
    recon = ((f - q).pow(2).sum(-1) * real).sum(1) / denom
    commit = ((e_sel.detach() - z).pow(2).sum(-1) * real).sum(1) / denom
    return recon + beta * commit


def reconstruct(model: TokenAutoencoder, codebook: Codebook, tokens: torch.Tensor,
                anatomy_id: int) -> Reconstruction:
    """Full encode -> quantize -> decode pass for one token sequence (L, D)."""
    z = model.encode(tokens.unsqueeze(0), [anatomy_id])[0]
    z_q, _, idx = quantize(z, codebook, anatomy_id)
    q = model.decode(z_q.unsqueeze(0), [anatomy_id])[0]
    energy = (tokens - q).pow(2).sum(-1).mean()
    return Reconstruction(q=q, selected_indices=idx, residual_energy=float(energy.detach()))


def anomaly_score(model: TokenAutoencoder, codebook: Codebook, tokens: torch.Tensor,
                  anatomy_id: int) -> float:
    """Residual energy of the reconstruction pass; high means abnormal."""
    with torch.no_grad():
        return reconstruct(model, codebook, tokens, anatomy_id).residual_energy
