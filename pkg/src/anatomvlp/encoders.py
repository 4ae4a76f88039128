"""Vision and text towers, query-token cross-attention, momentum copy.

The vision encoder is a small 3D residual CNN with GroupNorm (batch-free) and a
fixed total stride of 8. Text is a small trainable transformer over the closed
template vocabulary.
"""

import copy
import re
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .phantom import ANATOMY_NAMES, DEFAULT_ANOMALY_TYPES


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    anatomy_count: int = 5
    stage_channels: tuple = (16, 32, 64)
    token_dim: int = 128          # D, channel dim of visual tokens
    query_dim: int = 128          # D_e
    heads: int = 4
    queries_per_anatomy: int = 1
    use_positional: bool = True
    grid_shape: tuple = (8, 8, 4)  # feature grid of the full volume, bounds positional table
    vocab_extra: tuple = ()
    text_layers: int = 2
    text_dim: int = 128
    momentum: float = 0.99
    stride: int = 8

    def __post_init__(self):
        if self.query_dim % self.heads != 0:
            raise EncoderError("query_dim must be divisible by heads")


class ResidualBlock3d(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(4, channels)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


class VolumeEncoder(nn.Module):
    """Residual 3D CNN, total stride 8; output channels = token_dim."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        c1, c2, c3 = config.stage_channels
        self.stride = config.stride
        self.stem = nn.Sequential(
            nn.Conv3d(1, c1, 3, stride=2, padding=1), nn.GroupNorm(4, c1), nn.ReLU(),
        )
        self.pool = nn.MaxPool3d(2)
        self.stage1 = ResidualBlock3d(c1)
        self.down2 = nn.Sequential(nn.Conv3d(c1, c2, 3, stride=2, padding=1), nn.GroupNorm(4, c2), nn.ReLU())
        self.stage2 = ResidualBlock3d(c2)
        self.stage3 = nn.Sequential(nn.Conv3d(c2, c3, 3, padding=1), nn.GroupNorm(4, c3), nn.ReLU(),
                                    ResidualBlock3d(c3))
        self.head = nn.Sequential(nn.Conv3d(c3, config.token_dim, 1),
                                  nn.GroupNorm(4, config.token_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 4:
            x = x.unsqueeze(1)
        for d in x.shape[2:]:
            if d % self.stride != 0:
                raise EncoderError(f"input dim {d} not divisible by stride {self.stride}")
        h = self.stem(x)
        h = self.pool(h)
        h = self.stage1(h)
        h = self.stage2(self.down2(h))
        h = self.stage3(h)
        return self.head(h)


class AxisPositionalEmbedding(nn.Module):
    """Learned per-axis embeddings over feature-grid coordinates, summed."""

    def __init__(self, grid_shape, dim):
        super().__init__()
        self.emb = nn.ParameterList([nn.Parameter(0.02 * torch.randn(g, dim)) for g in grid_shape])

    def forward(self, tokens: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        # tokens (..., L, D), coords (..., L, 3) integer grid cells
        pos = self.emb[0][coords[..., 0]] + self.emb[1][coords[..., 1]] + self.emb[2][coords[..., 2]]
        return tokens + pos


class QueryAggregator(nn.Module):
    """Per-anatomy learnable query tokens pooled over token sequences by
    single-block multi-head cross-attention, projected and L2-normalized."""

    def __init__(self, config: EncoderConfig, token_dim=None):
        super().__init__()
        d_in = token_dim if token_dim is not None else config.token_dim
        d = config.query_dim
        self.heads = config.heads
        self.queries = nn.Parameter(0.02 * torch.randn(
            config.anatomy_count, config.queries_per_anatomy, d))
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d_in, d)
        self.wv = nn.Linear(d_in, d)
        self.out = nn.Linear(d, d)

    def forward(self, tokens: torch.Tensor, anatomy_ids: torch.Tensor,
                padding_mask: torch.Tensor = None) -> torch.Tensor:
        """tokens (N, L, D_in); anatomy_ids (N,); padding_mask (N, L) True = pad.
        Returns unit-norm embeddings (N, query_dim)."""
        if tokens.shape[1] < 1:
            raise EncoderError("token count must be >= 1")
        N, L, _ = tokens.shape
        h, d = self.heads, self.queries.shape[-1]
        dh = d // h
        q = self.wq(self.queries[anatomy_ids])                       # (N, nq, d)
        k, v = self.wk(tokens), self.wv(tokens)                      # (N, L, d)
        nq = q.shape[1]
        q = q.view(N, nq, h, dh).transpose(1, 2)                     # (N, h, nq, dh)
        k = k.view(N, L, h, dh).transpose(1, 2)
        v = v.view(N, L, h, dh).transpose(1, 2)
        attn = q @ k.transpose(-1, -2) / dh ** 0.5                   # (N, h, nq, L)
        if padding_mask is not None:
            attn = attn.masked_fill(padding_mask[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        pooled = (attn @ v).transpose(1, 2).reshape(N, nq, d)
        pooled = self.out(pooled).mean(dim=1)                        # (N, d)
        return F.normalize(pooled, dim=-1)


class Vocabulary:
    """Closed word set derived from the report templates."""

    def __init__(self, extra_words=()):
        words = ["the", "is", "unremarkable", "there", "a", "in"]
        words += list(ANATOMY_NAMES) + list(DEFAULT_ANOMALY_TYPES) + list(extra_words)
        self.words = sorted(set(words))
        self.index = {w: i + 1 for i, w in enumerate(self.words)}  # 0 is padding

    def __len__(self):
        return len(self.words) + 1

    def encode(self, sentence: str):
        toks = re.findall(r"[a-z]+", sentence.lower())
        if not toks:
            raise EncoderError(f"empty sentence: {sentence!r}")
        try:
            return [self.index[t] for t in toks]
        except KeyError as e:
            raise EncoderError(f"out-of-vocabulary token {e.args[0]!r}") from None


class TextEncoder(nn.Module):
    """Small transformer producing one feature per input token."""

    def __init__(self, config: EncoderConfig, max_len: int = 32):
        super().__init__()
        self.vocab = Vocabulary(config.vocab_extra)
        d = config.text_dim
        self.embedding = nn.Embedding(len(self.vocab), d, padding_idx=0)
        self.pos = nn.Parameter(0.02 * torch.randn(max_len, d))
        layer = nn.TransformerEncoderLayer(d, config.heads, dim_feedforward=2 * d,
                                           batch_first=True, dropout=0.0)
        self.encoder = nn.TransformerEncoder(layer, config.text_layers)

    def forward(self, token_ids: torch.Tensor, padding_mask: torch.Tensor = None) -> torch.Tensor:
        """token_ids (N, L) int; padding_mask (N, L) True = pad; returns (N, L, D)."""
        if token_ids.shape[-1] < 1:
            raise EncoderError("empty token sequence")
        x = self.embedding(token_ids) + self.pos[: token_ids.shape[-1]]
        return self.encoder(x, src_key_padding_mask=padding_mask)

    def encode_sentences(self, sentences, device=None):
        """Tokenize and pad a list of sentences; returns (ids, padding_mask)."""
        encoded = [self.vocab.encode(s) for s in sentences]
        L = max(len(e) for e in encoded)
        ids = torch.zeros(len(encoded), L, dtype=torch.long, device=device)
        pad = torch.ones(len(encoded), L, dtype=torch.bool, device=device)
        for i, e in enumerate(encoded):
            ids[i, : len(e)] = torch.tensor(e, device=device)
            pad[i, : len(e)] = False
        return ids, pad


class VisionBranch(nn.Module):
    """Encoder + positional embedding + image-side aggregator; the unit the
    momentum copy tracks."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = VolumeEncoder(config)
        self.positional = AxisPositionalEmbedding(config.grid_shape, config.token_dim)
        self.aggregator = QueryAggregator(config)

    def add_positions(self, tokens, coords):
        if not self.config.use_positional:
            return tokens
        return self.positional(tokens, coords)


class MomentumPair:
    """Online tower plus its slow-moving average copy."""

    def __init__(self, online: nn.Module, momentum_coefficient: float = 0.99):
        if not 0.0 <= momentum_coefficient <= 1.0:
            raise EncoderError("momentum coefficient must lie in [0, 1]")
        self.online = online
        self.momentum = copy.deepcopy(online)
        for p in self.momentum.parameters():
            p.requires_grad_(False)
        self.m = momentum_coefficient

    def update(self):
        """momentum <- m * momentum + (1 - m) * online, parameter by parameter."""
        on = dict(self.online.named_parameters())
        mo = dict(self.momentum.named_parameters())
        if on.keys() != mo.keys():
            raise EncoderError("parameter name mismatch between towers")
        with torch.no_grad():
            for name, p in on.items():
                t = mo[name]
                if t.shape != p.shape:
                    raise EncoderError(f"shape mismatch for {name}")
                t.mul_(self.m).add_(p, alpha=1.0 - self.m)
