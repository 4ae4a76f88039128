"""Full pre-training model: vision branch, text branch, VQ-VAE, fusion.

Batched token plumbing: each (case, anatomy) pair that survives cropping
becomes one padded token sequence; aggregation, quantization and fusion all
run over that flattened axis.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .anatomy import CroppedView, extract_tokens, preprocess
from .encoders import EncoderConfig, QueryAggregator, TextEncoder, VisionBranch
from .normality import Codebook, TokenAutoencoder, VQVAEConfig
from .perception import DiscrepancyFusion


@dataclass
class TokenBatch:
    tokens: torch.Tensor        # (N, Lmax, D)
    coords: torch.Tensor        # (N, Lmax, 3)
    padding_mask: torch.Tensor  # (N, Lmax) True = pad
    anatomy_ids: torch.Tensor   # (N,)
    case_index: torch.Tensor    # (N,) index into the batch of views
    lengths: torch.Tensor       # (N,)


def quantize_batched(z: torch.Tensor, codebook: Codebook, anatomy_ids: torch.Tensor):
    """Straight-through quantization of (N, L, C) latents, each sequence in its
    own anatomy partition; ties break toward the lowest index."""
    part = codebook.vectors[anatomy_ids]                              # (N, K, C)
    d = (z.unsqueeze(2) - part.unsqueeze(1)).pow(2).sum(-1)           # (N, L, K)
    K = part.shape[1]
    is_min = d <= d.min(dim=-1, keepdim=True).values
    rank = torch.arange(K, device=d.device).expand_as(d)
    idx = torch.where(is_min, rank, torch.full_like(rank, K)).min(dim=-1).values
    e_sel = torch.gather(part, 1, idx.unsqueeze(-1).expand(-1, -1, part.shape[-1]))
    z_q = z + (e_sel - z).detach()
    return z_q, e_sel, idx


class AlignmentModel(nn.Module):
    def __init__(self, enc_config: EncoderConfig, vq_config: VQVAEConfig,
                 clip_range=(-1000.0, 1000.0)):
        super().__init__()
        self.enc_config = enc_config
        self.vq_config = vq_config
        self.clip_range = tuple(clip_range)
        self.vision = VisionBranch(enc_config)
        self.text = TextEncoder(enc_config)
        self.report_aggregator = QueryAggregator(enc_config, token_dim=enc_config.text_dim)
        self.vqvae = TokenAutoencoder(vq_config)
        self.codebook = Codebook(vq_config)
        self.fusion = DiscrepancyFusion(enc_config.token_dim)

    # ----- vision side -----

    def collect_tokens(self, views, branch: VisionBranch = None) -> TokenBatch:
        """Encode a list of CroppedView and gather per-anatomy token sequences."""
        branch = branch if branch is not None else self.vision
        device = next(branch.parameters()).device
        lo, hi = self.clip_range
        vols = np.stack([preprocess(v.volume, lo, hi) for v in views])
        x = torch.from_numpy(vols).to(device)
        feats = branch.encoder(x)                                     # (B, D, d, h, w)

        seqs, coords, ids, case_idx = [], [], [], []
        for b, view in enumerate(views):
            for j in view.surviving_ids:
                at = extract_tokens(feats[b], view.masks[j], j)
                seqs.append(at.tokens)
                coords.append(torch.from_numpy(at.cell_coords).to(device))
                ids.append(j)
                case_idx.append(b)
        if not seqs:
            raise ValueError("no anatomy survived cropping in this batch")
        lengths = torch.tensor([s.shape[0] for s in seqs], device=device)
        L = int(lengths.max())
        N, D = len(seqs), seqs[0].shape[1]
        tokens = feats.new_zeros(N, L, D)
        cc = torch.zeros(N, L, 3, dtype=torch.long, device=device)
        pad = torch.ones(N, L, dtype=torch.bool, device=device)
        for i, (s, c) in enumerate(zip(seqs, coords)):
            tokens[i, : s.shape[0]] = s
            cc[i, : s.shape[0]] = c
            pad[i, : s.shape[0]] = False
        return TokenBatch(tokens=tokens, coords=cc, padding_mask=pad,
                          anatomy_ids=torch.tensor(ids, device=device),
                          case_index=torch.tensor(case_idx, device=device),
                          lengths=lengths)

    def reconstruct_tokens(self, tb: TokenBatch, detach: bool = True):
        """VQ-VAE pass over a token batch; returns (z, z_q, e_sel, idx, q)."""
        f = tb.tokens.detach() if detach else tb.tokens
        z = self.vqvae.encode(f, tb.anatomy_ids, tb.padding_mask)
        z_q, e_sel, idx = quantize_batched(z, self.codebook, tb.anatomy_ids)
        q = self.vqvae.decode(z_q, tb.anatomy_ids, tb.padding_mask)
        return z, z_q, e_sel, idx, q

    def image_queries(self, views, branch: VisionBranch = None, use_vsdb: bool = False):
        """Per-anatomy image query embeddings for a list of views.

        Returns (queries (B, M, D_e), validity (B, M) bool, token batch)."""
        branch = branch if branch is not None else self.vision
        tb = self.collect_tokens(views, branch)
        tokens = tb.tokens
        if use_vsdb:
            with torch.no_grad():  # VQ-VAE frozen during fusion fine-tuning
                _, _, _, _, q = self.reconstruct_tokens(tb, detach=True)
            tokens = self.fusion(tokens, q)
        tokens = branch.add_positions(tokens, tb.coords)
        emb = branch.aggregator(tokens, tb.anatomy_ids, tb.padding_mask)  # (N, D_e)

        B, M = len(views), self.enc_config.anatomy_count
        out = emb.new_zeros(B, M, emb.shape[-1])
        validity = torch.zeros(B, M, dtype=torch.bool, device=emb.device)
        out = out.index_put((tb.case_index, tb.anatomy_ids), emb)
        validity[tb.case_index, tb.anatomy_ids] = True
        return out, validity, tb

    # ----- text side -----

    def report_queries(self, sentences_per_case):
        """sentences_per_case: list (length B) of M sentences.

        Returns (queries (B, M, D_e), validity all-True)."""
        B = len(sentences_per_case)
        M = self.enc_config.anatomy_count
        device = next(self.text.parameters()).device
        flat = [s for case in sentences_per_case for s in case]
        ids, pad = self.text.encode_sentences(flat, device=device)
        feats = self.text(ids, pad)
        anatomy_ids = torch.arange(M, device=device).repeat(B)
        emb = self.report_aggregator(feats, anatomy_ids, pad)
        out = emb.view(B, M, -1)
        validity = torch.ones(B, M, dtype=torch.bool, device=device)
        return out, validity

    def prompt_queries(self, sentences, anatomy_ids):
        """Embed free-standing prompt sentences with given anatomy queries."""
        device = next(self.text.parameters()).device
        ids, pad = self.text.encode_sentences(sentences, device=device)
        feats = self.text(ids, pad)
        aid = torch.as_tensor(anatomy_ids, device=device)
        return self.report_aggregator(feats, aid, pad)

    # ----- parameter groups -----

    def parameter_groups(self):
        return {
            "vision": list(self.vision.parameters()),
            "text": list(self.text.parameters()) + list(self.report_aggregator.parameters()),
            "vqvae": list(self.vqvae.parameters()),
            "fusion": list(self.fusion.parameters()),
        }

    def group_modules(self):
        return {
            "vision": [self.vision],
            "text": [self.text, self.report_aggregator],
            "vqvae": [self.vqvae],
            "fusion": [self.fusion],
            "codebook": [self.codebook],
        }


def full_volume_view(case) -> CroppedView:
    """Treat the whole volume as the crop window; every anatomy survives."""
    ids = [j for j in range(case.masks.shape[0]) if case.masks[j].sum() > 0]
    return CroppedView(volume=case.volume, masks=case.masks, surviving_ids=ids,
                       offset=(0, 0, 0))
