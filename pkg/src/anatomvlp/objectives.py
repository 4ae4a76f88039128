"""Contrastive objectives: anatomy-wise image-report alignment and
disease-level visual contrastive learning.

Both losses operate on unit-normalized per-anatomy query embeddings with a
validity mask for organs lost to cropping; invalid entries are excluded from
numerators and denominators alike.
"""

from dataclasses import dataclass

import torch

NEG_INF = float("-inf")


class ObjectiveError(ValueError):
    pass


@dataclass
class AlignmentBatch:
    image_queries: torch.Tensor    # (B, M, D)
    report_queries: torch.Tensor   # (B, M, D)
    validity: torch.Tensor         # (B, M) bool
    temperature: float = 0.07


@dataclass
class DiseaseBatch:
    online_queries: torch.Tensor     # (B, M, D)
    momentum_queries: torch.Tensor   # (B, M, D), no gradient
    labels: torch.Tensor             # (B, M), 1 = abnormal
    validity: torch.Tensor           # (B, M) bool
    temperature: float = 0.07


def alignment_loss(batch: AlignmentBatch) -> torch.Tensor:
    """Per-anatomy InfoNCE between matching image and report queries.

    For a valid anchor (i, j) the positives are the paired report query and the
    denominator runs over the report queries of all valid samples k at the same
    anatomy j.
    """
    qi, qr = batch.image_queries, batch.report_queries
    valid = batch.validity.bool()
    if batch.temperature <= 0:
        raise ObjectiveError("temperature must be positive")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ObjectiveError("alignment_loss: no valid entries")

    # sim[i, k, j] = <Q^I_{i,j}, Q^R_{k,j}> / tau
    sim = torch.einsum("imd,kmd->ikm", qi, qr) / batch.temperature
    sim = sim.masked_fill(~valid.unsqueeze(0), NEG_INF)  # drop invalid k per (k, j)
    log_denom = torch.logsumexp(sim, dim=1)                # (B, M)
    diag = torch.einsum("imd,imd->im", qi, qr) / batch.temperature
    log_prob = diag - log_denom
    return -(log_prob[valid]).sum() / n_valid


def disease_loss(batch: DiseaseBatch, per_anchor_positive_normalization: bool = False) -> torch.Tensor:
    """Disease-level contrastive loss over online and momentum views.

    Abnormal anchors treat only their own momentum view as positive; normal
    anchors treat every valid normal momentum view of the same anatomy
    (including their own) as a positive. Denominators run over all valid
    momentum views of the anatomy. The optional flag divides each normal
    anchor's positive sum by its positive count (off by default; the plain
    formula sums them).
    """
    q = batch.online_queries
    qm = batch.momentum_queries.detach()
    valid = batch.validity.bool()
    labels = batch.labels
    if batch.temperature <= 0:
        raise ObjectiveError("temperature must be positive")
    n_valid = int(valid.sum())

    abnormal = valid & (labels == 1)
    normal = valid & (labels == 0)
    if int(abnormal.sum()) == 0 and int(normal.sum()) == 0:
        raise ObjectiveError("disease_loss: no positive terms")

    # sim[i, p, j] = <Q_{i,j}, Q'_{p,j}> / tau
    sim = torch.einsum("imd,pmd->ipm", q, qm) / batch.temperature
    sim = sim.masked_fill(~valid.unsqueeze(0), NEG_INF)  # drop invalid momentum views
    log_denom = torch.logsumexp(sim, dim=1)                # (B, M)
    log_prob = sim - log_denom.unsqueeze(1)                # (B, P, M)

    total = q.new_zeros(())
    # abnormal anchors: own-view instance discrimination
    self_log_prob = torch.diagonal(log_prob, dim1=0, dim2=1).T  # (B, M)
    total = total + self_log_prob[abnormal].sum()
    # normal anchors: all valid normal momentum views are positives
    pos_mask = normal.unsqueeze(0)                         # (1, P, M) over views p
    normal_terms = log_prob.masked_fill(~pos_mask, 0.0)
    per_anchor = normal_terms.sum(dim=1)                   # (B, M)
    if per_anchor_positive_normalization:
        counts = normal.sum(dim=0).clamp(min=1)            # positives per anatomy
        per_anchor = per_anchor / counts.unsqueeze(0)
    total = total + per_anchor[normal].sum()
    return -total / n_valid
