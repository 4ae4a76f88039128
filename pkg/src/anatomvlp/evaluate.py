"""Zero-shot diagnosis, classification metrics, linear probe, activation density."""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .anatomy import parse_report
from .model import AlignmentModel, full_volume_view
from .phantom import ABNORMAL_TEMPLATE, NORMAL_TEMPLATE


class EvaluateError(ValueError):
    pass


@dataclass
class PromptPair:
    positive_text: str
    negative_text: str


def entity_prompts(anatomy_name: str, anomaly_name: str) -> PromptPair:
    """Reuse the report templates verbatim as zero-shot prompts."""
    return PromptPair(
        positive_text=ABNORMAL_TEMPLATE.format(anomaly=anomaly_name, organ=anatomy_name),
        negative_text=NORMAL_TEMPLATE.format(organ=anatomy_name),
    )


def auc(scores, labels) -> float:
    """Mann-Whitney statistic: P(random positive outranks random negative),
    ties counted one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise EvaluateError("auc needs both classes present")
    # midranks over the pooled sample
    pooled = np.concatenate([pos, neg])
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(len(pooled))
    sorted_vals = pooled[order]
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = ranks[: len(pos)].sum()
    u = rank_sum_pos - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def confusion_metrics(scores, labels, threshold: float):
    """SE, SP, ACC, F1, Precision at a fixed operating threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise EvaluateError("empty input")
    pred = (scores >= threshold).astype(int)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    se = tp / (tp + fn) if tp + fn else 0.0
    sp = tn / (tn + fp) if tn + fp else 0.0
    acc = (tp + tn) / len(labels)
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * se / (precision + se) if precision + se else 0.0
    return {"SE": se, "SP": sp, "ACC": acc, "F1": f1, "Precision": precision}


def youden_threshold(scores, labels) -> float:
    """Operating point maximizing SE + SP - 1 over the observed scores."""
    best_t, best_j = 0.5, -np.inf
    for t in sorted(set(np.asarray(scores, dtype=float))):
        m = confusion_metrics(scores, labels, t)
        j = m["SE"] + m["SP"] - 1.0
        if j > best_j + 1e-12:
            best_j, best_t = j, t
    return float(best_t)


def case_entity_labels(case):
    """Ground-truth (anatomy, anomaly) flags recovered from the report text."""
    out = {}
    for j, sentence in enumerate(case.report_sentences):
        flag, name = parse_report(sentence)
        out[j] = name if flag else None
    return out


def zero_shot_scores(model: AlignmentModel, cases, entities, temperature: float = 0.07,
                     batch_size: int = 16, use_vsdb=None):
    """Per-entity positive-class probabilities for every case.

    entities: list of (anatomy_id, anatomy_name, anomaly_name). Scores are NaN
    where the anatomy is missing from the view."""
    model.eval()
    device = next(model.parameters()).device
    with torch.no_grad():
        prompts_pos = [entity_prompts(nm, an).positive_text for _, nm, an in entities]
        prompts_neg = [entity_prompts(nm, an).negative_text for _, nm, an in entities]
        aids = [j for j, _, _ in entities]
        qp = model.prompt_queries(prompts_pos, aids)     # (E, D)
        qn = model.prompt_queries(prompts_neg, aids)
        if use_vsdb is None:  # default: fuse whenever a trained codebook exists
            use_vsdb = float(model.codebook.ema_counts.sum()) > 0

        scores = np.full((len(cases), len(entities)), np.nan)
        for i in range(0, len(cases), batch_size):
            chunk = cases[i:i + batch_size]
            views = [full_volume_view(c) for c in chunk]
            qi, validity, _ = model.image_queries(views, use_vsdb=use_vsdb)  # (B, M, D)
            for e, (j, _, _) in enumerate(entities):
                sim_p = (qi[:, j] * qp[e]).sum(-1) / temperature
                sim_n = (qi[:, j] * qn[e]).sum(-1) / temperature
                prob = torch.softmax(torch.stack([sim_p, sim_n], dim=-1), dim=-1)[..., 0]
                prob = torch.where(validity[:, j], prob, torch.full_like(prob, float("nan")))
                scores[i:i + len(chunk), e] = prob.cpu().numpy()
    return scores


def entity_ground_truth(cases, entities) -> np.ndarray:
    labels = np.zeros((len(cases), len(entities)), dtype=int)
    for i, case in enumerate(cases):
        anomalies = case_entity_labels(case)
        for e, (j, _, name) in enumerate(entities):
            labels[i, e] = 1 if anomalies.get(j) == name else 0
    return labels


def default_entities(spec):
    names = spec.anatomy_names()
    return [(j, names[j], t)
            for j in range(spec.anatomy_count)
            for t in spec.anomaly_types
            if spec.prevalence[j, list(spec.anomaly_types).index(t)] > 0]


def zero_shot_eval(model, val_cases, test_cases, entities, temperature: float = 0.07):
    """Threshold on validation by Youden's J, report test metrics per entity."""
    val_scores = zero_shot_scores(model, val_cases, entities, temperature)
    test_scores = zero_shot_scores(model, test_cases, entities, temperature)
    val_labels = entity_ground_truth(val_cases, entities)
    test_labels = entity_ground_truth(test_cases, entities)

    rows = []
    for e, (j, name, anomaly) in enumerate(entities):
        sv, lv = val_scores[:, e], val_labels[:, e]
        st, lt = test_scores[:, e], test_labels[:, e]
        keep_v, keep_t = ~np.isnan(sv), ~np.isnan(st)
        sv, lv, st, lt = sv[keep_v], lv[keep_v], st[keep_t], lt[keep_t]
        row = {"anatomy": name, "anomaly": anomaly}
        if len(set(lt.tolist())) < 2 or len(set(lv.tolist())) < 2:
            row.update({"AUC": float("nan"), "SE": float("nan"), "SP": float("nan"),
                        "ACC": float("nan"), "F1": float("nan"), "Precision": float("nan")})
        else:
            t = youden_threshold(sv, lv)
            row["AUC"] = auc(st, lt)
            row.update(confusion_metrics(st, lt, t))
        rows.append(row)

    metric_names = ["AUC", "SE", "SP", "ACC", "F1", "Precision"]
    macro = {m: float(np.nanmean([r[m] for r in rows])) for m in metric_names}
    return {"entities": rows, "macro": macro}


def write_results(result: dict, out_dir, name="zero_shot"):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    fields = ["anatomy", "anomaly", "AUC", "SE", "SP", "ACC", "F1", "Precision"]
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in result["entities"]:
            w.writerow({k: row[k] for k in fields})
    with open(os.path.join(out_dir, f"{name}_summary.json"), "w") as f:
        json.dump(result["macro"], f, indent=1, sort_keys=True)
    return csv_path


def pooled_embeddings(model, cases, use_vsdb=False):
    """Concatenated per-anatomy query embeddings per case, for probing."""
    feats = []
    with torch.no_grad():
        for i in range(0, len(cases), 16):
            views = [full_volume_view(c) for c in cases[i:i + 16]]
            q, validity, _ = model.image_queries(views, use_vsdb=use_vsdb)
            feats.append(q.reshape(q.shape[0], -1).cpu())
    return torch.cat(feats)


def linear_probe(model, train_cases, test_cases, entities, epochs: int = 50,
                 seed: int = 0, lr: float = 1e-2):
    """Train only a linear head on frozen pooled embeddings; per-entity metrics."""
    torch.manual_seed(seed)
    x_tr = pooled_embeddings(model, train_cases)
    x_te = pooled_embeddings(model, test_cases)
    y_tr = torch.tensor(entity_ground_truth(train_cases, entities), dtype=torch.float32)
    y_te = entity_ground_truth(test_cases, entities)

    head = torch.nn.Linear(x_tr.shape[1], len(entities))
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = torch.nn.functional.binary_cross_entropy_with_logits(head(x_tr), y_tr)
        loss.backward()
        opt.step()
    with torch.no_grad():
        scores = torch.sigmoid(head(x_te)).numpy()

    rows = []
    for e, (j, name, anomaly) in enumerate(entities):
        if len(set(y_te[:, e].tolist())) < 2:
            continue
        t = youden_threshold(scores[:, e], y_te[:, e])
        m = confusion_metrics(scores[:, e], y_te[:, e], t)
        rows.append({"anatomy": name, "anomaly": anomaly,
                     "AUC": auc(scores[:, e], y_te[:, e]), "SE": m["SE"], "SP": m["SP"]})
    macro = {k: float(np.mean([r[k] for r in rows])) for k in ("AUC", "SE", "SP")}
    return {"entities": rows, "macro": macro}


def activation_density(model, cases, use_vsdb: bool, near_zero: float = 0.05,
                       bins: int = 50, value_range: float = 2.0):
    """Histogram of |token activation| per anatomy plus the near-zero fraction.

    Tokens are the (optionally fused) visual tokens fed to aggregation."""
    M = model.enc_config.anatomy_count
    hists = {j: np.zeros(bins, dtype=np.int64) for j in range(M)}
    counts = {j: 0 for j in range(M)}
    near = {j: 0 for j in range(M)}
    edges = np.linspace(0.0, value_range, bins + 1)
    with torch.no_grad():
        for i in range(0, len(cases), 16):
            views = [full_volume_view(c) for c in cases[i:i + 16]]
            tb = model.collect_tokens(views)
            tokens = tb.tokens
            if use_vsdb:
                _, _, _, _, q = model.reconstruct_tokens(tb, detach=True)
                tokens = model.fusion(tokens, q)
            for n in range(tokens.shape[0]):
                j = int(tb.anatomy_ids[n])
                ln = int(tb.lengths[n])
                vals = tokens[n, :ln].abs().flatten().cpu().numpy()
                h, _ = np.histogram(np.clip(vals, 0, value_range), bins=edges)
                hists[j] += h
                counts[j] += vals.size
                near[j] += int((vals < near_zero).sum())
    out = {}
    for j in range(M):
        frac = near[j] / counts[j] if counts[j] else float("nan")
        out[j] = {"histogram": hists[j], "edges": edges, "count": counts[j],
                  "near_zero_fraction": frac}
    return out
