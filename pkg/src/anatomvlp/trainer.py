"""Four-stage training: disease-level contrastive pre-training, vision-language
alignment, VQ-VAE normality modeling with a frozen encoder, and alignment
fine-tuning with the frozen VQ-VAE plus discrepancy fusion.

Freezing is structural (the optimizer never sees frozen groups) and verified
by state hashing after every stage.
"""

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .anatomy import center_crop, crop_and_filter, flip_view
from .checkpoint import save_checkpoint, state_hash
from .config import crop_policy, derive_seed, encoder_config, phantom_spec, vqvae_config
from .encoders import MomentumPair
from .model import AlignmentModel, full_volume_view
from .normality import masked_entry_losses
from .objectives import AlignmentBatch, DiseaseBatch, alignment_loss, disease_loss
from .phantom import generate_split


class TrainerError(RuntimeError):
    pass


class TrainingDiverged(TrainerError):
    pass


STAGE_ORDER = ("s1", "s2", "s3", "s4")

# parameter groups the optimizer sees per stage; everything else is frozen
TRAINED_GROUPS = {
    "s1": ("vision",),
    "s2": ("vision", "text"),
    "s3": ("vqvae", "codebook"),  # codebook buffers move by EMA, not by gradients
    "s4": ("vision", "text", "fusion"),
}

GROUP_PREFIXES = {
    "vision": ("vision.",),
    "text": ("text.", "report_aggregator."),
    "vqvae": ("vqvae.",),
    "fusion": ("fusion.",),
    "codebook": ("codebook.",),
}

VARIANTS = {
    "alignment_only": ("s2",),
    "disease_alignment": ("s1", "s2"),
    "full": ("s1", "s2", "s3", "s4"),
}


@dataclass
class StagePlan:
    stage: str
    epochs: int
    batch_size: int = 16
    peak_lr: float = 3e-4
    warmup_epochs: float = 1.0
    min_lr: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_ORDER:
            raise TrainerError(f"unknown stage {self.stage!r}")
        if self.epochs < 0:
            raise TrainerError("epochs must be nonnegative")

    @property
    def frozen_groups(self):
        return tuple(g for g in GROUP_PREFIXES if g not in TRAINED_GROUPS[self.stage])


@dataclass
class RunRecord:
    stage: str
    input_state_hash: str = ""
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_loss, lr
    pre_val_loss: float = float("nan")
    final_val_loss: float = float("nan")
    wall_clock: float = 0.0

    def to_rows(self):
        for e in self.epochs:
            yield {"stage": self.stage, **e}


def _lr_at(step, total_steps, warmup_steps, peak, floor):
    if warmup_steps > 0 and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return peak
    t = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * min(t, 1.0)))


class Trainer:
    def __init__(self, cfg: dict, work_dir=None):
        self.cfg = cfg
        self.work_dir = work_dir
        self.policy = crop_policy(cfg)
        self.supcon = bool(cfg["loss"]["supcon_normalization"])
        self.tau_align = float(cfg["loss"]["alignment_temperature"])
        self.tau_disease = float(cfg["loss"]["disease_temperature"])

    # ----- construction -----

    def build_model(self, seed=None) -> AlignmentModel:
        torch.manual_seed(derive_seed(self.cfg["seed"] if seed is None else seed, "init"))
        model = AlignmentModel(encoder_config(self.cfg), vqvae_config(self.cfg),
                               clip_range=tuple(self.cfg["data"]["intensity_range"]))
        return model

    def generate_data(self, seed=None):
        spec = phantom_spec(self.cfg, seed=seed)
        d = self.cfg["data"]
        return generate_split(spec, int(d["n_train"]), int(d["n_val"]), int(d["n_test"]))

    def make_plan(self, stage: str, seed=None) -> StagePlan:
        t = self.cfg["train"]
        return StagePlan(
            stage=stage,
            epochs=int(t["epochs"][stage]),
            batch_size=int(t["batch_size"]),
            peak_lr=float(t["peak_lr"]),
            warmup_epochs=float(t["warmup_epochs"]),
            min_lr=float(t["min_lr"]),
            seed=derive_seed(self.cfg["seed"] if seed is None else seed, stage),
        )

    # ----- view assembly -----

    def _train_views(self, cases, rng, n_views=1):
        out = []
        for case in cases:
            views = []
            for _ in range(n_views):
                v = crop_and_filter(case, self.policy, rng)
                if rng.random() < 0.5:
                    v = flip_view(v)
                views.append(v)
            out.append(views)
        return out

    def _val_views(self, cases, n_views=1):
        out = []
        for case in cases:
            v = center_crop(case, self.policy)
            views = [v]
            if n_views == 2:
                views.append(flip_view(v))
            out.append(views)
        return out

    # ----- per-batch losses -----

    def _labels_tensor(self, cases, device):
        return torch.tensor(np.stack([c.labels for c in cases]), device=device)

    def _disease_batch_loss(self, model, momentum: MomentumPair, cases, paired_views):
        v1 = [v[0] for v in paired_views]
        v2 = [v[1] for v in paired_views]
        q_on, val1, _ = model.image_queries(v1)
        with torch.no_grad():
            q_mom, val2, _ = model.image_queries(v2, branch=momentum.momentum)
        validity = val1 & val2
        labels = self._labels_tensor(cases, q_on.device)
        batch = DiseaseBatch(online_queries=q_on, momentum_queries=q_mom,
                             labels=labels, validity=validity,
                             temperature=self.tau_disease)
        return disease_loss(batch, per_anchor_positive_normalization=self.supcon)

    def _alignment_batch_loss(self, model, cases, views, use_vsdb):
        q_img, validity, _ = model.image_queries(views, use_vsdb=use_vsdb)
        q_rep, _ = model.report_queries([c.report_sentences for c in cases])
        batch = AlignmentBatch(image_queries=q_img, report_queries=q_rep,
                               validity=validity, temperature=self.tau_align)
        return alignment_loss(batch)

    def _vqvae_batch_loss(self, model, cases, token_batch, update_codebook):
        tb = token_batch
        z, z_q, e_sel, idx, q = model.reconstruct_tokens(tb, detach=True)
        labels = self._labels_tensor(cases, tb.tokens.device)
        normal = labels[tb.case_index, tb.anatomy_ids] == 0
        losses = masked_entry_losses(tb.tokens.detach(), q, z, e_sel, tb.padding_mask,
                                     beta=model.vq_config.beta)
        if int(normal.sum()) == 0:
            # skippable like an all-cropped-out batch; rare under sane prevalence
            raise ValueError("vqvae stage batch contains no normal entries")
        loss = losses[normal].mean()
        if update_codebook:
            assignments = []
            for n in torch.nonzero(normal, as_tuple=False).flatten().tolist():
                ln = int(tb.lengths[n])
                assignments.append((int(tb.anatomy_ids[n]), idx[n, :ln], z[n, :ln]))
            model.codebook.ema_update(assignments)
        return loss

    def _stage_batch_loss(self, model, momentum, stage, cases, views_per_case,
                          cached_tb=None, training=True):
        if stage == "s1":
            return self._disease_batch_loss(model, momentum, cases, views_per_case)
        if stage in ("s2", "s4"):
            views = [v[0] for v in views_per_case]
            return self._alignment_batch_loss(model, cases, views, use_vsdb=(stage == "s4"))
        if stage == "s3":
            tb = cached_tb if cached_tb is not None else model.collect_tokens(
                [v[0] for v in views_per_case])
            return self._vqvae_batch_loss(model, cases, tb, update_codebook=training)
        raise TrainerError(stage)

    # ----- S3 helpers -----

    def _cache_tokens(self, model, cases):
        """Frozen-encoder full-volume token batches, computed once per case set."""
        out = []
        with torch.no_grad():
            for case in cases:
                out.append(model.collect_tokens([full_volume_view(case)]))
        return out

    def _merge_token_batches(self, tbs):
        import torch as T
        L = max(int(tb.tokens.shape[1]) for tb in tbs)
        tokens, coords, pads, ids, case_idx, lengths = [], [], [], [], [], []
        for b, tb in enumerate(tbs):
            n, l, d = tb.tokens.shape
            pad_cols = L - l
            tokens.append(T.nn.functional.pad(tb.tokens, (0, 0, 0, pad_cols)))
            coords.append(T.nn.functional.pad(tb.coords, (0, 0, 0, pad_cols)))
            pads.append(T.nn.functional.pad(tb.padding_mask, (0, pad_cols), value=True))
            ids.append(tb.anatomy_ids)
            case_idx.append(T.full_like(tb.case_index, b))
            lengths.append(tb.lengths)
        from .model import TokenBatch
        return TokenBatch(tokens=T.cat(tokens), coords=T.cat(coords),
                          padding_mask=T.cat(pads), anatomy_ids=T.cat(ids),
                          case_index=T.cat(case_idx), lengths=T.cat(lengths))

    def _seed_codebook(self, model, cases, cached, rng):
        """Initialize codebook partitions from first-pass normal latents."""
        per_anatomy = {}
        with torch.no_grad():
            for case, tb in zip(cases, cached):
                z = model.vqvae.encode(tb.tokens, tb.anatomy_ids, tb.padding_mask)
                for n in range(z.shape[0]):
                    j = int(tb.anatomy_ids[n])
                    if case.labels[j] != 0:
                        continue
                    ln = int(tb.lengths[n])
                    per_anatomy.setdefault(j, []).append(z[n, :ln])
        K = model.codebook.vectors.shape[1]
        seeds = {}
        for j, chunks in per_anatomy.items():
            allz = torch.cat(chunks, dim=0)
            sel = rng.choice(allz.shape[0], size=min(K, allz.shape[0]), replace=False)
            seeds[j] = allz[np.sort(sel)]
        model.codebook.seed_from_latents(seeds)

    # ----- stage loop -----

    def _set_freezing(self, model, plan: StagePlan):
        groups = model.parameter_groups()
        trainable = []
        for name, params in groups.items():
            train = name in TRAINED_GROUPS[plan.stage]
            for p in params:
                p.requires_grad_(train)
            if train:
                trainable.extend(params)
        return trainable

    def _validate(self, model, momentum, plan, val_cases, cached_val=None):
        model.eval()
        n_views = 2 if plan.stage == "s1" else 1
        views = self._val_views(val_cases, n_views=n_views)
        bs = plan.batch_size
        losses, weights = [], []
        with torch.no_grad():
            for i in range(0, len(val_cases), bs):
                cases = val_cases[i:i + bs]
                if len(cases) < 2:
                    continue
                tb = None
                if plan.stage == "s3" and cached_val is not None:
                    tb = self._merge_token_batches(cached_val[i:i + bs])
                try:
                    loss = self._stage_batch_loss(model, momentum, plan.stage, cases,
                                                  views[i:i + bs], cached_tb=tb,
                                                  training=False)
                except ValueError:
                    continue
                losses.append(float(loss))
                weights.append(len(cases))
        model.train()
        if not losses:
            return float("nan")
        return float(np.average(losses, weights=weights))

    def run_stage(self, model: AlignmentModel, plan: StagePlan, train_cases, val_cases):
        """Train one stage in place; returns a RunRecord."""
        t0 = time.time()
        if plan.stage == "s4" and float(model.codebook.ema_counts.sum()) == 0.0:
            raise TrainerError("stage s4 requires a trained codebook (run s3 first)")

        record = RunRecord(stage=plan.stage, input_state_hash=state_hash(model))
        if plan.epochs == 0:
            record.wall_clock = time.time() - t0
            return record

        frozen_prefixes = tuple(p for g in plan.frozen_groups for p in GROUP_PREFIXES[g])
        frozen_hash = state_hash(model, frozen_prefixes)

        torch.manual_seed(plan.seed)
        trainable = self._set_freezing(model, plan)
        optimizer = torch.optim.Adam(trainable, lr=plan.peak_lr)
        momentum = None
        if plan.stage == "s1":
            momentum = MomentumPair(model.vision, self.cfg["model"]["momentum"])

        cached_train = cached_val = None
        if plan.stage == "s3":
            model.vision.eval()
            if bool(self.cfg["train"].get("s3_cached_tokens", True)):
                cached_train = self._cache_tokens(model, train_cases)
                cached_val = self._cache_tokens(model, val_cases)
                seed_rng = np.random.default_rng(plan.seed)
                self._seed_codebook(model, train_cases, cached_train, seed_rng)

        steps_per_epoch = max(len(train_cases) // plan.batch_size, 1)
        total_steps = plan.epochs * steps_per_epoch
        warmup_steps = plan.warmup_epochs * steps_per_epoch

        record.pre_val_loss = self._validate(model, momentum, plan, val_cases, cached_val)

        step = 0
        for epoch in range(plan.epochs):
            rng = np.random.default_rng(derive_seed(plan.seed, f"epoch{epoch}"))
            perm = rng.permutation(len(train_cases))
            epoch_losses = []
            for s in range(steps_per_epoch):
                sel = perm[s * plan.batch_size:(s + 1) * plan.batch_size]
                if len(sel) < 2:
                    continue
                cases = [train_cases[i] for i in sel]
                n_views = 2 if plan.stage == "s1" else 1
                views = self._train_views(cases, rng, n_views=n_views)
                tb = None
                if plan.stage == "s3" and cached_train is not None:
                    tb = self._merge_token_batches([cached_train[i] for i in sel])

                lr = _lr_at(step, total_steps, warmup_steps, plan.peak_lr, plan.min_lr)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                try:
                    loss = self._stage_batch_loss(model, momentum, plan.stage, cases,
                                                  views, cached_tb=tb, training=True)
                except ValueError:
                    continue  # every organ cropped out of this batch; rare
                if not torch.isfinite(loss):
                    self._dump_divergence(plan, epoch, step, record)
                    raise TrainingDiverged(f"non-finite loss in {plan.stage} "
                                           f"epoch {epoch} step {s}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                if plan.stage == "s1":
                    momentum.update()
                epoch_losses.append(float(loss.detach()))
                step += 1

            val_loss = self._validate(model, momentum, plan, val_cases, cached_val)
            record.epochs.append({
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                "val_loss": val_loss,
                "lr": lr,
            })
            record.final_val_loss = val_loss

        after = state_hash(model, frozen_prefixes)
        if after != frozen_hash:
            raise TrainerError(f"frozen parameters changed during {plan.stage}")
        record.wall_clock = time.time() - t0
        return record

    def _dump_divergence(self, plan, epoch, step, record):
        if self.work_dir is None:
            return
        path = os.path.join(self.work_dir, f"divergence_{plan.stage}.json")
        with open(path, "w") as f:
            json.dump({"stage": plan.stage, "epoch": epoch, "step": step,
                       "epochs": record.epochs}, f, indent=1)

    # ----- pipelines -----

    def run_pipeline(self, out_dir, variant="full", stages=None, data=None, seed=None,
                     model=None):
        """Run a stage chain, threading checkpoints; returns (model, records, data)."""
        if stages is None:
            stages = VARIANTS[variant]
        os.makedirs(out_dir, exist_ok=True)
        self.work_dir = out_dir
        if data is None:
            data = self.generate_data()
        train_cases, val_cases, _ = data
        if model is None:
            model = self.build_model(seed=seed)
        records = []
        for stage in stages:
            plan = self.make_plan(stage, seed=seed)
            rec = self.run_stage(model, plan, train_cases, val_cases)
            records.append(rec)
            ckpt = os.path.join(out_dir, f"ckpt_{stage}.zip")
            save_checkpoint(ckpt, model, self.cfg, stage,
                            extra={"input_state_hash": rec.input_state_hash})
        write_records(records, out_dir)
        return model, records, data


def run_ablation(cfg: dict, out_dir, seeds=(0, 1, 2)):
    """Train the component-ablation grid and return per-variant macro metrics.

    Per seed, s1 and s2 are trained once and shared between the
    disease_alignment and full variants; alignment_only retrains s2 from a
    fresh tower. All variants see the same dataset."""
    from .config import phantom_spec as _spec
    from .evaluate import default_entities, zero_shot_eval

    trainer = Trainer(cfg)
    data = trainer.generate_data()
    train_cases, val_cases, test_cases = data
    entities = default_entities(_spec(cfg))
    tau = float(cfg["loss"]["alignment_temperature"])
    results = {v: [] for v in VARIANTS}
    run_dirs = {}

    for seed in seeds:
        seed_dir = os.path.join(out_dir, f"seed{seed}")

        d = os.path.join(seed_dir, "alignment_only")
        trainer.run_pipeline(d, stages=("s2",), data=data, seed=seed)
        from .checkpoint import load_checkpoint  # local to avoid cycles at import
        model_a = trainer.build_model(seed=seed)
        load_checkpoint(os.path.join(d, "ckpt_s2.zip"), model_a)
        res = zero_shot_eval(model_a, val_cases, test_cases, entities, tau)
        results["alignment_only"].append({"seed": seed, **res["macro"]})
        run_dirs[("alignment_only", seed)] = d

        d2 = os.path.join(seed_dir, "disease_alignment")
        model, _, _ = trainer.run_pipeline(d2, stages=("s1", "s2"), data=data, seed=seed)
        res = zero_shot_eval(model, val_cases, test_cases, entities, tau)
        results["disease_alignment"].append({"seed": seed, **res["macro"]})
        run_dirs[("disease_alignment", seed)] = d2

        d3 = os.path.join(seed_dir, "full")
        model, _, _ = trainer.run_pipeline(d3, stages=("s3", "s4"), data=data, seed=seed,
                                           model=model)
        res = zero_shot_eval(model, val_cases, test_cases, entities, tau)
        results["full"].append({"seed": seed, **res["macro"]})
        run_dirs[("full", seed)] = d3

    summary = {v: {"macro_auc": float(np.mean([r["AUC"] for r in rows])),
                   "per_seed": rows}
               for v, rows in results.items()}
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ablation_summary.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    return summary, run_dirs, data


def write_records(records, out_dir):
    """Line-delimited JSON epoch records plus a CSV summary."""
    jsonl = os.path.join(out_dir, "run_record.jsonl")
    with open(jsonl, "w") as f:
        for rec in records:
            header = {"stage": rec.stage, "input_state_hash": rec.input_state_hash,
                      "pre_val_loss": rec.pre_val_loss,
                      "final_val_loss": rec.final_val_loss,
                      "wall_clock": rec.wall_clock}
            f.write(json.dumps({"kind": "stage", **header}) + "\n")
            for row in rec.to_rows():
                f.write(json.dumps({"kind": "epoch", **row}) + "\n")
    csv_path = os.path.join(out_dir, "run_record.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["stage", "epoch", "train_loss", "val_loss", "lr"])
        w.writeheader()
        for rec in records:
            for row in rec.to_rows():
                w.writerow(row)
