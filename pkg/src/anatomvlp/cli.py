"""Command-line entry point.

Verbs: gen-data, train, eval, ablate, plot, inspect-codebook. Exit code 0 on
success, 2 for config/usage errors, 1 for runtime failures; errors print one
machine-readable `error:<category>:` line on stderr.
"""

import argparse
import os
import sys

import numpy as np
import torch

from . import checkpoint as ckpt_mod
from .config import ConfigError, load_config, phantom_spec
from .evaluate import (activation_density, default_entities, entity_ground_truth,
                       zero_shot_eval, zero_shot_scores, write_results)
from .phantom import generate_case, save_case
from .trainer import STAGE_ORDER, Trainer, TrainerError, VARIANTS, run_ablation


class CliError(Exception):
    def __init__(self, category, message):
        self.category = category
        super().__init__(message)


def _resolve_out(path):
    root = os.environ.get("ANATOMVLP_OUT_ROOT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _load_cfg(args):
    try:
        cfg = load_config(args.config, args.set or [])
    except (ConfigError, OSError) as e:
        raise CliError("config", str(e)) from e
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    spec = phantom_spec(cfg)
    out = _resolve_out(args.out)
    d = cfg["data"]
    counts = {"train": int(d["n_train"]), "val": int(d["n_val"]), "test": int(d["n_test"])}
    index = 0
    for split, n in counts.items():
        split_dir = os.path.join(out, split)
        os.makedirs(split_dir, exist_ok=True)
        for _ in range(n):
            save_case(generate_case(spec, index), split_dir)
            index += 1
    print(f"wrote {index} cases under {out}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    trainer = Trainer(cfg, work_dir=out)
    if args.stage:
        if args.stage not in STAGE_ORDER:
            raise CliError("usage", f"unknown stage {args.stage}")
        model = trainer.build_model()
        if args.stage in ("s3", "s4"):
            if not args.from_ckpt:
                raise CliError("config",
                               f"stage {args.stage} requires --from with an earlier checkpoint")
            ckpt_mod.load_checkpoint(args.from_ckpt, model)
        elif args.from_ckpt:
            ckpt_mod.load_checkpoint(args.from_ckpt, model)
        trainer.run_pipeline(out, stages=(args.stage,), model=model)
    else:
        variant = args.variant or "full"
        if variant not in VARIANTS:
            raise CliError("usage", f"unknown variant {variant}")
        trainer.run_pipeline(out, variant=variant)
    print(f"training complete; artifacts in {out}")
    return 0


def _load_model(cfg, ckpt_path):
    trainer = Trainer(cfg)
    model = trainer.build_model()
    try:
        ckpt_mod.load_checkpoint(ckpt_path, model)
    except (ckpt_mod.CheckpointError, OSError, KeyError) as e:
        raise CliError("checkpoint", str(e)) from e
    return model


def cmd_eval(args):
    cfg = _load_cfg(args)
    model = _load_model(cfg, args.ckpt)
    trainer = Trainer(cfg)
    _, val_cases, test_cases = trainer.generate_data()
    entities = default_entities(phantom_spec(cfg))
    result = zero_shot_eval(model, val_cases, test_cases, entities,
                            float(cfg["loss"]["alignment_temperature"]))
    out = _resolve_out(args.out)
    path = write_results(result, out)
    print(f"macro AUC {result['macro']['AUC']:.4f}; per-entity results in {path}")
    return 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    out = _resolve_out(args.out)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    summary, _, _ = run_ablation(cfg, out, seeds=seeds)
    print(f"{'variant':<20} {'macro-AUC':>10}")
    for variant in ("alignment_only", "disease_alignment", "full"):
        print(f"{variant:<20} {summary[variant]['macro_auc']:>10.4f}")
    return 0


def cmd_plot(args):
    from .plots import plot_activation_density, plot_roc
    cfg = _load_cfg(args)
    model = _load_model(cfg, args.ckpt)
    trainer = Trainer(cfg)
    _, _, test_cases = trainer.generate_data()
    spec = phantom_spec(cfg)
    entities = default_entities(spec)
    tau = float(cfg["loss"]["alignment_temperature"])
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)

    scores = zero_shot_scores(model, test_cases, entities, tau)
    labels = entity_ground_truth(test_cases, entities)
    per_entity = []
    for e, (j, name, anomaly) in enumerate(entities):
        keep = ~np.isnan(scores[:, e])
        if len(set(labels[keep, e].tolist())) < 2:
            continue
        per_entity.append((f"{name}/{anomaly}", scores[keep, e], labels[keep, e]))
    roc_path = plot_roc(per_entity, os.path.join(out, "roc.png"))

    trained = float(model.codebook.ema_counts.sum()) > 0
    dens = {"baseline": activation_density(model, test_cases, use_vsdb=False)}
    if trained:
        dens["vsdb"] = activation_density(model, test_cases, use_vsdb=True)
    dens_path = plot_activation_density(dens, spec.anatomy_names(),
                                        os.path.join(out, "activation_density.png"))
    print(f"wrote {roc_path} and {dens_path}")
    return 0


def cmd_inspect_codebook(args):
    cfg = _load_cfg(args)
    model = _load_model(cfg, args.ckpt)
    counts = model.codebook.ema_counts.numpy()
    names = phantom_spec(cfg).anatomy_names()
    for j, name in enumerate(names):
        row = counts[j]
        total = row.sum()
        print(f"{name}: total EMA mass {total:.3f}")
        if total > 0:
            bars = " ".join(f"{c / total:.2f}" for c in row)
            print(f"  usage: {bars}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="anatomvlp")
    sub = p.add_subparsers(dest="verb")

    def common(sp, out_default="runs"):
        sp.add_argument("--config", default=None, help="YAML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-key config override")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp, "dataset")
    sp.add_argument("--seed", type=int, default=None, help="override config seed")

    sp = sub.add_parser("train", help="run staged training")
    common(sp)
    sp.add_argument("--stage", default=None, help="run one stage (s1..s4)")
    sp.add_argument("--variant", default=None, help="stage chain: " + ", ".join(VARIANTS))
    sp.add_argument("--from", dest="from_ckpt", default=None, help="input checkpoint")
    sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("eval", help="zero-shot evaluation of a checkpoint")
    common(sp, "eval_out")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("ablate", help="train and compare the component ablation grid")
    common(sp, "ablation")
    sp.add_argument("--seeds", default="0,1,2")

    sp = sub.add_parser("plot", help="render ROC curves and activation histograms")
    common(sp, "figures")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("inspect-codebook", help="print per-anatomy code usage")
    sp.add_argument("--config", default=None)
    sp.add_argument("--set", action="append")
    sp.add_argument("--ckpt", required=True)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
    "inspect-codebook": cmd_inspect_codebook,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    if not args.verb:
        parser.print_usage()
        return 2
    torch.set_num_threads(max(os.cpu_count() or 1, 1))
    try:
        return COMMANDS[args.verb](args)
    except CliError as e:
        print(f"error:{e.category}: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"error:config: {e}", file=sys.stderr)
        return 2
    except TrainerError as e:
        print(f"error:train: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
