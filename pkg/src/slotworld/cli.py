"""Command-line entry points.

Verbs: generate (dataset), train, eval-seg (segmentation agreement),
plan (MPC episodes), plot (figures from logs/reports), inspect (artifact
summaries). Every command is a pure function of (config file, input files,
seed): re-running writes byte-identical reports.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from .config import load_run_config
from .dataset import generate_dataset, read_index
from .evaluation import eval_planning, eval_segmentation
from .model import load_checkpoint
from .planning import CEMConfig
from .training import train, train_ablation
from .utils import atomic_write_text, canonical_json, config_digest, split_seed

VARIANT_FLAGS = {"symmetric": "symmetric", "unfactorized": "unfactorized",
                 "no-weight-sharing": "no_weight_sharing"}
COST_FLAGS = {"l2": "l2_subimage", "iou": "masked_iou",
              "unfactorized": "unfactorized"}


def _write_report(path: Path, report: dict) -> None:
    atomic_write_text(path, canonical_json(report) + "\n")
    print(f"wrote {path}")


def cmd_generate(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / cfg.generate.filename
    index = generate_dataset(cfg.world, cfg.generate.n_trajectories,
                             cfg.generate.horizon, path,
                             with_gt=cfg.generate.with_gt)
    print(f"wrote {path}")
    print(json.dumps(index, indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    variant = VARIANT_FLAGS[args.variant] if args.variant else None
    cfg = load_run_config(args.config, seed_override=args.seed,
                          variant_override=variant)
    dataset = cfg.train_dataset
    if dataset is None:
        raise SystemExit("config needs a 'train_dataset' path")
    runner = train if cfg.model.variant == "symmetric" else train_ablation
    result = runner(dataset, cfg.train, args.out, resume_from=args.checkpoint)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    if result.history:
        last = result.history[-1]
        print(f"final epoch {last['epoch']}: mean objective {last['epoch_mean_total']:.1f}")
    return 0


def cmd_eval_seg(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed)
    model, _ = load_checkpoint(args.checkpoint, k_override=cfg.eval.k_slots)
    dataset = cfg.eval.dataset
    if dataset is None:
        raise SystemExit("config needs eval.dataset for eval-seg")
    report = eval_segmentation(model, dataset, n_scenes=cfg.eval.n_scenes,
                               m0=cfg.eval.m0, k=cfg.eval.k_slots,
                               seed=cfg.seed, checkpoint_path=args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_report(out_dir / "segmentation_report.json", report)
    print(f"mean foreground ARI over {report['n_scenes']} scenes: "
          f"{report['ari_mean']:.3f} +- {report['ari_stderr']:.3f}")
    return 0


def cmd_plan(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed)
    model, _ = load_checkpoint(args.checkpoint, k_override=cfg.eval.k_slots)
    action_space = args.action_space or cfg.eval.action_space
    cost_mode = cfg.eval.cost_mode
    metric = cfg.eval.metric
    if args.cost:
        mapped = COST_FLAGS[args.cost]
        if mapped == "unfactorized":
            cost_mode = "unfactorized"
        else:
            metric = mapped
    report, episodes = eval_planning(
        model, cfg.world, cfg.eval.n_episodes, cfg.cem, cfg.eval.tol,
        action_space=action_space, cost_mode=cost_mode, metric=metric,
        m0=cfg.eval.m0, mt=cfg.eval.mt, seed=cfg.seed,
        pick_samples=cfg.eval.pick_samples,
        satisfied_cost=cfg.eval.satisfied_cost, checkpoint_path=args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, ep in enumerate(episodes):
        _write_report(out_dir / f"episode_{i:03d}.json", ep)
    _write_report(out_dir / "planning_report.json", report)
    print(f"accuracy {report['accuracy_mean']:.3f} +- {report['accuracy_stderr']:.3f} "
          f"({report['success_rate']:.0%} episodes complete)")
    return 0


def cmd_plot(args) -> int:
    from . import plotting
    src = Path(args.input)
    out_dir = Path(args.out)
    if src.suffix == ".jsonl":
        paths = plotting.plot_metrics(src, out_dir)
    else:
        with open(src) as f:
            report = json.load(f)
        if "attempts" in report:
            paths = plotting.plot_episode(report, out_dir)
        elif "gallery" in report:
            paths = plotting.plot_gallery(report, out_dir)
        else:
            raise SystemExit(f"{src}: not a plottable report")
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_inspect(args) -> int:
    src = Path(args.input)
    if src.suffix == ".bwds":
        print(json.dumps(read_index(src), indent=2, sort_keys=True))
    elif src.suffix in (".pt", ".ckpt"):
        payload = torch.load(src, map_location="cpu", weights_only=False)
        n_params = sum(v.numel() for v in payload["state_dict"].values())
        print(json.dumps({
            "model_config": payload["model_config"],
            "epoch": payload["epoch"],
            "n_parameters": n_params,
            "has_optimizer_state": payload.get("optimizer") is not None,
        }, indent=2, sort_keys=True))
    else:
        with open(src) as f:
            report = json.load(f)
        summary = {k: v for k, v in report.items()
                   if isinstance(v, (int, float, str, bool)) or v is None}
        print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotworld",
        description="Slot-factorized world model: dataset generation, "
                    "training, evaluation, and planning in a 2-D block world.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="root seed override")
        p.add_argument("--out", required=True, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("generate", help="write a trajectory dataset")
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    common(p)
    p.add_argument("--checkpoint", default=None, help="resume from checkpoint")
    p.add_argument("--variant", choices=sorted(VARIANT_FLAGS), default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-seg", help="segmentation agreement against labels")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_eval_seg)

    p = sub.add_parser("plan", help="run seeded MPC episodes")
    common(p, checkpoint=True)
    p.add_argument("--action-space", choices=("xy", "entity"), default=None)
    p.add_argument("--cost", choices=sorted(COST_FLAGS), default=None)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("plot", help="render figures from a log or report")
    p.add_argument("input", help="metrics .jsonl or report .json")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("inspect", help="summarize a dataset/checkpoint/report")
    p.add_argument("input")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
