"""Evaluation harnesses: segmentation agreement and planning accuracy.

Segmentation quality is scored as the adjusted Rand index between per-pixel
argmax slot responsibilities and ground-truth block labels, background
excluded. Planning is scored by running seeded model-predictive episodes and
reporting the fraction of goal blocks in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.stats import binomtest
from sklearn.metrics import adjusted_rand_score

from . import world as blockworld
from .dataset import DatasetReader
from .inference import infer_t0
from .model import composite_image
from .planning import CEMConfig, PlanTask, mpc_loop, _encode_b64
from .utils import config_digest, file_digest, split_seed
from .world import WorldConfig


def foreground_ari(gt_labels: np.ndarray, pred_labels: np.ndarray) -> Optional[float]:
    """Chance-corrected label agreement over non-background pixels."""
    fg = gt_labels > 0
    if fg.sum() == 0:
        return None
    return float(adjusted_rand_score(gt_labels[fg], pred_labels[fg]))


def eval_segmentation(model, dataset_path, n_scenes: Optional[int] = None,
                      m0: int = 4, k: Optional[int] = None, seed: int = 0,
                      gallery_scenes: int = 4,
                      checkpoint_path=None) -> dict:
    """Infer slots on first frames and score the decomposition against labels."""
    reader = DatasetReader(dataset_path, training_mode=False)
    if not reader.index["has_gt_masks"]:
        raise ValueError(f"{dataset_path} carries no gt label maps; "
                         "segmentation evaluation needs them")
    n = len(reader) if n_scenes is None else min(n_scenes, len(reader))
    scores, traces, gallery = [], [], []
    recon_errs = []
    for i in range(n):
        traj = reader[i]
        x = torch.from_numpy(np.ascontiguousarray(
            traj.images[0].transpose(2, 0, 1))).unsqueeze(0)
        gen = torch.Generator()
        gen.manual_seed(split_seed(seed, f"seg/{i}"))
        lam, res = infer_t0(model, x, m0, gen, k=k, truncate=True)
        resp = res.stats.responsibilities[0]
        pred = resp.argmax(0).numpy()
        ari = foreground_ari(traj.gt_masks[0], pred)
        if ari is not None:
            scores.append(ari)
        traces.append([float(t[0]) for t in res.diagnostics.trace])
        recon_errs.append(float(((composite_image(res.mix) - x) ** 2).mean()))
        if i < gallery_scenes:
            gallery.append({
                "image": _encode_b64(traj.images[0]),
                "masks": _encode_b64(res.mix.masks[0].numpy().transpose(1, 2, 0)),
                "responsibilities": _encode_b64(resp.numpy().transpose(1, 2, 0)),
            })
    trace_arr = np.array(traces)
    mean = float(np.mean(scores))
    stderr = float(np.std(scores, ddof=1) / math.sqrt(len(scores))) if len(scores) > 1 else 0.0
    return {
        "task_family": "segmentation",
        "n_scenes": n,
        "ari_scores": [float(s) for s in scores],
        "ari_mean": mean,
        "ari_stderr": stderr,
        "recon_mse_mean": float(np.mean(recon_errs)),
        "mean_objective_trace": trace_arr.mean(axis=0).tolist(),
        "k_slots": int(k if k is not None else model.cfg.k_slots),
        "m0": m0,
        "seed": seed,
        "config_digest": config_digest(model.cfg.to_dict()),
        "checkpoint_digest": file_digest(checkpoint_path) if checkpoint_path else None,
        "gallery": gallery,
    }


def make_plan_task(world_cfg: WorldConfig, seed: int, tol: float,
                   max_tries: int = 50) -> PlanTask:
    """A seeded rearrangement task: same blocks, fresh settled goal layout.

    Retries goal placement until the initial state does not already satisfy
    the goal, so every task requires at least one move.
    """
    init = blockworld.init_world(world_cfg, split_seed(seed, "task/init"))
    rng = np.random.default_rng(split_seed(seed, "task/goal"))
    for _ in range(max_tries):
        xs = blockworld.floor_layout(rng, world_cfg.n_blocks,
                                     world_cfg.image_size, world_cfg.block_size)
        goal_blocks = tuple(blockworld.Block(color_id=b.color_id, x=x, y=0)
                            for b, x in zip(init.blocks, xs))
        goal = blockworld.WorldState(config=world_cfg, blocks=goal_blocks,
                                     stacking_order=init.stacking_order)
        if blockworld.evaluate_build(init, goal, tol) < 1.0:
            goal_image, _ = blockworld.render(goal)
            return PlanTask(initial_state=init, goal_state=goal,
                            goal_image=goal_image, tol=tol)
    raise RuntimeError("could not build a non-trivial plan task")


def eval_planning(model, world_cfg: WorldConfig, n_episodes: int, cem: CEMConfig,
                  tol: float, action_space: str = "entity",
                  cost_mode: str = "greedy", metric: str = "masked_iou",
                  m0: int = 4, mt: int = 2, seed: int = 0,
                  pick_samples: int = 512, satisfied_cost: float = 0.5,
                  checkpoint_path=None) -> dict:
    """Run seeded MPC episodes; returns the aggregate report plus per-episode
    reports. Episode i of two runs with equal seeds gets an identical task,
    which is what paired comparisons between action spaces rely on."""
    episodes = []
    for i in range(n_episodes):
        task = make_plan_task(world_cfg, split_seed(seed, f"episode/{i}"), tol)
        report = mpc_loop(model, task, cem, cost_mode=cost_mode, metric=metric,
                          action_space=action_space, m0=m0, mt=mt,
                          seed=split_seed(seed, f"mpc/{i}"),
                          pick_samples=pick_samples, satisfied_cost=satisfied_cost)
        episodes.append(report)
    acc = np.array([e["final_accuracy"] for e in episodes])
    report = {
        "task_family": f"planning/{world_cfg.n_blocks}-block/{action_space}",
        "n_episodes": n_episodes,
        "accuracies": acc.tolist(),
        "accuracy_mean": float(acc.mean()),
        "accuracy_stderr": float(acc.std(ddof=1) / math.sqrt(len(acc))) if len(acc) > 1 else 0.0,
        "success_rate": float((acc >= 1.0).mean()),
        "action_space": action_space,
        "cost_mode": cost_mode,
        "metric": metric,
        "tol": tol,
        "seed": seed,
        "cem": cem.to_dict(),
        "config_digest": config_digest(model.cfg.to_dict()),
        "checkpoint_digest": file_digest(checkpoint_path) if checkpoint_path else None,
    }
    return report, episodes


def paired_sign_test(wins: int, losses: int) -> float:
    """One-sided sign test p-value that wins beat losses on matched pairs."""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)
