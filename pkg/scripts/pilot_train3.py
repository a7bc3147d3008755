"""Third pilot: horizon-1 data, rollout-heavy curriculum, wider convs.

Probes dynamics move quality and the attention pick map, then runs a small
planning evaluation in both action spaces.
"""
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(1)

from sklearn.metrics import adjusted_rand_score

from slotworld.dataset import DatasetReader, generate_dataset
from slotworld.inference import infer_t0
from slotworld.model import (ModelConfig, compose_observation, composite_image,
                             encode_action)
from slotworld.training import TrainConfig, train
from slotworld.world import WorldConfig
from slotworld import world as bw

OUT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/root/pilot3")
OUT.mkdir(parents=True, exist_ok=True)


def ari_probe(model, path, n=30, m0=4, k=None):
    reader = DatasetReader(path, training_mode=False)
    scores, traces, mses = [], [], []
    for i in range(min(n, len(reader))):
        traj = reader[i]
        x = torch.from_numpy(np.ascontiguousarray(
            traj.images[0].transpose(2, 0, 1))).unsqueeze(0)
        gen = torch.Generator().manual_seed(1000 + i)
        lam, res = infer_t0(model, x, m0, gen, k=k, truncate=True)
        pred = res.stats.responsibilities[0].argmax(0).numpy()
        gt = traj.gt_masks[0]
        fg = gt > 0
        scores.append(adjusted_rand_score(gt[fg], pred[fg]))
        traces.append([float(t[0]) for t in res.diagnostics.trace])
        with torch.no_grad():
            mix = compose_observation(model.decode(lam.mode_sample()), 0.1)
        mses.append(float(((composite_image(mix) - x) ** 2).mean()))
    return (float(np.mean(scores)), np.array(traces).mean(axis=0).tolist(),
            float(np.mean(mses)))


def move_probe(model, n=12):
    """Predicted frame after a large commanded move vs the true next frame."""
    errs_true, errs_stay = [], []
    for i in range(n):
        state = bw.init_world(WorldConfig.desk(seed=0), 7000 + i)
        img, _ = bw.render(state)
        x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).unsqueeze(0)
        gen = torch.Generator().manual_seed(100 + i)
        lam, res = infer_t0(model, x, 4, gen, truncate=True)
        c = bw.block_centers(state)
        target_x = 27.0 if c[0][0] < 16 else 5.0
        act = bw.Action(mode="coordinate", pick=tuple(c[0]), place=(target_x, 10.0))
        true_img, _ = bw.render(bw.step(state, act))
        with torch.no_grad():
            lam1, _ = model.dynamics(res.h, encode_action(act, 32).unsqueeze(0))
            mix = compose_observation(model.decode(lam1.mode_sample()), 0.1)
        pred = composite_image(mix)[0].numpy().transpose(1, 2, 0)
        errs_true.append(float(((pred - true_img) ** 2).mean()))
        errs_stay.append(float(((pred - img) ** 2).mean()))
    return float(np.mean(errs_true)), float(np.mean(errs_stay))


def attention_probe(model, n=10):
    from slotworld.planning import entity_to_pick, PlannerError
    hits, dists = 0, []
    for i in range(n):
        cfg = WorldConfig.desk(n_blocks=1, seed=0)
        state = bw.init_world(cfg, 4000 + i)
        img, lab = bw.render(state)
        x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).unsqueeze(0)
        gen = torch.Generator().manual_seed(5000 + i)
        lam, res = infer_t0(model, x, 4, gen, truncate=True)
        sel = torch.from_numpy(lab > 0)
        slot = int(res.stats.responsibilities[0][:, sel].mean(dim=1).argmax())
        try:
            pick = entity_to_pick(model, slot, lam.mode_sample(), 2048, gen)
        except PlannerError:
            continue
        center = bw.block_centers(state)[0]
        dists.append(float(np.hypot(pick[0] - center[0], pick[1] - center[1])))
        if bw._block_at_point(state, *pick) is not None:
            hits += 1
    return hits, n, float(np.mean(dists)) if dists else None


def plan_probe(model, n=6):
    from slotworld.evaluation import eval_planning
    from slotworld.planning import CEMConfig
    cem = CEMConfig(population=128, elite_fraction=0.1, iterations=3, horizon=1)
    out = {}
    for space in ("entity", "xy"):
        rep, _ = eval_planning(model, WorldConfig.desk(n_blocks=1, seed=0), n,
                               cem, tol=4.0, action_space=space, seed=11,
                               pick_samples=512)
        out[space] = rep["success_rate"]
    return out


def main():
    t0 = time.time()
    train_path = OUT / "train.bwds"
    heldout_path = OUT / "heldout2.bwds"
    if not train_path.exists():
        generate_dataset(WorldConfig.desk(seed=1), 500, 1, train_path)
        generate_dataset(WorldConfig.desk(seed=2), 100, 0, heldout_path)
        print(f"datasets in {time.time()-t0:.0f}s", flush=True)

    cfg = TrainConfig(
        model=ModelConfig.desk(),
        learning_rate=1e-3, grad_clip_norm=5.0, batch_size=4,
        epochs=4, curriculum=((0, 0), (4, 1)),
        m0=4, mt=2, seed=0, checkpoint_every=100)

    prev = None
    res = None
    for upto in (4, 12, 20):
        stage_cfg = dataclasses.replace(cfg, epochs=upto)
        res = train(train_path, stage_cfg, OUT / "run", resume_from=prev)
        prev = str(res.checkpoint_path)
        ari2, trace, mse = ari_probe(res.model, heldout_path)
        mt, ms = move_probe(res.model)
        print(json.dumps({
            "epochs": upto, "wall_min": round((time.time() - t0) / 60, 1),
            "ari2": round(ari2, 3), "mode_mse": round(mse, 5),
            "move_pred_vs_true": round(mt, 4), "move_pred_vs_stay": round(ms, 4),
            "trace": [round(t, 1) for t in trace],
            "last_total": res.history[-1]["epoch_mean_total"],
        }), flush=True)
    hits, n, mean_d = attention_probe(res.model)
    print(json.dumps({"pick_hits": f"{hits}/{n}", "pick_mean_dist": mean_d}), flush=True)
    print(json.dumps({"plan_success": plan_probe(res.model)}), flush=True)
    print(f"done in {(time.time()-t0)/60:.1f} min", flush=True)


if __name__ == "__main__":
    main()
