"""Second pilot: 3-color palette, lr 1e-3, longer run, plus dynamics and
planning probes on the trained checkpoint."""
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
from slotworld.model import ModelConfig, compose_observation, composite_image
from slotworld.training import TrainConfig, train
from slotworld.world import WorldConfig

OUT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/root/pilot2")
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


def dynamics_probe(model, path, n=20, m0=4, mt=2):
    """One-step prediction MSE: infer frame 0, predict frame 1 via dynamics."""
    from slotworld.model import encode_action
    reader = DatasetReader(path, training_mode=False)
    errs = []
    for i in range(min(n, len(reader))):
        traj = reader[i]
        x0 = torch.from_numpy(np.ascontiguousarray(
            traj.images[0].transpose(2, 0, 1))).unsqueeze(0)
        x1 = torch.from_numpy(np.ascontiguousarray(
            traj.images[1].transpose(2, 0, 1))).unsqueeze(0)
        gen = torch.Generator().manual_seed(3000 + i)
        lam, res = infer_t0(model, x0, m0, gen, truncate=True)
        a = encode_action(traj.actions[0], 32).unsqueeze(0)
        with torch.no_grad():
            lam1, _ = model.dynamics(res.h, a)
            mix = compose_observation(model.decode(lam1.mode_sample()), 0.1)
        errs.append(float(((composite_image(mix) - x1) ** 2).mean()))
    return float(np.mean(errs))


def attention_probe(model, n=10):
    """Does entity_to_pick land inside the block for the block-owning slot?"""
    from slotworld.planning import entity_to_pick, PlannerError
    from slotworld import world as bw
    hits, dists = 0, []
    for i in range(n):
        cfg = WorldConfig.desk(n_blocks=1, seed=0)
        state = bw.init_world(cfg, 4000 + i)
        img, _ = bw.render(state)
        x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).unsqueeze(0)
        gen = torch.Generator().manual_seed(5000 + i)
        lam, res = infer_t0(model, x, 4, gen, truncate=True)
        # block-owning slot: highest mean responsibility over block pixels
        _, lab = bw.render(state)
        sel = torch.from_numpy(lab > 0)
        slot = int(res.stats.responsibilities[0][:, sel].mean(dim=1).argmax())
        try:
            pick = entity_to_pick(model, slot, lam.mode_sample(), 2048, gen)
        except PlannerError:
            continue
        center = bw.block_centers(state)[0]
        d = float(np.hypot(pick[0] - center[0], pick[1] - center[1]))
        dists.append(d)
        if bw._block_at_point(state, *pick) is not None:
            hits += 1
    return hits, n, float(np.mean(dists)) if dists else None


def main():
    t0 = time.time()
    train_path = OUT / "train.bwds"
    heldout_path = OUT / "heldout2.bwds"
    gen3_path = OUT / "heldout3.bwds"
    if not train_path.exists():
        generate_dataset(WorldConfig.desk(seed=1), 500, 2, train_path)
        generate_dataset(WorldConfig.desk(seed=2), 100, 0, heldout_path)
        generate_dataset(WorldConfig.desk(n_blocks=3, seed=3), 100, 0, gen3_path)
        print(f"datasets in {time.time()-t0:.0f}s", flush=True)

    cfg = TrainConfig(
        model=ModelConfig.desk(),
        learning_rate=1e-3, grad_clip_norm=5.0, batch_size=4,
        epochs=6, curriculum=((0, 0), (7, 1), (15, 2)),
        m0=4, mt=2, seed=0, checkpoint_every=100)

    prev = None
    res = None
    for upto in (6, 12, 18, 22):
        stage_cfg = dataclasses.replace(cfg, epochs=upto)
        res = train(train_path, stage_cfg, OUT / "run", resume_from=prev)
        prev = str(res.checkpoint_path)
        ari2, trace, mse = ari_probe(res.model, heldout_path)
        print(json.dumps({
            "epochs": upto, "wall_min": round((time.time() - t0) / 60, 1),
            "ari2": round(ari2, 3), "mode_mse": round(mse, 5),
            "trace": [round(t, 1) for t in trace],
            "last_total": res.history[-1]["epoch_mean_total"],
        }), flush=True)
    ari3, _, _ = ari_probe(res.model, gen3_path, k=5)
    dmse = dynamics_probe(res.model, train_path)
    hits, n, mean_d = attention_probe(res.model)
    print(json.dumps({"ari3_k5": round(ari3, 3), "dyn_1step_mse": round(dmse, 5),
                      "pick_hits": f"{hits}/{n}", "pick_mean_dist": mean_d}), flush=True)
    print(f"done in {(time.time()-t0)/60:.1f} min", flush=True)


if __name__ == "__main__":
    main()
