"""Pilot desk training run with periodic segmentation probes.

Writes datasets and checkpoints under /root/pilot/ (outside the package).
"""
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
from slotworld.model import ModelConfig
from slotworld.training import TrainConfig, train
from slotworld.world import WorldConfig

OUT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/root/pilot")
OUT.mkdir(parents=True, exist_ok=True)


def ari_probe(model, path, n=30, m0=4, k=None):
    reader = DatasetReader(path, training_mode=False)
    scores, traces = [], []
    for i in range(min(n, len(reader))):
        traj = reader[i]
        x = torch.from_numpy(np.ascontiguousarray(
            traj.images[0].transpose(2, 0, 1))).unsqueeze(0)
        gen = torch.Generator().manual_seed(1000 + i)
        lam, res = infer_t0(model, x, m0, gen, k=k, truncate=True)
        resp = res.stats.responsibilities[0]
        pred = resp.argmax(0).numpy()
        gt = traj.gt_masks[0]
        fg = gt > 0
        if fg.sum() == 0:
            continue
        scores.append(adjusted_rand_score(gt[fg], pred[fg]))
        traces.append([float(t[0]) for t in res.diagnostics.trace])
    traces = np.array(traces)
    return float(np.mean(scores)), traces.mean(axis=0).tolist()


def recon_mse(model, path, n=20, m0=4):
    reader = DatasetReader(path, training_mode=False)
    errs = []
    for i in range(min(n, len(reader))):
        traj = reader[i]
        x = torch.from_numpy(np.ascontiguousarray(
            traj.images[0].transpose(2, 0, 1))).unsqueeze(0)
        gen = torch.Generator().manual_seed(2000 + i)
        lam, res = infer_t0(model, x, m0, gen, truncate=True)
        comp = (res.mix.masks.unsqueeze(2) * res.mix.rgb_means).sum(1)
        errs.append(float(((comp - x) ** 2).mean()))
    return float(np.mean(errs))


def main():
    t0 = time.time()
    train_path = OUT / "train.bwds"
    heldout_path = OUT / "heldout2.bwds"
    gen3_path = OUT / "heldout3.bwds"
    if not train_path.exists():
        generate_dataset(WorldConfig.desk(seed=1), 500, 2, train_path)
        generate_dataset(WorldConfig.desk(seed=2), 100, 0, heldout_path)
        generate_dataset(WorldConfig.desk(n_blocks=3, seed=3), 100, 0, gen3_path)
        print(f"datasets generated in {time.time()-t0:.0f}s", flush=True)

    cfg = TrainConfig(
        model=ModelConfig.desk(),
        learning_rate=3e-4, grad_clip_norm=5.0, batch_size=4,
        epochs=3, curriculum=((0, 0), (6, 1), (12, 2)),
        m0=4, mt=2, seed=0, checkpoint_every=100)

    stages = [3, 6, 9, 12, 15, 18]
    prev = None
    for upto in stages:
        import dataclasses
        stage_cfg = dataclasses.replace(cfg, epochs=upto)
        res = train(train_path, stage_cfg, OUT / "run",
                    resume_from=prev)
        prev = str(res.checkpoint_path)
        ari2, trace = ari_probe(res.model, heldout_path)
        mse = recon_mse(res.model, heldout_path)
        report = {
            "epochs": upto,
            "wall_min": round((time.time() - t0) / 60, 1),
            "ari2": round(ari2, 3),
            "recon_mse": round(mse, 5),
            "mean_trace": [round(t, 1) for t in trace],
            "last_epoch_total": res.history[-1]["epoch_mean_total"] if res.history else None,
        }
        print(json.dumps(report), flush=True)
    ari3, _ = ari_probe(res.model, gen3_path, k=5)
    print(json.dumps({"ari3_k5": round(ari3, 3)}), flush=True)
    print(f"done in {(time.time()-t0)/60:.1f} min", flush=True)


if __name__ == "__main__":
    main()
