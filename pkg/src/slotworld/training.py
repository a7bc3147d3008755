"""End-to-end objective and training loop.

The objective runs the full iterative inference over a trajectory and sums
per-timestep reconstruction terms minus complexity terms: at the first frame
the divergence is taken against a standard normal, afterwards against the
dynamics-predicted posterior. A horizon curriculum turns the last d timesteps
of each trajectory into pure prediction rollouts (no refinement) whose
reconstruction terms still apply, which trains multi-step prediction.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .dataset import DatasetReader
from .inference import InferDiagnostics, infer_t0, refine_timestep
from .model import (ModelConfig, build_model, encode_action, save_checkpoint,
                    standard_normal_like)
from .utils import split_seed


class NonFiniteElbo(RuntimeError):
    """Objective blew up; `term` names the offending piece."""

    def __init__(self, term: str):
        super().__init__(f"non-finite objective term: {term}")
        self.term = term


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    learning_rate: float = 3e-4
    grad_clip_norm: float = 5.0
    batch_size: int = 4
    epochs: int = 10
    curriculum: tuple = ((0, 0),)  # sorted (first_epoch, horizon) pairs
    m0: int = 4
    mt: int = 2
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.m0 < 1 or self.mt < 0:
            raise ValueError("need m0 >= 1 and mt >= 0")
        pairs = tuple(tuple(int(v) for v in p) for p in self.curriculum)
        epochs = [p[0] for p in pairs]
        horizons = [p[1] for p in pairs]
        if sorted(epochs) != epochs or sorted(horizons) != horizons:
            raise ValueError("curriculum horizon must be nondecreasing in epoch")
        object.__setattr__(self, "curriculum", pairs)

    @property
    def k_slots(self) -> int:
        return self.model.k_slots

    @property
    def variant(self) -> str:
        return self.model.variant

    def horizon_at(self, epoch: int) -> int:
        h = 0
        for start, horizon in self.curriculum:
            if epoch >= start:
                h = horizon
        return h

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["curriculum"] = [list(p) for p in self.curriculum]
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "curriculum" in d:
            d["curriculum"] = tuple(tuple(p) for p in d["curriculum"])
        return TrainConfig(**d)


@dataclass
class ElboBreakdown:
    """Objective value and its per-timestep pieces, each a (B,) tensor."""
    total: torch.Tensor
    recon: list  # reconstruction terms per timestep
    kl: list  # complexity terms per timestep
    diagnostics: list  # per-timestep InferDiagnostics

    @property
    def mean_total(self) -> float:
        return float(self.total.detach().mean())


def elbo(model, images: torch.Tensor, actions: torch.Tensor, m0: int = 4,
         mt: int = 2, rollout_horizon: int = 0, generator=None,
         k: Optional[int] = None, stop_gradients: bool = True,
         truncate: bool = False) -> ElboBreakdown:
    """Evidence bound of a trajectory batch under the full inference procedure.

    images: (B, T+1, 3, H, W); actions: (B, T, ACTION_DIM). The last
    `rollout_horizon` timesteps run with zero refinement steps, so their
    complexity terms vanish and their reconstruction terms score pure
    dynamics rollouts.
    """
    n_steps = actions.shape[1]
    if images.shape[1] != n_steps + 1:
        raise ValueError("need one more image than actions")
    if rollout_horizon > n_steps:
        raise ValueError("rollout horizon exceeds trajectory length")
    if generator is None:
        generator = torch.Generator()
    k = k if k is not None else model.cfg.k_slots
    recon, kls, diags = [], [], []
    with torch.enable_grad():
        lam = model.initial_latents(images.shape[0], k, generator)
        if truncate:
            lam = lam.detach().requires_grad_()
        prior = standard_normal_like(lam)
        state = model.refine_initial_state(images.shape[0], k,
                                           dtype=images.dtype, device=images.device)
        res = refine_timestep(model, images[:, 0], lam, prior, state, m0, generator,
                              stop_gradients=stop_gradients, truncate=truncate)
        recon.append(res.stats.log_likelihood)
        kls.append(res.kl)
        diags.append(res.diagnostics)
        h = res.h
        for t in range(1, n_steps + 1):
            m_t = 0 if t > n_steps - rollout_horizon else mt
            prior_t, _ = model.dynamics(h, actions[:, t - 1])
            res = refine_timestep(model, images[:, t], prior_t, prior_t, res.state,
                                  m_t, generator, stop_gradients=stop_gradients,
                                  truncate=truncate)
            recon.append(res.stats.log_likelihood)
            kls.append(res.kl)
            diags.append(res.diagnostics)
            h = res.h
    for t, (r, c) in enumerate(zip(recon, kls)):
        if not torch.isfinite(r).all():
            raise NonFiniteElbo(f"recon[{t}]")
        if not torch.isfinite(c).all():
            raise NonFiniteElbo(f"kl[{t}]")
    total = sum(r - c for r, c in zip(recon, kls))
    return ElboBreakdown(total=total, recon=recon, kl=kls, diagnostics=diags)


@dataclass
class TrainResult:
    model: torch.nn.Module
    checkpoint_path: Path
    metrics_path: Path
    history: list  # per-epoch dicts


def _load_batch(reader: DatasetReader, indices, image_size: int):
    images, actions = [], []
    for i in indices:
        traj = reader[int(i)]
        images.append(torch.from_numpy(np.ascontiguousarray(
            traj.images.transpose(0, 3, 1, 2))))
        actions.append(torch.stack([encode_action(a, image_size) for a in traj.actions])
                       if traj.actions else torch.zeros(0, 5))
    return torch.stack(images), torch.stack(actions)


def train(dataset_path, config: TrainConfig, out_dir,
          resume_from: Optional[str] = None) -> TrainResult:
    """Adam on the negative objective with global-norm gradient clipping.

    Fully seeded: model init, batch order, and sampling noise all derive from
    config.seed, so two runs produce identical metric logs. Ground-truth
    label maps are never read: the dataset is opened in training mode, which
    makes any such access raise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reader = DatasetReader(dataset_path, training_mode=True)
    n_steps = reader.index["horizon"]

    torch.manual_seed(split_seed(config.seed, "model-init"))
    model = build_model(config.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    start_epoch = 0
    if resume_from is not None:
        from .model import load_checkpoint
        model, payload = load_checkpoint(resume_from)
        if model.cfg != config.model:
            raise ValueError("resume checkpoint was trained with a different model config")
        model.train()
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        if payload.get("optimizer"):
            optimizer.load_state_dict(payload["optimizer"])
        start_epoch = payload["epoch"]

    metrics_path = out_dir / "metrics.jsonl"
    checkpoint_path = out_dir / "checkpoint.pt"
    history = []
    warned_short = False
    t_start = time.monotonic()
    with open(metrics_path, "a") as log:
        for epoch in range(start_epoch, config.epochs):
            d = config.horizon_at(epoch)
            if n_steps < d:
                if not warned_short:
                    print(f"skipping epochs with horizon {d}: trajectories have "
                          f"only {n_steps} steps")
                    warned_short = True
                continue
            order = np.random.default_rng(
                split_seed(config.seed, f"order/{epoch}")).permutation(len(reader))
            epoch_totals, n_bad = [], 0
            for step in range(0, len(order), config.batch_size):
                indices = order[step: step + config.batch_size]
                images, actions = _load_batch(reader, indices, config.model.image_size)
                gen = torch.Generator()
                gen.manual_seed(split_seed(config.seed, f"noise/{epoch}/{step}"))
                try:
                    breakdown = elbo(model, images, actions, m0=config.m0,
                                     mt=config.mt, rollout_horizon=d, generator=gen)
                except NonFiniteElbo:
                    n_bad += 1
                    continue
                loss = -breakdown.total.mean()
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                grad_norm = torch.nn.utils.clip_grad_norm_(
                    model.parameters(), config.grad_clip_norm)
                optimizer.step()
                total = breakdown.mean_total
                epoch_totals.append(total)
                log.write(json.dumps({
                    "epoch": epoch, "step": step // config.batch_size,
                    "total": total,
                    "recon": float(sum(r.detach().mean() for r in breakdown.recon)),
                    "kl": float(sum(c.detach().mean() for c in breakdown.kl)),
                    "grad_norm": float(grad_norm), "horizon": d,
                }) + "\n")
            if not epoch_totals:
                raise TrainingDiverged(
                    f"objective non-finite for the whole of epoch {epoch}")
            summary = {
                "epoch": epoch, "epoch_mean_total": float(np.mean(epoch_totals)),
                "non_finite_steps": n_bad, "horizon": d,
            }
            log.write(json.dumps(summary) + "\n")
            log.flush()
            # wall time is for callers only; it would break log determinism
            history.append({**summary, "wall_seconds": time.monotonic() - t_start})
            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
                save_checkpoint(checkpoint_path, model, optimizer, epoch=epoch + 1,
                                extra={"train_config": config.to_dict()})
    model.eval()
    return TrainResult(model=model, checkpoint_path=checkpoint_path,
                       metrics_path=metrics_path, history=history)


def train_ablation(dataset_path, config: TrainConfig, out_dir,
                   resume_from: Optional[str] = None) -> TrainResult:
    """Training entry point for the symmetry-breaking model variants."""
    if config.variant not in ("unfactorized", "no_weight_sharing"):
        raise ValueError("train_ablation expects an ablation variant")
    return train(dataset_path, config, out_dir, resume_from=resume_from)
