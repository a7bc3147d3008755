"""Planning in the space of inferred entities.

Rollouts sample slot states and iterate the dynamics model; candidate action
sequences are scored by pairwise distances between predicted slots and slots
inferred from a goal image; the cross-entropy method optimizes action
sequences; a model-predictive loop alternates planning, execution, and
re-inference. An entity-form action space resolves a slot index to a pick
point by probing the dynamics model's pairwise attention over uniformly
sampled pick locations.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import world as blockworld
from .inference import infer_t, infer_t0
from .model import (LatentParams, compose_observation, composite_image,
                    encode_pick_place, mixture_stats)
from .utils import config_digest
from .world import Action, WorldState

COST_METRICS = ("l2_subimage", "masked_iou")
MASK_THRESHOLD = 0.01
RGB_THRESHOLD = 0.1


class PlannerError(RuntimeError):
    pass


@dataclass(frozen=True)
class CEMConfig:
    population: int = 1000
    elite_fraction: float = 0.10
    iterations: int = 5
    horizon: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.elite_fraction <= 1):
            raise ValueError("elite_fraction must lie in (0, 1]")
        if self.population * self.elite_fraction < 2:
            raise ValueError("need population * elite_fraction >= 2")
        if self.iterations < 1 or self.horizon < 1:
            raise ValueError("iterations and horizon must be positive")

    @property
    def n_elite(self) -> int:
        return max(2, int(round(self.population * self.elite_fraction)))

    def to_dict(self) -> dict:
        return {"population": self.population, "elite_fraction": self.elite_fraction,
                "iterations": self.iterations, "horizon": self.horizon, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "CEMConfig":
        known = {"population", "elite_fraction", "iterations", "horizon", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown CEMConfig keys: {sorted(unknown)}")
        return CEMConfig(**d)


@dataclass
class EntityViews:
    """Decoded per-slot appearance used by the cost functions.

    masks: (..., K, H, W); rgb: (..., K, 3, H, W)
    """
    masks: torch.Tensor
    rgb: torch.Tensor

    @property
    def k(self) -> int:
        return self.masks.shape[-3]

    def subimages(self) -> torch.Tensor:
        """Masked sub-images m * rgb: (..., K, 3, H, W)."""
        return self.masks.unsqueeze(-3) * self.rgb


def slot_views(model, lam: LatentParams) -> EntityViews:
    """Noise-free decode of a posterior: views at the distribution mode."""
    with torch.no_grad():
        dec = model.decode(lam.mode_sample())
        mix = compose_observation(dec, scale=model.cfg.sigma)
    return EntityViews(masks=mix.masks, rgb=mix.rgb_means)


def _pair_costs(goal: EntityViews, pred: EntityViews, metric: str) -> torch.Tensor:
    """Cost of every (goal slot, predicted slot) pair.

    goal is unbatched (G, ...); pred may carry leading batch dims; returns
    (..., G, K).
    """
    if metric not in COST_METRICS:
        raise ValueError(f"metric must be one of {COST_METRICS}")
    g_mask = goal.masks  # (G, H, W)
    p_mask = pred.masks  # (..., K, H, W)
    gm = g_mask.unsqueeze(-3)  # (G, 1, H, W)
    pm = p_mask.unsqueeze(-4)  # (..., 1, K, H, W)
    if metric == "l2_subimage":
        gs = goal.subimages().unsqueeze(-4)  # (G, 1, 3, H, W)
        ps = pred.subimages().unsqueeze(-5)  # (..., 1, K, 3, H, W)
        return ((gs - ps) ** 2).sum(dim=(-3, -2, -1)).sqrt()
    rgb_close = ((goal.rgb.unsqueeze(-4) - pred.rgb.unsqueeze(-5)) ** 2
                 ).sum(dim=-3).sqrt() < RGB_THRESHOLD
    both = (gm > MASK_THRESHOLD) & (pm > MASK_THRESHOLD) & rgb_close
    either = (gm > MASK_THRESHOLD) | (pm > MASK_THRESHOLD)
    inter = both.sum(dim=(-2, -1)).to(torch.float32)
    union = either.sum(dim=(-2, -1)).to(torch.float32)
    cost = 1.0 - inter / union.clamp_min(1.0)
    return torch.where(union > 0, cost, torch.ones_like(cost))  # empty union: cost 1


def pairwise_cost(goal_mask: torch.Tensor, goal_rgb: torch.Tensor,
                  pred_mask: torch.Tensor, pred_rgb: torch.Tensor,
                  metric: str) -> float:
    """Distance between two single slots; see `_pair_costs` for the batched form."""
    a = EntityViews(masks=goal_mask.unsqueeze(0), rgb=goal_rgb.unsqueeze(0))
    b = EntityViews(masks=pred_mask.unsqueeze(0), rgb=pred_rgb.unsqueeze(0))
    return float(_pair_costs(a, b, metric)[0, 0])


def goal_cost(goal: EntityViews, pred: EntityViews, mode: str = "full",
              metric: str = "masked_iou", goal_subset: Optional[list] = None):
    """Entity-set cost between goal and predicted slots.

    full:   sum over goal entities of the min cost over predicted entities.
    greedy: the single minimum pair, returned with its (goal, predicted)
            indices so the caller can retire the matched goal entity.
    Returns (cost, None) in full mode, (cost, (g, p)) in greedy mode; cost
    carries pred's leading batch dims.
    """
    costs = _pair_costs(goal, pred, metric)  # (..., G, K)
    if goal_subset is not None:
        costs = costs[..., goal_subset, :]
    if mode == "full":
        return costs.min(dim=-1).values.sum(dim=-1), None
    if mode == "greedy":
        flat = costs.flatten(-2)
        best = flat.min(dim=-1)
        k = costs.shape[-1]
        g_idx = best.indices // k
        p_idx = best.indices % k
        if goal_subset is not None:
            g_idx = torch.as_tensor(goal_subset, device=g_idx.device)[g_idx]
        return best.values, (g_idx, p_idx)
    raise ValueError("mode must be 'full' or 'greedy'")


def rollout(model, lam: LatentParams, actions: torch.Tensor, generator=None):
    """Iterate the dynamics d steps from sampled slots; decode every step.

    lam: (B, K, .); actions: (B, d, ACTION_DIM). Returns (list of d
    LatentParams, (B, d, 3, H, W) expected images).
    """
    if actions.ndim != 3 or actions.shape[1] < 1:
        raise ValueError("actions must be (B, d>=1, ACTION_DIM)")
    lams, images = [], []
    with torch.no_grad():
        h = lam.sample(generator)
        for t in range(actions.shape[1]):
            lam, _ = model.dynamics(h, actions[:, t])
            h = lam.sample(generator)
            mix = compose_observation(model.decode(h), scale=model.cfg.sigma)
            lams.append(lam)
            images.append(composite_image(mix))
    return lams, torch.stack(images, dim=1)


def dynamics_attention(model, h: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Per-slot summed pairwise attention gates from one dynamics pass: (B, K)."""
    with torch.no_grad():
        _, att = model.dynamics(h, a)
    return att


def entity_to_pick(model, entity_id: int, h: torch.Tensor, n_samples: int,
                   generator=None, chunk: int = 4096) -> tuple:
    """Attention-weighted mean pick point for one slot.

    Pick locations are sampled uniformly over the image; each is scored by the
    slot's summed pairwise attention under a probe action placing at the image
    center (place location does not gate picking), and the weighted mean
    coordinate is returned.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    k = h.shape[1]
    if not (0 <= entity_id < k):
        raise ValueError(f"entity_id {entity_id} out of range for K={k}")
    size = model.cfg.image_size
    device = h.device
    num = torch.zeros(2, dtype=torch.float64)
    den = torch.zeros((), dtype=torch.float64)
    with torch.no_grad():
        for start in range(0, n_samples, chunk):
            n = min(chunk, n_samples - start)
            picks = torch.rand(n, 2, generator=generator, device=device,
                               dtype=h.dtype) * size
            center = torch.full((n, 2), size / 2.0, dtype=h.dtype, device=device)
            acts = encode_pick_place(picks, center, size)
            h_rep = h.expand(n, -1, -1)
            _, att = model.dynamics(h_rep, acts)
            w = att[:, entity_id].double()
            num += (w.unsqueeze(1) * picks.double()).sum(dim=0)
            den += w.sum()
    if float(den) < 1e-8:
        raise PlannerError(f"slot {entity_id} unresponsive to picks")
    xy = (num / den).tolist()
    return float(xy[0]), float(xy[1])


# ---------------------------------------------------------------------------
# Cross-entropy method
# ---------------------------------------------------------------------------

@dataclass
class GoalSpec:
    """Slots inferred from a goal image with their decoded views."""
    image: torch.Tensor  # (3, H, W)
    lam: LatentParams  # (1, K, .)
    views: EntityViews  # (K, H, W) masks / (K, 3, H, W) rgb


def make_goal_spec(model, goal_image: torch.Tensor, m0: int = 4,
                   generator=None) -> GoalSpec:
    lam, _ = infer_t0(model, goal_image.unsqueeze(0), m0, generator, truncate=True)
    views = slot_views(model, lam)
    return GoalSpec(image=goal_image, lam=lam,
                    views=EntityViews(masks=views.masks[0], rgb=views.rgb[0]))


@dataclass
class PlanResult:
    actions: list  # chosen Actions in the requested space
    coordinate_actions: list  # the same plan, entity picks resolved
    cost_trace: list  # per-iteration (population,) candidate costs
    dist_trace: list  # per-iteration (mean, std) of the sampling distribution
    elite_mean_costs: list
    best_costs: list
    matched_goal: Optional[int]
    matched_pred: Optional[int]
    predicted_latents: list
    predicted_images: np.ndarray  # (d, 3, H, W)
    plan_cost: float

    def to_dict(self) -> dict:
        return {
            "elite_mean_costs": self.elite_mean_costs,
            "best_costs": self.best_costs,
            "plan_cost": self.plan_cost,
            "matched_goal": self.matched_goal,
            "matched_pred": self.matched_pred,
        }


def _action_bounds(action_space: str, image_size: int, k: int) -> tuple:
    if action_space == "entity":
        low = np.array([0.0, 0.0, 0.0])
        high = np.array([float(k), image_size - 1e-3, image_size - 1e-3])
    elif action_space == "xy":
        low = np.zeros(4)
        high = np.full(4, image_size - 1e-3)
    else:
        raise ValueError("action_space must be 'entity' or 'xy'")
    return low, high


def _resolve_candidates(cands: torch.Tensor, action_space: str, pick_table,
                        image_size: int):
    """Candidate parameter rows -> encoded model actions (N, d, ACTION_DIM).

    Returns (encoded actions, validity mask). Entity rows index a precomputed
    pick table; slots without a usable pick invalidate the candidate.
    """
    n, d, _ = cands.shape
    if action_space == "xy":
        picks = cands[..., 0:2]
        places = cands[..., 2:4]
        valid = torch.ones(n, dtype=torch.bool)
    else:
        ids = cands[..., 0].long().clamp(0, len(pick_table) - 1)
        table = torch.tensor([p if p is not None else (0.0, 0.0) for p in pick_table],
                             dtype=cands.dtype)
        usable = torch.tensor([p is not None for p in pick_table])
        picks = table[ids]
        valid = usable[ids].all(dim=1)
        places = cands[..., 1:3]
    return encode_pick_place(picks, places, image_size), valid


def cem_plan(model, lam0: LatentParams, goal: GoalSpec, cem: CEMConfig,
             cost_mode: str = "greedy", metric: str = "masked_iou",
             action_space: str = "entity", generator=None,
             goal_subset: Optional[list] = None, pick_samples: int = 512,
             score_fn: Optional[Callable] = None) -> PlanResult:
    """Cross-entropy action search: uniform first iteration, then iterative
    diagonal-Gaussian refits of the elite set.

    `score_fn` (candidates (N, d, dim) -> costs (N,)) replaces the model
    rollout scoring entirely; it exists as a seam for optimizer tests against
    analytic objectives.
    """
    if generator is None:
        generator = torch.Generator()
    k = lam0.mean.shape[1]
    low, high = _action_bounds(action_space, model.cfg.image_size, k)
    dim = len(low)
    lowt = torch.tensor(low, dtype=torch.float32)
    hight = torch.tensor(high, dtype=torch.float32)

    pick_table = None
    if action_space == "entity" and score_fn is None:
        h0 = lam0.mode_sample()
        pick_table = []
        for slot in range(k):
            try:
                pick_table.append(entity_to_pick(model, slot, h0, pick_samples,
                                                 generator=generator))
            except PlannerError:
                pick_table.append(None)
        if all(p is None for p in pick_table):
            raise PlannerError("no slot responds to picks")

    mean = (lowt + hight) / 2.0 * torch.ones(cem.horizon, dim)
    std = (hight - lowt) * torch.ones(cem.horizon, dim)
    cost_trace, dist_trace, elite_means, best_costs = [], [], [], []
    elite_mean = mean
    for it in range(cem.iterations):
        if it == 0:
            u = torch.rand(cem.population, cem.horizon, dim, generator=generator)
            cands = lowt + u * (hight - lowt)
        else:
            eps = torch.randn(cem.population, cem.horizon, dim, generator=generator)
            cands = (mean + std * eps).clamp(lowt, hight)
        if score_fn is not None:
            costs = torch.as_tensor(score_fn(cands), dtype=torch.float32)
        else:
            acts, valid = _resolve_candidates(cands, action_space, pick_table,
                                              model.cfg.image_size)
            lams, _ = rollout(model, lam0.expand_batch(cem.population), acts, generator)
            views = slot_views(model, lams[-1])
            if cost_mode == "unfactorized":
                with torch.no_grad():
                    mix = compose_observation(model.decode(lams[-1].mode_sample()),
                                              scale=model.cfg.sigma)
                    comp = composite_image(mix)
                costs = ((comp - goal.image.unsqueeze(0)) ** 2).mean(dim=(1, 2, 3))
            else:
                costs, _ = goal_cost(goal.views, views, mode=cost_mode,
                                     metric=metric, goal_subset=goal_subset)
            costs = torch.where(valid, costs, torch.full_like(costs, torch.inf))
        if not torch.isfinite(costs).any():
            raise PlannerError("all CEM candidates scored non-finite")
        order = torch.argsort(costs)
        elites = cands[order[:cem.n_elite]]
        elite_costs = costs[order[:cem.n_elite]]
        mean = elites.mean(dim=0)
        std = elites.std(dim=0, unbiased=False).clamp_min(1e-3)
        elite_mean = mean
        cost_trace.append(costs.detach().numpy().copy())
        dist_trace.append((mean.numpy().copy(), std.numpy().copy()))
        elite_means.append(float(elite_costs[torch.isfinite(elite_costs)].mean()))
        best_costs.append(float(costs[order[0]]))

    # Score and decode the returned plan: the final iteration's elite mean.
    chosen = elite_mean.unsqueeze(0)
    matched_goal = matched_pred = None
    if score_fn is not None:
        plan_cost = float(score_fn(chosen)[0])
        actions = coordinate_actions = _params_to_actions(chosen[0], action_space, None)
        predicted_latents, predicted_images = [], np.zeros((0,))
    else:
        acts, _ = _resolve_candidates(chosen, action_space, pick_table,
                                      model.cfg.image_size)
        lams, imgs = rollout(model, lam0, acts, generator)
        views = slot_views(model, lams[-1])
        if cost_mode == "unfactorized":
            with torch.no_grad():
                mix = compose_observation(model.decode(lams[-1].mode_sample()),
                                          scale=model.cfg.sigma)
            plan_cost = float(((composite_image(mix) - goal.image.unsqueeze(0)) ** 2).mean())
        else:
            c, pair = goal_cost(goal.views, views, mode=cost_mode, metric=metric,
                                goal_subset=goal_subset)
            plan_cost = float(c[0])
            if pair is not None:
                matched_goal, matched_pred = int(pair[0][0]), int(pair[1][0])
        actions = _params_to_actions(chosen[0], action_space, pick_table)
        coordinate_actions = _coordinate_plan(chosen[0], action_space, pick_table)
        predicted_latents = [LatentParams(l.det[0:1], l.mean[0:1], l.log_std[0:1])
                             for l in lams]
        predicted_images = imgs[0].numpy()
    return PlanResult(actions=actions, coordinate_actions=coordinate_actions,
                      cost_trace=cost_trace, dist_trace=dist_trace,
                      elite_mean_costs=elite_means, best_costs=best_costs,
                      matched_goal=matched_goal, matched_pred=matched_pred,
                      predicted_latents=predicted_latents,
                      predicted_images=predicted_images, plan_cost=plan_cost)


def _params_to_actions(params: torch.Tensor, action_space: str, pick_table) -> list:
    out = []
    for row in params:
        vals = [float(v) for v in row]
        if action_space == "xy":
            out.append(Action(mode="coordinate", pick=(vals[0], vals[1]),
                              place=(vals[2], vals[3])))
        else:
            eid = int(vals[0])
            if pick_table is not None:
                eid = min(eid, len(pick_table) - 1)
            out.append(Action(mode="entity", entity_id=eid, place=(vals[1], vals[2])))
    return out


def _coordinate_plan(params: torch.Tensor, action_space: str, pick_table) -> list:
    if action_space == "xy":
        return _params_to_actions(params, action_space, None)
    out = []
    for action in _params_to_actions(params, action_space, pick_table):
        pick = pick_table[action.entity_id]
        if pick is None:
            usable = [p for p in pick_table if p is not None]
            pick = usable[0] if usable else (0.0, 0.0)
        out.append(Action(mode="coordinate", pick=pick, place=action.place))
    return out


# ---------------------------------------------------------------------------
# Model-predictive control
# ---------------------------------------------------------------------------

@dataclass
class PlanTask:
    initial_state: WorldState
    goal_state: WorldState
    goal_image: np.ndarray  # (H, W, 3) float32
    tol: float


def _to_torch_image(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def _encode_b64(arr: np.ndarray) -> dict:
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    return {"shape": list(u8.shape), "encoding": "base64/u8",
            "data": base64.b64encode(u8.tobytes()).decode("ascii")}


def mpc_loop(model, task: PlanTask, cem: CEMConfig, cost_mode: str = "greedy",
             metric: str = "masked_iou", action_space: str = "entity",
             m0: int = 4, mt: int = 2, seed: int = 0, pick_samples: int = 512,
             satisfied_cost: float = 0.5) -> dict:
    """Closed-loop planning episode against the block-world simulator.

    Plans n = goal-block-count steps per round for at most 2n rounds, executing
    and re-inferring after every action. In greedy mode, goal entities whose
    current best match already costs below `satisfied_cost` are removed from
    the matching pool before each round, so planning concentrates on the
    unsatisfied goals (background slots match immediately and drop out).
    """
    if task.goal_image.shape[0] != model.cfg.image_size:
        raise ValueError("environment and model image sizes differ")
    generator = torch.Generator()
    generator.manual_seed(seed)
    n = len(task.goal_state.blocks)
    budget = 2 * n
    goal = make_goal_spec(model, _to_torch_image(task.goal_image), m0=m0,
                          generator=generator)

    state = task.initial_state
    obs, _ = blockworld.render(state)
    lam, res = infer_t0(model, _to_torch_image(obs).unsqueeze(0), m0, generator,
                        truncate=True)
    refine_state, h = res.state, res.h
    attempts = []
    completed = blockworld.evaluate_build(state, task.goal_state, task.tol) >= 1.0
    rounds = 0
    try:
        while not completed and rounds < budget:
            goal_subset = None
            if cost_mode == "greedy":
                cur_views = slot_views(model, lam)
                cur = EntityViews(masks=cur_views.masks[0], rgb=cur_views.rgb[0])
                per_goal = _pair_costs(goal.views, cur, metric).min(dim=-1).values
                goal_subset = [i for i, c in enumerate(per_goal) if c > satisfied_cost]
                if not goal_subset:
                    goal_subset = None  # nothing looks unsatisfied; use all goals
            plan = cem_plan(model, lam, goal,
                            CEMConfig(population=cem.population,
                                      elite_fraction=cem.elite_fraction,
                                      iterations=cem.iterations, horizon=n,
                                      seed=cem.seed),
                            cost_mode=cost_mode, metric=metric,
                            action_space=action_space, generator=generator,
                            goal_subset=goal_subset, pick_samples=pick_samples)
            realized = []
            for act in plan.coordinate_actions:
                act = Action(mode="coordinate",
                             pick=(float(np.clip(act.pick[0], 0, model.cfg.image_size - 1e-3)),
                                   float(np.clip(act.pick[1], 0, model.cfg.image_size - 1e-3))),
                             place=act.place)
                state = blockworld.step(state, act)
                obs, _ = blockworld.render(state)
                realized.append(obs)
                lam, res = infer_t(model, _to_torch_image(obs).unsqueeze(0),
                                   encode_pick_place(
                                       torch.tensor(act.pick), torch.tensor(act.place),
                                       model.cfg.image_size).unsqueeze(0),
                                   h, mt, generator, state=refine_state, truncate=True)
                refine_state, h = res.state, res.h
            accuracy = blockworld.evaluate_build(state, task.goal_state, task.tol)
            completed = accuracy >= 1.0
            attempts.append({
                "round": rounds,
                "planned": [  # entity ids or pick points plus places
                    {"mode": a.mode, "entity_id": a.entity_id, "pick": a.pick,
                     "place": list(a.place)} for a in plan.actions],
                "executed": [{"pick": list(a.pick), "place": list(a.place)}
                             for a in plan.coordinate_actions],
                "plan_cost": plan.plan_cost,
                "elite_mean_costs": plan.elite_mean_costs,
                "matched_goal": plan.matched_goal,
                "matched_pred": plan.matched_pred,
                "accuracy_after": accuracy,
                "predicted_final_image": _encode_b64(
                    plan.predicted_images[-1].transpose(1, 2, 0)),
                "realized_image": _encode_b64(realized[-1]),
            })
            rounds += 1
    except PlannerError as e:
        return _episode_report(task, attempts, state, completed, rounds,
                               error=str(e))
    return _episode_report(task, attempts, state, completed, rounds)


def _episode_report(task: PlanTask, attempts, state, completed, rounds,
                    error: Optional[str] = None) -> dict:
    accuracy = blockworld.evaluate_build(state, task.goal_state, task.tol)
    return {
        "goal_image_digest": config_digest(_encode_b64(task.goal_image)),
        "n_goal_blocks": len(task.goal_state.blocks),
        "attempts": attempts,
        "rounds_used": rounds,
        "completed": bool(completed),
        "final_accuracy": float(accuracy),
        "error": error,
    }
