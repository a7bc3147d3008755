"""Entity model: slot decoder, pixel-mixture observation, pairwise dynamics.

Three parameterized families operate on K latent slots with shared weights:
a spatial-broadcast decoder mapping one slot sample to RGB means plus a mask
logit map, a pairwise interaction dynamics that applies the same per-slot and
per-pair functions everywhere, and a recurrent refinement core (driven from
`inference.py`). Two ablation variants break the symmetry on purpose: an
unfactorized model with one monolithic latent, and a no-weight-sharing model
with K separate weight sets bound to fixed slot indices.

Each slot's state splits into a deterministic vector and a diagonal-Gaussian
stochastic part; distribution parameters are (mean, log_std) over the
stochastic half only.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .world import Action

LOG_STD_MIN = -6.0
LOG_STD_MAX = 2.0
# The transition head keeps a wider floor: a confidently wrong prediction
# would dominate the next frame's refinement inputs through the divergence
# term and lock inference onto the mistake; flooring the predicted scale
# keeps refinement evidence-dominated.
DYN_LOG_STD_MIN = -1.2
ACTION_DIM = 5  # (mode, pick_x, pick_y, place_x, place_y), coords in [-1, 1]

VARIANTS = ("symmetric", "unfactorized", "no_weight_sharing")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    k_slots: int = 4
    det_size: int = 64
    sto_size: int = 64
    sigma: float = 0.1  # fixed global observation scale
    variant: str = "symmetric"
    decoder_channels: int = 32
    refine_channels: int = 32
    refine_pool: int = 64
    refine_mlp: int = 128
    refine_lstm: int = 128
    dyn_core: int = 128
    dyn_action: int = 32
    dyn_act_eff: int = 128
    dyn_act_att: int = 128  # hidden width; the gate itself is a scalar
    dyn_obj_eff: int = 256
    dyn_obj_att: int = 256  # hidden width; the gate itself is a scalar
    dyn_comb: int = 256
    init_noise: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.k_slots < 1 or self.det_size < 1 or self.sto_size < 1:
            raise ValueError("k_slots, det_size, sto_size must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def latent_size(self) -> int:
        return self.det_size + self.sto_size

    @staticmethod
    def desk(k_slots: int = 4, variant: str = "symmetric") -> "ModelConfig":
        """Small preset at 32x32 for fast CPU runs.

        Dynamics widths are the full-scale table divided by four; conv stacks
        keep 16 channels (width there is nearly free on CPU and edge fidelity
        suffers below it).
        """
        return ModelConfig(
            image_size=32, k_slots=k_slots, det_size=16, sto_size=16,
            variant=variant, decoder_channels=16, refine_channels=16,
            refine_pool=16, refine_mlp=32, refine_lstm=32,
            dyn_core=32, dyn_action=8, dyn_act_eff=32, dyn_act_att=32,
            dyn_obj_eff=64, dyn_obj_att=64, dyn_comb=64)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(ModelConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return ModelConfig(**d)


# ---------------------------------------------------------------------------
# Latent containers
# ---------------------------------------------------------------------------

@dataclass
class LatentParams:
    """Posterior parameters for a batch of slot sets.

    det:     (B, K, R_d) deterministic component
    mean:    (B, K, R_s) stochastic mean
    log_std: (B, K, R_s) stochastic log standard deviation
    """
    det: torch.Tensor
    mean: torch.Tensor
    log_std: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    def sample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Pathwise sample, concatenated with the deterministic part: (B,K,R)."""
        noise = torch.empty_like(self.mean).normal_(generator=generator)
        return torch.cat([self.det, self.mean + self.std * noise], dim=-1)

    def mode_sample(self) -> torch.Tensor:
        """Noise-free state (det, mean): the distribution mode."""
        return torch.cat([self.det, self.mean], dim=-1)

    def detach(self) -> "LatentParams":
        return LatentParams(self.det.detach(), self.mean.detach(), self.log_std.detach())

    def requires_grad_(self) -> "LatentParams":
        # Only valid on leaf tensors (i.e. after detach()).
        for t in (self.det, self.mean, self.log_std):
            t.requires_grad_(True)
        return self

    def permute_slots(self, perm) -> "LatentParams":
        return LatentParams(self.det[:, perm], self.mean[:, perm], self.log_std[:, perm])

    def expand_batch(self, n: int) -> "LatentParams":
        return LatentParams(self.det.expand(n, -1, -1), self.mean.expand(n, -1, -1),
                            self.log_std.expand(n, -1, -1))


@dataclass
class SlotDecode:
    """Per-slot decoder outputs: rgb_mean (B,K,3,H,W), mask_logit (B,K,H,W)."""
    rgb_mean: torch.Tensor
    mask_logit: torch.Tensor


@dataclass
class MixtureObservation:
    """Per-pixel mixture over slots: masks sum to one at every pixel."""
    masks: torch.Tensor  # (B, K, H, W)
    rgb_means: torch.Tensor  # (B, K, 3, H, W)
    scale: float
    mask_logits: Optional[torch.Tensor] = None  # kept for numerically-stable logs


def clamp_log_std(log_std: torch.Tensor) -> torch.Tensor:
    return log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)


def clamp_dyn_log_std(log_std: torch.Tensor) -> torch.Tensor:
    return log_std.clamp(DYN_LOG_STD_MIN, LOG_STD_MAX)


def kl_diag_gaussian(q: LatentParams, p: LatentParams) -> torch.Tensor:
    """KL(N(q) || N(p)) summed over slots and stochastic dims: (B,).

    The deterministic component carries no distribution and is excluded.
    """
    var_q = (2.0 * q.log_std).exp()
    var_p = (2.0 * p.log_std).exp()
    kl = p.log_std - q.log_std + (var_q + (q.mean - p.mean) ** 2) / (2.0 * var_p) - 0.5
    return kl.sum(dim=(1, 2))


def standard_normal_like(lam: LatentParams) -> LatentParams:
    return LatentParams(det=torch.zeros_like(lam.det),
                        mean=torch.zeros_like(lam.mean),
                        log_std=torch.zeros_like(lam.log_std))


# ---------------------------------------------------------------------------
# Observation mixture
# ---------------------------------------------------------------------------

def compose_observation(decodes: SlotDecode, scale: float = 0.1) -> MixtureObservation:
    """Normalize mask logits across slots into per-pixel mixture weights."""
    masks = torch.softmax(decodes.mask_logit, dim=1)
    return MixtureObservation(masks=masks, rgb_means=decodes.rgb_mean, scale=scale,
                              mask_logits=decodes.mask_logit)


@dataclass
class MixtureStats:
    """Per-pixel quantities shared by the likelihood and the refinement inputs."""
    log_likelihood: torch.Tensor  # (B,)
    pixel_ll: torch.Tensor  # (B, H, W) log-density of the full mixture
    loo_ll: torch.Tensor  # (B, K, H, W) log-density with slot k left out
    responsibilities: torch.Tensor  # (B, K, H, W)


LOO_FLOOR = 1e-3  # uniform floor component so the leave-one-out channel exists at K=1


def mixture_stats(x: torch.Tensor, mix: MixtureObservation) -> MixtureStats:
    """Evaluate the pixel mixture at image x: (B, 3, H, W) in [0, 1].

    Everything runs in the log domain so far-off slots underflow gracefully
    instead of corrupting the responsibility simplex.
    """
    sigma = mix.scale
    diff = x.unsqueeze(1) - mix.rgb_means  # (B, K, 3, H, W)
    log_norm = -0.5 * math.log(2.0 * math.pi) - math.log(sigma)
    log_g = (diff ** 2).sum(dim=2) * (-0.5 / sigma ** 2) + 3.0 * log_norm  # (B,K,H,W)
    # Deliberately goes through the normalized masks (not the logits) so the
    # mask tensor is a differentiation target for the refinement inputs.
    log_m = mix.masks.clamp_min(torch.finfo(x.dtype).tiny).log()
    joint = log_m + log_g
    joint_max = joint.max(dim=1, keepdim=True).values.detach()
    p_shift = (joint - joint_max).exp()  # the dominant slot never underflows
    total_shift = p_shift.sum(dim=1, keepdim=True)
    pixel_ll = total_shift.squeeze(1).log() + joint_max.squeeze(1)
    resp = p_shift / total_shift
    tiny = torch.finfo(x.dtype).tiny
    loo_wo_floor = (total_shift - p_shift).clamp_min(tiny).log() + joint_max
    floor = torch.full_like(loo_wo_floor, math.log(LOO_FLOOR))
    loo_ll = torch.logaddexp(loo_wo_floor, floor)
    return MixtureStats(log_likelihood=pixel_ll.sum(dim=(1, 2)),
                        pixel_ll=pixel_ll, loo_ll=loo_ll, responsibilities=resp)


def observation_log_likelihood(x: torch.Tensor, mix: MixtureObservation) -> torch.Tensor:
    """Sum over pixels of log sum_k mask_k * N(x; rgb_mean_k, sigma^2 I): (B,)."""
    return mixture_stats(x, mix).log_likelihood


def composite_image(mix: MixtureObservation) -> torch.Tensor:
    """Expected image under the mixture: (B, 3, H, W)."""
    return (mix.masks.unsqueeze(2) * mix.rgb_means).sum(dim=1)


# ---------------------------------------------------------------------------
# Action encoding
# ---------------------------------------------------------------------------

def encode_action(action: Action, image_size: int) -> torch.Tensor:
    """Flat action vector (mode, pick, place) with coordinates in [-1, 1].

    Entity-form actions must be resolved to pick coordinates by the planner
    before the model sees them, so the mode flag stays 0 for model inputs.
    """
    if action.mode != "coordinate":
        raise ValueError("encode_action requires a coordinate-form action; "
                         "resolve entity_id to a pick point first")
    s = 2.0 / image_size
    return torch.tensor([0.0,
                         s * action.pick[0] - 1.0, s * action.pick[1] - 1.0,
                         s * action.place[0] - 1.0, s * action.place[1] - 1.0],
                        dtype=torch.float32)


def encode_pick_place(pick_xy: torch.Tensor, place_xy: torch.Tensor,
                      image_size: int) -> torch.Tensor:
    """Vectorized coordinate-action encoding: (..., 2)+(..., 2) -> (..., 5)."""
    s = 2.0 / image_size
    mode = torch.zeros_like(pick_xy[..., :1])
    return torch.cat([mode, s * pick_xy - 1.0, s * place_xy - 1.0], dim=-1)


# ---------------------------------------------------------------------------
# Network pieces
# ---------------------------------------------------------------------------

def coordinate_map(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """(2, H, W) channels holding x and y coordinates in [-1, 1]."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=0)


class SpatialBroadcastDecoder(nn.Module):
    """Broadcast a slot sample over a coordinate grid, then convolve to RGB+mask."""

    def __init__(self, latent_size: int, image_size: int, channels: int):
        super().__init__()
        self.image_size = image_size
        c = channels
        self.convs = nn.ModuleList([
            nn.Conv2d(latent_size + 2, c, 5, padding=2),
            nn.Conv2d(c, c, 5, padding=2),
            nn.Conv2d(c, c, 5, padding=2),
            nn.Conv2d(c, c, 5, padding=2),
        ])
        self.head = nn.Conv2d(c, 4, 5, padding=2)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        # h: (N, R) -> (N, 4, H, W)
        n = h.shape[0]
        hw = self.image_size
        grid = h.view(n, -1, 1, 1).expand(n, h.shape[1], hw, hw)
        coords = coordinate_map(hw, hw, dtype=h.dtype, device=h.device)
        z = torch.cat([grid, coords.unsqueeze(0).expand(n, -1, -1, -1)], dim=1)
        for conv in self.convs:
            z = F.elu(conv(z))
        return self.head(z)


class LSTMCellManual(nn.Module):
    """Plain LSTM cell from linear primitives (cleanly twice-differentiable)."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.ih = nn.Linear(input_size, 4 * hidden_size)
        self.hh = nn.Linear(hidden_size, 4 * hidden_size)

    def forward(self, x, state):
        h, c = state
        gates = self.ih(x) + self.hh(h)
        i, f, g, o = gates.chunk(4, dim=-1)
        c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_new = torch.sigmoid(o) * torch.tanh(c_new)
        return h_new, (h_new, c_new)


class RefinementNetwork(nn.Module):
    """Shared per-slot refinement core: conv stack over the 17-channel stack,
    spatial pool, then an LSTM over [features, lambda, grad-of-lambda] emitting
    an additive update to (mean, log_std)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.refine_channels
        self.conv = nn.Sequential(
            nn.Conv2d(17, c, 3, padding=1), nn.ELU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ELU(),
            nn.Conv2d(c, cfg.refine_pool, 3, padding=1), nn.ELU(),
        )
        self.mlp = nn.Linear(cfg.refine_pool, cfg.refine_mlp)
        lam_dim = 2 * cfg.sto_size
        self.cell = LSTMCellManual(cfg.refine_mlp + 2 * lam_dim, cfg.refine_lstm)
        self.head = nn.Linear(cfg.refine_lstm, lam_dim)

    def forward(self, aux_images, lam_vec, grad_vec, state):
        # aux_images: (N, 17, H, W); lam_vec, grad_vec: (N, 2*R_s)
        z = self.conv(aux_images).mean(dim=(2, 3))
        z = F.elu(self.mlp(z))
        z = torch.cat([z, lam_vec, grad_vec], dim=-1)
        out, state = self.cell(z, state)
        return self.head(out), state


class PairwiseDynamics(nn.Module):
    """Action-conditioned per-slot transition with pairwise interaction terms.

    Per slot: embed the state and the action, gate the action's effect, sum
    gated pairwise effects from the other slots, combine, then emit the next
    deterministic component and stochastic distribution parameters.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.core = nn.Linear(cfg.latent_size, cfg.dyn_core)  # d_o
        self.action = nn.Linear(ACTION_DIM, cfg.dyn_action)  # d_a
        pair_in = cfg.dyn_core + cfg.dyn_action
        self.act_eff = nn.Linear(pair_in, cfg.dyn_act_eff)
        self.act_att = nn.Sequential(nn.Linear(pair_in, cfg.dyn_act_att), nn.ELU(),
                                     nn.Linear(cfg.dyn_act_att, 1))
        self.obj_eff = nn.Linear(2 * cfg.dyn_act_eff, cfg.dyn_obj_eff)
        self.obj_att = nn.Sequential(nn.Linear(2 * cfg.dyn_act_eff, cfg.dyn_obj_att),
                                     nn.ELU(), nn.Linear(cfg.dyn_obj_att, 1))
        self.comb = nn.Linear(cfg.dyn_act_eff + cfg.dyn_obj_eff, cfg.dyn_comb)
        self.f_det = nn.Linear(cfg.dyn_comb, cfg.det_size)
        self.f_sto = nn.Linear(cfg.dyn_comb, 2 * cfg.sto_size)

    def forward(self, h: torch.Tensor, a: torch.Tensor):
        # h: (B, K, R); a: (B, ACTION_DIM)
        b, k, _ = h.shape
        core = F.elu(self.core(h))  # (B, K, D)
        act = F.elu(self.action(a)).unsqueeze(1).expand(b, k, -1)
        pair_in = torch.cat([core, act], dim=-1)
        h_act = F.elu(self.act_eff(pair_in)) * torch.sigmoid(self.act_att(pair_in))
        # pairwise: entry (b, i, k) pairs source slot i with target slot k
        src = h_act.unsqueeze(2).expand(b, k, k, -1)
        dst = h_act.unsqueeze(1).expand(b, k, k, -1)
        pair = torch.cat([src, dst], dim=-1)
        gates = torch.sigmoid(self.obj_att(pair))  # (B, K, K, 1)
        effects = F.elu(self.obj_eff(pair)) * gates
        offdiag = (1.0 - torch.eye(k, dtype=h.dtype, device=h.device)).view(1, k, k, 1)
        interact = (effects * offdiag).sum(dim=1)  # (B, K, D_oo)
        attention = (gates * offdiag).sum(dim=1).squeeze(-1)  # (B, K)
        combined = F.elu(self.comb(torch.cat([h_act, interact], dim=-1)))
        det = self.f_det(combined)
        mean, log_std = self.f_sto(combined).chunk(2, dim=-1)
        return LatentParams(det=det, mean=mean,
                            log_std=clamp_dyn_log_std(log_std)), attention


# ---------------------------------------------------------------------------
# Full models
# ---------------------------------------------------------------------------

class _InitialLatents(nn.Module):
    """Learned global initialization shared by all slots."""

    def __init__(self, det_size: int, sto_size: int):
        super().__init__()
        self.det = nn.Parameter(torch.zeros(det_size))
        self.mean = nn.Parameter(torch.zeros(sto_size))
        self.log_std = nn.Parameter(torch.zeros(sto_size))


class EntityModel(nn.Module):
    """Symmetric slot model: one weight set serves every slot and slot pair."""

    variant = "symmetric"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.variant != "symmetric":
            raise ValueError("EntityModel is the symmetric variant")
        self.cfg = cfg
        self.decoder = SpatialBroadcastDecoder(cfg.latent_size, cfg.image_size,
                                               cfg.decoder_channels)
        self.dyn = PairwiseDynamics(cfg)
        self.refiner = RefinementNetwork(cfg)
        self.init_params = _InitialLatents(cfg.det_size, cfg.sto_size)

    # -- interface shared by all variants ----------------------------------
    def initial_latents(self, batch: int, k: int,
                        generator: Optional[torch.Generator] = None) -> LatentParams:
        """Learned init plus per-slot noise; the noise breaks slot symmetry."""
        p = self.init_params

        def tile(v):
            out = v.view(1, 1, -1).expand(batch, k, v.shape[0])
            if self.cfg.init_noise > 0:
                noise = torch.empty(batch, k, v.shape[0], dtype=v.dtype,
                                    device=v.device).normal_(generator=generator)
                out = out + self.cfg.init_noise * noise
            return out

        return LatentParams(det=tile(p.det), mean=tile(p.mean),
                            log_std=clamp_log_std(tile(p.log_std)))

    def decode(self, h: torch.Tensor) -> SlotDecode:
        b, k, r = h.shape
        out = self.decoder(h.reshape(b * k, r)).view(b, k, 4, *([self.cfg.image_size] * 2))
        return SlotDecode(rgb_mean=out[:, :, :3], mask_logit=out[:, :, 3])

    def dynamics(self, h: torch.Tensor, a: torch.Tensor):
        return self.dyn(h, a)

    def refine_initial_state(self, batch: int, k: int, dtype=None, device=None):
        n = batch * k
        width = self.cfg.refine_lstm
        z = torch.zeros(n, width, dtype=dtype, device=device)
        return (z, z.clone())

    def refine(self, aux_images, lam_vec, grad_vec, state):
        return self.refiner(aux_images, lam_vec, grad_vec, state)


class NoWeightSharingModel(nn.Module):
    """Ablation: K distinct weight sets bound to fixed slot indices."""

    variant = "no_weight_sharing"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.variant != "no_weight_sharing":
            raise ValueError("config variant mismatch")
        self.cfg = cfg
        k = cfg.k_slots
        self.decoders = nn.ModuleList(
            SpatialBroadcastDecoder(cfg.latent_size, cfg.image_size, cfg.decoder_channels)
            for _ in range(k))
        self.dyns = nn.ModuleList(PairwiseDynamics(cfg) for _ in range(k))
        self.refiners = nn.ModuleList(RefinementNetwork(cfg) for _ in range(k))
        self.inits = nn.ModuleList(_InitialLatents(cfg.det_size, cfg.sto_size)
                                   for _ in range(k))

    def _check_k(self, k: int):
        if k != self.cfg.k_slots:
            raise ValueError(
                f"no_weight_sharing model is bound to K={self.cfg.k_slots}, got {k}")

    def initial_latents(self, batch, k, generator=None):
        self._check_k(k)
        det, mean, log_std = [], [], []
        for p in self.inits:
            for v, acc in ((p.det, det), (p.mean, mean), (p.log_std, log_std)):
                noise = torch.empty(batch, 1, v.shape[0], dtype=v.dtype,
                                    device=v.device).normal_(generator=generator)
                acc.append(v.view(1, 1, -1) + self.cfg.init_noise * noise)
        return LatentParams(det=torch.cat(det, dim=1), mean=torch.cat(mean, dim=1),
                            log_std=clamp_log_std(torch.cat(log_std, dim=1)))

    def decode(self, h):
        self._check_k(h.shape[1])
        outs = [self.decoders[i](h[:, i]) for i in range(h.shape[1])]
        out = torch.stack(outs, dim=1)
        return SlotDecode(rgb_mean=out[:, :, :3], mask_logit=out[:, :, 3])

    def dynamics(self, h, a):
        # Slot k's own weight set scores its pairwise terms.
        self._check_k(h.shape[1])
        params, atts = [], []
        for i, dyn in enumerate(self.dyns):
            p, att = dyn(h, a)
            params.append(p)
            atts.append(att[:, i])
        lam = LatentParams(det=torch.stack([p.det[:, i] for i, p in enumerate(params)], 1),
                           mean=torch.stack([p.mean[:, i] for i, p in enumerate(params)], 1),
                           log_std=torch.stack([p.log_std[:, i] for i, p in enumerate(params)], 1))
        return lam, torch.stack(atts, dim=1)

    def refine_initial_state(self, batch, k, dtype=None, device=None):
        self._check_k(k)
        z = torch.zeros(batch * k, self.cfg.refine_lstm, dtype=dtype, device=device)
        return (z, z.clone())

    def refine(self, aux_images, lam_vec, grad_vec, state):
        k = self.cfg.k_slots
        n = aux_images.shape[0]
        b = n // k
        h_state, c_state = state
        outs, hs, cs = [], [], []
        for i, refiner in enumerate(self.refiners):
            idx = slice(i, n, k)  # slot-major interleave (B*K with K fastest)
            out, (hn, cn) = refiner(aux_images[idx], lam_vec[idx], grad_vec[idx],
                                    (h_state[idx], c_state[idx]))
            outs.append(out)
            hs.append(hn)
            cs.append(cn)
        out = torch.stack(outs, dim=1).reshape(n, -1)
        hn = torch.stack(hs, dim=1).reshape(n, -1)
        cn = torch.stack(cs, dim=1).reshape(n, -1)
        return out, (hn, cn)


class UnfactorizedModel(nn.Module):
    """Ablation: one monolithic latent of size K*(R_d+R_s).

    The latent is still carried as (B, K, R) so downstream shapes match, but
    every network consumes the flattened vector, so processing is sensitive to
    slot order by construction.
    """

    variant = "unfactorized"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.variant != "unfactorized":
            raise ValueError("config variant mismatch")
        self.cfg = cfg
        k = cfg.k_slots
        c = cfg.decoder_channels
        flat = k * cfg.latent_size
        self.dec_convs = nn.ModuleList([
            nn.Conv2d(flat + 2, c, 5, padding=2),
            nn.Conv2d(c, c, 5, padding=2),
            nn.Conv2d(c, c, 5, padding=2),
            nn.Conv2d(c, c, 5, padding=2),
        ])
        self.dec_head = nn.Conv2d(c, 4 * k, 5, padding=2)
        hidden = cfg.dyn_comb * k
        self.dyn_net = nn.Sequential(
            nn.Linear(flat + ACTION_DIM, hidden), nn.ELU(),
            nn.Linear(hidden, k * (cfg.det_size + 2 * cfg.sto_size)))
        rc = cfg.refine_channels
        self.ref_conv = nn.Sequential(
            nn.Conv2d(17 * k, rc, 3, padding=1), nn.ELU(),
            nn.Conv2d(rc, rc, 3, padding=1), nn.ELU(),
            nn.Conv2d(rc, cfg.refine_pool, 3, padding=1), nn.ELU(),
        )
        self.ref_mlp = nn.Linear(cfg.refine_pool, cfg.refine_mlp)
        lam_dim = 2 * cfg.sto_size * k
        self.ref_cell = LSTMCellManual(cfg.refine_mlp + 2 * lam_dim, cfg.refine_lstm * k)
        self.ref_head = nn.Linear(cfg.refine_lstm * k, lam_dim)
        self.init_params = _InitialLatents(k * cfg.det_size, k * cfg.sto_size)

    def _check_k(self, k):
        if k != self.cfg.k_slots:
            raise ValueError(f"unfactorized model is bound to K={self.cfg.k_slots}")

    def initial_latents(self, batch, k, generator=None):
        self._check_k(k)
        p = self.init_params
        cfg = self.cfg

        def tile(v, dim):
            noise = torch.empty(batch, v.shape[0], dtype=v.dtype,
                                device=v.device).normal_(generator=generator)
            return (v.unsqueeze(0) + cfg.init_noise * noise).view(batch, k, dim)

        return LatentParams(det=tile(p.det, cfg.det_size),
                            mean=tile(p.mean, cfg.sto_size),
                            log_std=clamp_log_std(tile(p.log_std, cfg.sto_size)))

    def decode(self, h):
        self._check_k(h.shape[1])
        b, k, r = h.shape
        hw = self.cfg.image_size
        flat = h.reshape(b, k * r)
        grid = flat.view(b, -1, 1, 1).expand(b, k * r, hw, hw)
        coords = coordinate_map(hw, hw, dtype=h.dtype, device=h.device)
        z = torch.cat([grid, coords.unsqueeze(0).expand(b, -1, -1, -1)], dim=1)
        for conv in self.dec_convs:
            z = F.elu(conv(z))
        out = self.dec_head(z).view(b, k, 4, hw, hw)
        return SlotDecode(rgb_mean=out[:, :, :3], mask_logit=out[:, :, 3])

    def dynamics(self, h, a):
        self._check_k(h.shape[1])
        b, k, r = h.shape
        cfg = self.cfg
        out = self.dyn_net(torch.cat([h.reshape(b, k * r), a], dim=-1))
        out = out.view(b, k, cfg.det_size + 2 * cfg.sto_size)
        det = out[..., :cfg.det_size]
        mean, log_std = out[..., cfg.det_size:].chunk(2, dim=-1)
        attention = torch.zeros(b, k, dtype=h.dtype, device=h.device)
        return LatentParams(det=det, mean=mean,
                            log_std=clamp_dyn_log_std(log_std)), attention

    def refine_initial_state(self, batch, k, dtype=None, device=None):
        self._check_k(k)
        z = torch.zeros(batch, self.cfg.refine_lstm * k, dtype=dtype, device=device)
        return (z, z.clone())

    def refine(self, aux_images, lam_vec, grad_vec, state):
        # Inputs arrive per-slot shaped (B*K, ...); fold K into channels/features.
        k = self.cfg.k_slots
        n = aux_images.shape[0]
        b = n // k
        imgs = aux_images.view(b, k * aux_images.shape[1], *aux_images.shape[2:])
        z = self.ref_conv(imgs).mean(dim=(2, 3))
        z = F.elu(self.ref_mlp(z))
        z = torch.cat([z, lam_vec.view(b, -1), grad_vec.view(b, -1)], dim=-1)
        out, state = self.ref_cell(z, state)
        return self.ref_head(out).view(n, -1), state


def build_model(cfg: ModelConfig) -> nn.Module:
    cls = {"symmetric": EntityModel, "unfactorized": UnfactorizedModel,
           "no_weight_sharing": NoWeightSharingModel}[cfg.variant]
    return cls(cfg)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: nn.Module,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    epoch: int = 0, extra: Optional[dict] = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, k_override: Optional[int] = None):
    """Rebuild the model from a checkpoint.

    The symmetric variant accepts a different slot count at load time; the
    ablation variants are bound to their training K and reject any change.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    cfg = ModelConfig.from_dict(payload["model_config"])
    if k_override is not None and k_override != cfg.k_slots:
        if cfg.variant != "symmetric":
            raise ValueError(
                f"{cfg.variant} checkpoint is bound to K={cfg.k_slots}; "
                f"cannot load with K={k_override}")
        cfg = dataclasses.replace(cfg, k_slots=k_override)
    model = build_model(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
