"""Amortized iterative inference over slot posteriors.

Posterior parameters are refined within a frame by a recurrent network fed
with image-space evidence (decoded means, masks, responsibilities, gradient
maps, likelihood maps) plus the flat posterior and its gradient. Across
frames, the dynamics model predicts the next posterior, which then serves as
both the starting point and the divergence target for further refinement.

`stop_gradients=True` (the production setting) detaches the gradient-derived
inputs so weight training does not differentiate through the inner gradient
computation. `stop_gradients=False` keeps every path differentiable (inner
gradients built with create_graph), which is what the finite-difference
checks of the full objective exercise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .model import (LatentParams, MixtureObservation, MixtureStats, SlotDecode,
                    clamp_log_std, compose_observation, coordinate_map,
                    kl_diag_gaussian, mixture_stats, standard_normal_like)

# Channel layout of the image-shaped refinement inputs.
AUX_CHANNELS = {
    "image": slice(0, 3),
    "means": slice(3, 6),
    "mask": slice(6, 7),
    "mask_logits": slice(7, 8),
    "mask_posterior": slice(8, 9),
    "grad_means": slice(9, 12),  # LN + SG
    "grad_mask": slice(12, 13),  # LN + SG
    "pixel_likelihood": slice(13, 14),  # LN + SG
    "leave_one_out_likelihood": slice(14, 15),  # LN + SG
    "coordinates": slice(15, 17),
}
N_AUX_CHANNELS = 17


class InferenceDiverged(RuntimeError):
    """Non-finite inference objective; carries the diagnostics so far."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class AuxInputs:
    """Refinement-network inputs for every slot.

    image_channels: (B, K, 17, H, W)
    lam_vec:        (B, K, 2*R_s) posterior (mean, log_std)
    grad_vec:       (B, K, 2*R_s) layer-normalized gradient of the posterior
    """
    image_channels: torch.Tensor
    lam_vec: torch.Tensor
    grad_vec: torch.Tensor

    def channel(self, name: str) -> torch.Tensor:
        return self.image_channels[:, :, AUX_CHANNELS[name]]


@dataclass
class InferDiagnostics:
    """Per-scene record of the refinement process.

    trace entries are (B,) tensors of the inference objective; entry i is
    evaluated at the parameters after i refinement updates.
    """
    trace: list = field(default_factory=list)
    recon_trace: list = field(default_factory=list)
    kl_trace: list = field(default_factory=list)
    mask_entropy: Optional[torch.Tensor] = None  # (B, K)

    def to_dict(self) -> dict:
        def tolist(xs):
            return [x.tolist() for x in xs]
        return {
            "elbo_trace": tolist(self.trace),
            "recon_trace": tolist(self.recon_trace),
            "kl_trace": tolist(self.kl_trace),
            "mask_entropy": self.mask_entropy.tolist() if self.mask_entropy is not None else None,
        }


def layer_norm_image(t: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Zero-mean unit-variance over the spatial dims, per channel: (..., H, W)."""
    mean = t.mean(dim=(-2, -1), keepdim=True)
    var = t.var(dim=(-2, -1), unbiased=False, keepdim=True)
    return (t - mean) / (var + eps).sqrt()


def layer_norm_vector(t: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mean = t.mean(dim=-1, keepdim=True)
    var = t.var(dim=-1, unbiased=False, keepdim=True)
    return (t - mean) / (var + eps).sqrt()


def assemble_aux(x: torch.Tensor, lam: LatentParams, mix: MixtureObservation,
                 stats: MixtureStats, grad_rgb: torch.Tensor, grad_mask: torch.Tensor,
                 grad_mean: torch.Tensor, grad_log_std: torch.Tensor,
                 stop_gradients: bool = True) -> AuxInputs:
    """Stack the 17 image channels and the two flat vectors for every slot."""
    b, k, h, w = mix.masks.shape

    def sg(t):
        return t.detach() if stop_gradients else t

    x_b = x.unsqueeze(1).expand(b, k, 3, h, w)
    coords = coordinate_map(h, w, dtype=x.dtype, device=x.device)
    coords = coords.view(1, 1, 2, h, w).expand(b, k, 2, h, w)
    channels = torch.cat([
        x_b,
        mix.rgb_means,
        mix.masks.unsqueeze(2),
        (mix.mask_logits if mix.mask_logits is not None
         else mix.masks.clamp_min(1e-30).log()).unsqueeze(2),
        stats.responsibilities.unsqueeze(2),
        layer_norm_image(sg(grad_rgb)),
        layer_norm_image(sg(grad_mask)).unsqueeze(2),
        layer_norm_image(sg(stats.pixel_ll)).view(b, 1, 1, h, w).expand(b, k, 1, h, w),
        layer_norm_image(sg(stats.loo_ll)).unsqueeze(2),
        coords,
    ], dim=2)
    lam_vec = torch.cat([lam.mean, lam.log_std], dim=-1)
    grad_vec = layer_norm_vector(torch.cat([sg(grad_mean), sg(grad_log_std)], dim=-1))
    return AuxInputs(image_channels=channels, lam_vec=lam_vec, grad_vec=grad_vec)


def _evaluate(model, x: torch.Tensor, lam: LatentParams, prior: LatentParams,
              generator) -> tuple:
    """Sample, decode, and score the inference objective once."""
    h = lam.sample(generator)
    dec = model.decode(h)
    mix = compose_observation(dec, scale=model.cfg.sigma)
    stats = mixture_stats(x, mix)
    kl = kl_diag_gaussian(lam, prior)
    return h, mix, stats, kl


def refine_step(model, x: torch.Tensor, lam: LatentParams, state,
                aux: AuxInputs) -> tuple:
    """One refinement update from pre-assembled inputs.

    Returns (new LatentParams, new recurrent state). The update is an
    additive delta to (mean, log_std); the deterministic component passes
    through untouched.
    """
    b, k = lam.mean.shape[:2]
    delta, state = model.refine(
        aux.image_channels.reshape(b * k, *aux.image_channels.shape[2:]),
        aux.lam_vec.reshape(b * k, -1), aux.grad_vec.reshape(b * k, -1), state)
    d_mean, d_log_std = delta.view(b, k, -1).chunk(2, dim=-1)
    new = LatentParams(det=lam.det, mean=lam.mean + d_mean,
                       log_std=clamp_log_std(lam.log_std + d_log_std))
    return new, state


@dataclass
class TimestepResult:
    """Everything the trainer needs from one refined timestep."""
    lam: LatentParams
    state: tuple
    h: torch.Tensor  # final sample, feeds the next dynamics step
    mix: MixtureObservation
    stats: MixtureStats
    kl: torch.Tensor  # (B,) divergence of the final posterior from its prior
    diagnostics: InferDiagnostics


def refine_timestep(model, x: torch.Tensor, lam: LatentParams, prior: LatentParams,
                    state, m_steps: int, generator,
                    stop_gradients: bool = True, truncate: bool = False) -> TimestepResult:
    """Run m refinement iterations plus the final evaluation at one frame.

    With truncate=True (evaluation runs) the parameter graph is cut between
    iterations; training keeps it intact so the objective backpropagates
    through the whole procedure.
    """
    diag = InferDiagnostics()
    if truncate:
        prior = prior.detach()
    for _ in range(m_steps):
        if truncate:
            lam = lam.detach().requires_grad_()
        h, mix, stats, kl = _evaluate(model, x, lam, prior, generator)
        objective = stats.log_likelihood - kl
        if not torch.isfinite(objective).all():
            raise InferenceDiverged("non-finite inference objective", diag)
        diag.trace.append(objective.detach())
        diag.recon_trace.append(stats.log_likelihood.detach())
        diag.kl_trace.append(kl.detach())
        g_mean, g_log_std, g_rgb, g_mask = torch.autograd.grad(
            objective.sum(), [lam.mean, lam.log_std, mix.rgb_means, mix.masks],
            retain_graph=not truncate, create_graph=not stop_gradients)
        aux = assemble_aux(x, lam, mix, stats, g_rgb, g_mask, g_mean, g_log_std,
                           stop_gradients=stop_gradients)
        lam, state = refine_step(model, x, lam, state, aux)
        if truncate:
            state = tuple(s.detach() for s in state)
    # Final evaluation at the refined parameters; its sample carries forward.
    if truncate:
        lam = lam.detach()
        with torch.no_grad():
            h, mix, stats, kl = _evaluate(model, x, lam, prior, generator)
    else:
        h, mix, stats, kl = _evaluate(model, x, lam, prior, generator)
    objective = stats.log_likelihood - kl
    if not torch.isfinite(objective).all():
        raise InferenceDiverged("non-finite inference objective at final evaluation", diag)
    diag.trace.append(objective.detach())
    diag.recon_trace.append(stats.log_likelihood.detach())
    diag.kl_trace.append(kl.detach())
    m = mix.masks.clamp(1e-7, 1.0 - 1e-7)
    diag.mask_entropy = (-(m * m.log() + (1 - m) * (1 - m).log())).mean(dim=(-2, -1)).detach()
    return TimestepResult(lam=lam, state=state, h=h, mix=mix, stats=stats,
                          kl=kl, diagnostics=diag)


def infer_t0(model, x: torch.Tensor, m_steps: int, generator,
             k: Optional[int] = None, stop_gradients: bool = True,
             truncate: bool = False) -> tuple:
    """Ground slots in a first frame: M refinement steps from the learned init.

    Returns (LatentParams, TimestepResult). The diagnostics trace has M+1
    entries: the objective at the init and after each of the M updates.
    """
    if m_steps < 1:
        raise ValueError("timestep-0 inference needs at least one refinement step")
    k = k if k is not None else model.cfg.k_slots
    with torch.enable_grad():
        lam = model.initial_latents(x.shape[0], k, generator)
        if truncate:
            lam = lam.detach().requires_grad_()
        prior = standard_normal_like(lam)
        state = model.refine_initial_state(x.shape[0], k, dtype=x.dtype, device=x.device)
        result = refine_timestep(model, x, lam, prior, state, m_steps, generator,
                                 stop_gradients=stop_gradients, truncate=truncate)
    return result.lam, result


def infer_t(model, x: torch.Tensor, a_prev: torch.Tensor, h_prev: torch.Tensor,
            m_steps: int, generator, state=None, stop_gradients: bool = True,
            truncate: bool = False) -> tuple:
    """Predict the posterior through dynamics, then refine it M times.

    M=0 is allowed and yields the pure dynamics prediction. The diagnostics
    trace exposed here has exactly M entries (the in-loop evaluations).
    """
    b, k = h_prev.shape[:2]
    with torch.enable_grad():
        if truncate:
            h_prev = h_prev.detach()
        prior, _ = model.dynamics(h_prev, a_prev)
        if state is None:
            state = model.refine_initial_state(b, k, dtype=x.dtype, device=x.device)
        result = refine_timestep(model, x, prior, prior, state, m_steps, generator,
                                 stop_gradients=stop_gradients, truncate=truncate)
    diag = result.diagnostics
    trimmed = InferDiagnostics(trace=diag.trace[:m_steps],
                               recon_trace=diag.recon_trace[:m_steps],
                               kl_trace=diag.kl_trace[:m_steps],
                               mask_entropy=diag.mask_entropy)
    return result.lam, TimestepResult(lam=result.lam, state=result.state, h=result.h,
                                      mix=result.mix, stats=result.stats, kl=result.kl,
                                      diagnostics=trimmed)


@dataclass
class InferenceResult:
    lams: list  # per-timestep LatentParams
    h_samples: list  # per-timestep (B, K, R) samples
    diagnostics: list  # per-timestep InferDiagnostics


def interactive_inference(model, images: torch.Tensor, actions: torch.Tensor,
                          m0: int = 4, mt: int = 2, generator=None,
                          k: Optional[int] = None, stop_gradients: bool = True,
                          truncate: bool = True) -> InferenceResult:
    """Slot inference across a trajectory: refine frame 0, then alternate
    dynamics prediction and refinement for each subsequent frame.

    images: (B, T+1, 3, H, W); actions: (B, T, ACTION_DIM).
    """
    if images.shape[1] != actions.shape[1] + 1:
        raise ValueError("need one more image than actions")
    if generator is None:
        generator = torch.Generator()
    lam, result = infer_t0(model, images[:, 0], m0, generator, k=k,
                           stop_gradients=stop_gradients, truncate=truncate)
    lams, hs, diags = [lam], [result.h], [result.diagnostics]
    state = result.state
    for t in range(1, images.shape[1]):
        lam, result = infer_t(model, images[:, t], actions[:, t - 1], hs[-1],
                              mt, generator, state=state,
                              stop_gradients=stop_gradients, truncate=truncate)
        state = result.state
        lams.append(lam)
        hs.append(result.h)
        diags.append(result.diagnostics)
    return InferenceResult(lams=lams, h_samples=hs, diagnostics=diags)
