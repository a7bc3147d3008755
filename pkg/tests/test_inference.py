import numpy as np
import pytest
import torch

from slotworld.inference import (AUX_CHANNELS, AuxInputs, InferenceDiverged,
                                 assemble_aux, infer_t, infer_t0,
                                 interactive_inference, layer_norm_image,
                                 refine_step, refine_timestep)
from slotworld.model import (ACTION_DIM, LatentParams, build_model,
                             compose_observation, kl_diag_gaussian,
                             mixture_stats, standard_normal_like)

from conftest import micro_config


def make_inputs(m, b=1, k=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(b, 3, m.cfg.image_size, m.cfg.image_size, generator=g,
                   dtype=dtype)
    lam = LatentParams(
        det=torch.randn(b, k, m.cfg.det_size, generator=g, dtype=dtype),
        mean=torch.randn(b, k, m.cfg.sto_size, generator=g, dtype=dtype),
        log_std=0.2 * torch.randn(b, k, m.cfg.sto_size, generator=g, dtype=dtype))
    return x, lam


def evaluate_and_assemble(m, x, lam, sg=True, generator=None):
    """One inference evaluation: decode, score, per-slot gradients, aux."""
    lam = lam.detach().requires_grad_()
    prior = standard_normal_like(lam)
    gen = generator or torch.Generator().manual_seed(7)
    h = lam.sample(gen)
    mix = compose_observation(m.decode(h), scale=m.cfg.sigma)
    stats = mixture_stats(x, mix)
    objective = (stats.log_likelihood - kl_diag_gaussian(lam, prior)).sum()
    g_mean, g_ls, g_rgb, g_mask = torch.autograd.grad(
        objective, [lam.mean, lam.log_std, mix.rgb_means, mix.masks],
        create_graph=not sg, retain_graph=True)
    aux = assemble_aux(x, lam, mix, stats, g_rgb, g_mask, g_mean, g_ls,
                       stop_gradients=sg)
    return lam, mix, stats, aux


class TestAssembleAux:
    def test_channel_count_and_finiteness(self, micro_model):
        x, lam = make_inputs(micro_model)
        _, _, _, aux = evaluate_and_assemble(micro_model, x, lam)
        assert aux.image_channels.shape[2] == 17
        assert torch.isfinite(aux.image_channels).all()
        assert torch.isfinite(aux.lam_vec).all() and torch.isfinite(aux.grad_vec).all()

    def test_single_slot_posterior_and_floor(self, micro_model):
        x, lam = make_inputs(micro_model, k=1)
        _, _, stats, aux = evaluate_and_assemble(micro_model, x, lam)
        post = aux.channel("mask_posterior")
        assert torch.allclose(post, torch.ones_like(post))
        # leave-one-out log density collapses to the uniform floor component
        assert torch.allclose(stats.loo_ll,
                              torch.full_like(stats.loo_ll, float(np.log(1e-3))))

    def test_layer_normed_channels_are_standardized(self, micro_model):
        x, lam = make_inputs(micro_model)
        _, _, _, aux = evaluate_and_assemble(micro_model, x, lam)
        for name in ("grad_means", "grad_mask", "pixel_likelihood",
                     "leave_one_out_likelihood"):
            ch = aux.channel(name).detach()
            mean = ch.mean(dim=(-2, -1))
            assert float(mean.abs().max()) <= 1e-5, name
            var = ch.var(dim=(-2, -1), unbiased=False)
            assert float((var - 1).abs().max()) <= 1e-2, name

    def test_responsibilities_sum_to_one(self, micro_model):
        x, lam = make_inputs(micro_model, k=4)
        _, _, stats, _ = evaluate_and_assemble(micro_model, x, lam)
        s = stats.responsibilities.detach().sum(dim=1)
        assert float((s - 1).abs().max()) <= 1e-6

    def test_stop_gradient_channels_cut_flow(self, micro_model):
        """dlam'/dlam must be identical whether the SG inputs are live
        tensors or frozen copies: no gradient may flow through them."""
        m = micro_model
        x, lam0 = make_inputs(m)

        def refine_grad(freeze):
            lam = lam0.detach().requires_grad_()
            prior = standard_normal_like(lam)
            gen = torch.Generator().manual_seed(7)
            h = lam.sample(gen)
            mix = compose_observation(m.decode(h), scale=m.cfg.sigma)
            stats = mixture_stats(x, mix)
            objective = (stats.log_likelihood - kl_diag_gaussian(lam, prior)).sum()
            grads = torch.autograd.grad(objective,
                                        [lam.mean, lam.log_std, mix.rgb_means, mix.masks],
                                        create_graph=True, retain_graph=True)
            g_mean, g_ls, g_rgb, g_mask = grads
            if freeze:
                g_mean, g_ls = g_mean.detach(), g_ls.detach()
                g_rgb, g_mask = g_rgb.detach(), g_mask.detach()
                aux = assemble_aux(x, lam, mix, stats, g_rgb, g_mask, g_mean, g_ls,
                                   stop_gradients=False)  # already frozen by hand
            else:
                aux = assemble_aux(x, lam, mix, stats, g_rgb, g_mask, g_mean, g_ls,
                                   stop_gradients=True)
            state = m.refine_initial_state(1, 2)
            new, _ = refine_step(m, x, lam, state, aux)
            return torch.autograd.grad(new.mean.sum(), lam.mean, retain_graph=False)[0]

        g_production = refine_grad(freeze=False)
        g_frozen = refine_grad(freeze=True)
        assert torch.allclose(g_production, g_frozen, atol=1e-7)

    def test_sg_off_changes_gradients(self, micro_model):
        """Negative control: with gradients kept live, extra paths open up."""
        m = micro_model
        x, lam0 = make_inputs(m)

        def refine_grad(sg):
            lam = lam0.detach().requires_grad_()
            _, mix, stats, aux = None, None, None, None
            lam2, mix, stats, aux = evaluate_and_assemble(m, x, lam, sg=sg)
            state = m.refine_initial_state(1, 2)
            new, _ = refine_step(m, x, lam2, state, aux)
            return torch.autograd.grad(new.mean.sum(), lam2.mean)[0]

        g_sg = refine_grad(True)
        g_full = refine_grad(False)
        assert not torch.allclose(g_sg, g_full, atol=1e-9)


class TestRefineStep:
    def test_zero_head_is_identity(self, micro_model):
        m = micro_model
        with torch.no_grad():
            m.refiner.head.weight.zero_()
            m.refiner.head.bias.zero_()
        x, lam = make_inputs(m)
        lam2, _, _, aux = evaluate_and_assemble(m, x, lam)
        new, _ = refine_step(m, x, lam2, m.refine_initial_state(1, 2), aux)
        assert torch.allclose(new.mean, lam2.mean, atol=0)
        assert torch.allclose(new.log_std, lam2.log_std, atol=0)
        assert torch.equal(new.det, lam2.det)

    def test_identical_slots_get_identical_updates(self, micro_model):
        m = micro_model
        g = torch.Generator().manual_seed(0)
        x = torch.rand(1, 3, 8, 8, generator=g)
        one = torch.randn(1, 1, m.cfg.sto_size, generator=g)
        det = torch.randn(1, 1, m.cfg.det_size, generator=g)
        lam = LatentParams(det=det.repeat(1, 2, 1), mean=one.repeat(1, 2, 1),
                           log_std=torch.zeros(1, 2, m.cfg.sto_size))
        lam = lam.detach().requires_grad_()
        prior = standard_normal_like(lam)
        h = torch.cat([lam.det, lam.mean], dim=-1)  # identical noise: use mode
        mix = compose_observation(m.decode(h), scale=m.cfg.sigma)
        stats = mixture_stats(x, mix)
        obj = (stats.log_likelihood - kl_diag_gaussian(lam, prior)).sum()
        g_mean, g_ls, g_rgb, g_mask = torch.autograd.grad(
            obj, [lam.mean, lam.log_std, mix.rgb_means, mix.masks], retain_graph=True)
        aux = assemble_aux(x, lam, mix, stats, g_rgb, g_mask, g_mean, g_ls)
        new, _ = refine_step(m, x, lam, m.refine_initial_state(1, 2), aux)
        assert torch.allclose(new.mean[:, 0], new.mean[:, 1], atol=1e-6)

    def test_permutation_equivariance(self):
        torch.manual_seed(1)
        m = build_model(micro_config(k_slots=3)).double()
        x, lam = make_inputs(m, k=3, dtype=torch.float64)
        perm = [2, 0, 1]
        lam_p = lam.permute_slots(perm)

        def one_update(lam_in):
            lam_in = lam_in.detach().requires_grad_()
            prior = standard_normal_like(lam_in)
            h = torch.cat([lam_in.det, lam_in.mean], dim=-1)
            mix = compose_observation(m.decode(h), scale=m.cfg.sigma)
            stats = mixture_stats(x, mix)
            obj = (stats.log_likelihood - kl_diag_gaussian(lam_in, prior)).sum()
            g_mean, g_ls, g_rgb, g_mask = torch.autograd.grad(
                obj, [lam_in.mean, lam_in.log_std, mix.rgb_means, mix.masks],
                retain_graph=True)
            aux = assemble_aux(x, lam_in, mix, stats, g_rgb, g_mask, g_mean, g_ls)
            new, _ = refine_step(m, x, lam_in, m.refine_initial_state(1, 3,
                                 dtype=torch.float64), aux)
            return new

        base = one_update(lam)
        permuted = one_update(lam_p)
        assert torch.allclose(base.mean[:, perm], permuted.mean, atol=1e-9)
        assert torch.allclose(base.log_std[:, perm], permuted.log_std, atol=1e-9)


class TestInferT0:
    def test_single_step_applies_one_refine(self, micro_model):
        m = micro_model
        calls = []
        orig = m.refine

        def counting(*args, **kw):
            calls.append(1)
            return orig(*args, **kw)

        m.refine = counting
        x = torch.rand(1, 3, 8, 8)
        infer_t0(m, x, 1, torch.Generator().manual_seed(0), truncate=True)
        assert len(calls) == 1

    def test_seeded_determinism(self, micro_model):
        x = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(3))
        lam1, r1 = infer_t0(micro_model, x, 3, torch.Generator().manual_seed(5),
                            truncate=True)
        lam2, r2 = infer_t0(micro_model, x, 3, torch.Generator().manual_seed(5),
                            truncate=True)
        assert torch.equal(lam1.mean, lam2.mean)
        for a, b in zip(r1.diagnostics.trace, r2.diagnostics.trace):
            assert torch.equal(a, b)

    def test_trace_has_m_plus_one_entries(self, micro_model):
        x = torch.rand(1, 3, 8, 8)
        _, res = infer_t0(micro_model, x, 4, torch.Generator().manual_seed(0),
                          truncate=True)
        assert len(res.diagnostics.trace) == 5

    def test_m_zero_rejected(self, micro_model):
        with pytest.raises(ValueError):
            infer_t0(micro_model, torch.rand(1, 3, 8, 8), 0,
                     torch.Generator().manual_seed(0))

    def test_diverged_inference_raises(self, micro_model):
        m = micro_model
        with torch.no_grad():
            m.decoder.head.bias.fill_(float("nan"))
        with pytest.raises(InferenceDiverged):
            infer_t0(m, torch.rand(1, 3, 8, 8), 2, torch.Generator().manual_seed(0),
                     truncate=True)


class TestInferT:
    def setup_model(self):
        torch.manual_seed(2)
        m = build_model(micro_config())
        g = torch.Generator().manual_seed(0)
        x = torch.rand(1, 3, 8, 8, generator=g)
        h = torch.randn(1, 2, m.cfg.latent_size, generator=g)
        a = torch.randn(1, ACTION_DIM, generator=g) * 0.5
        return m, x, h, a

    def test_m_zero_is_pure_prediction(self):
        m, x, h, a = self.setup_model()
        gen = torch.Generator().manual_seed(1)
        lam, res = infer_t(m, x, a, h, 0, gen, truncate=True)
        prior, _ = m.dynamics(h, a)
        assert torch.allclose(lam.mean, prior.mean, atol=0)
        assert torch.allclose(lam.det, prior.det, atol=0)
        assert res.diagnostics.trace == []

    def test_kl_zero_at_first_iteration(self):
        m, x, h, a = self.setup_model()
        gen = torch.Generator().manual_seed(1)
        _, res = infer_t(m, x, a, h, 2, gen, truncate=True)
        assert float(res.diagnostics.kl_trace[0].abs().max()) == 0.0

    def test_trace_length_equals_m(self):
        m, x, h, a = self.setup_model()
        for m_steps in (0, 1, 3):
            _, res = infer_t(m, x, a, h, m_steps,
                             torch.Generator().manual_seed(1), truncate=True)
            assert len(res.diagnostics.trace) == m_steps


class TestInteractiveInference:
    def test_single_frame_reduces_to_t0(self, micro_model):
        x = torch.rand(1, 1, 3, 8, 8)
        res = interactive_inference(micro_model, x, torch.zeros(1, 0, ACTION_DIM),
                                    m0=2, mt=2,
                                    generator=torch.Generator().manual_seed(0))
        assert len(res.lams) == 1
        assert len(res.diagnostics[0].trace) == 3

    def test_refine_call_count(self, micro_model):
        m = micro_model
        calls = []
        orig = m.refine

        def counting(*args, **kw):
            calls.append(1)
            return orig(*args, **kw)

        m.refine = counting
        T = 3
        x = torch.rand(1, T + 1, 3, 8, 8)
        a = torch.randn(1, T, ACTION_DIM) * 0.3
        interactive_inference(m, x, a, m0=4, mt=2,
                              generator=torch.Generator().manual_seed(0))
        assert len(calls) == 4 + 2 * T

    def test_mismatched_lengths_rejected(self, micro_model):
        with pytest.raises(ValueError):
            interactive_inference(micro_model, torch.rand(1, 2, 3, 8, 8),
                                  torch.zeros(1, 3, ACTION_DIM))
