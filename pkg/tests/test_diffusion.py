import math
from types import SimpleNamespace

import numpy as np
import pytest

from mvtryon import numerics as num
from mvtryon.conditioning import GarmentPair, GlobalCondition
from mvtryon.data import synth_generate, make_tryon_sample
from mvtryon.diffusion import (
    BackboneConfig,
    LocalConditions,
    SpatialInput,
    TryOnModel,
    ddim_sample,
    ddim_steps,
    forward_diffuse,
    make_schedule,
    paste_prewarp,
    predict_noise,
    reconstruct_x0,
    sinusoidal_embedding,
    tryon_model_spec,
)
from mvtryon.errors import ContractError, SingularityError
from mvtryon.nn import init_params
from mvtryon.numerics import Tensor
from mvtryon.pose import PoseSkeleton, ViewChoice

from conftest import check_grads, numeric_grads, rel_err


SMALL = BackboneConfig(image_hw=(16, 16), base_width=4, d_g=8, d_p=4, T=20)


def small_conditions(rng, cfg=SMALL, grid=(2, 2)):
    n = grid[0] * grid[1]
    levels = [Tensor(rng.normal(size=(n, 2 * d))) for d in cfg.local_widths]
    c_g = GlobalCondition(Tensor(rng.normal(size=(1, cfg.d_g))))
    return c_g, LocalConditions(levels, grid)


def small_input(rng, hw=(16, 16)):
    z = Tensor(rng.normal(size=(3, *hw)))
    a = Tensor(rng.uniform(-1, 1, size=(3, *hw)))
    m = Tensor(rng.uniform(0, 1, size=(1, *hw)))
    return SpatialInput.assemble(z, a, m)


class TestSchedule:
    def test_single_step(self):
        sched = make_schedule(1, 0.1, 0.1)
        assert abs(sched.alpha_bar(1) - 0.9) < 1e-15

    def test_two_steps(self):
        sched = make_schedule(2, 0.1, 0.1)
        assert abs(sched.alpha_bar(1) - 0.9) < 1e-15
        assert abs(sched.alpha_bar(2) - 0.81) < 1e-15

    def test_default_schedule_against_product_oracle(self):
        sched = make_schedule(200)
        betas = np.linspace(1e-4, 0.02, 200)
        prod = 1.0
        for t in range(200):
            prod *= 1.0 - betas[t]
            assert abs(sched.alpha_bar(t + 1) - prod) < 1e-12
        assert (np.diff(sched.alphas_bar) < 0).all()
        # direct product evaluation of the final value (~0.1334 for this schedule)
        assert abs(sched.alpha_bar(200) - prod) < 1e-12
        assert 0.13 < sched.alpha_bar(200) < 0.14

    @pytest.mark.parametrize("args", [(0, 0.1, 0.1), (5, 0.0, 0.1), (5, 0.2, 0.1),
                                      (5, 0.1, 1.0)])
    def test_invalid_ranges(self, args):
        with pytest.raises(ContractError):
            make_schedule(*args)


class TestForwardDiffuse:
    def test_zero_noise(self, rng):
        sched = make_schedule(10, 0.05, 0.1)
        z0 = Tensor(rng.normal(size=(3, 4)))
        out = forward_diffuse(z0, 4, Tensor(np.zeros((3, 4))), sched)
        assert np.max(np.abs(out.data - math.sqrt(sched.alpha_bar(4)) * z0.data)) < 1e-15

    @pytest.mark.parametrize("t_frac", [0.0, 0.5, 1.0])
    def test_monte_carlo_variance(self, t_frac):
        sched = make_schedule(200)
        t = max(1, int(round(t_frac * 200)))
        rng = np.random.default_rng(2718)
        draws = rng.standard_normal((10_000,))
        z = np.array([forward_diffuse(Tensor([0.0]), t, Tensor([e]), sched).data[0]
                      for e in draws])
        target = 1.0 - sched.alpha_bar(t)
        assert abs(z.var() - target) <= 0.02 * target

    def test_extreme_step_approaches_noise(self, rng):
        sched = make_schedule(30, 0.4, 0.6)  # alpha_bar(30) ~ 1e-9
        z0 = rng.normal(size=(8,)) * 10
        eps = rng.normal(size=(8,))
        out = forward_diffuse(Tensor(z0), 30, Tensor(eps), sched).data
        ab = sched.alpha_bar(30)
        bound = math.sqrt(ab) * np.linalg.norm(z0) + ab * np.linalg.norm(eps)
        assert np.linalg.norm(out - eps) <= bound + 1e-12

    def test_step_out_of_range(self, rng):
        sched = make_schedule(5, 0.1, 0.1)
        z = Tensor(rng.normal(size=(2,)))
        for t in (0, 6):
            with pytest.raises(ContractError):
                forward_diffuse(z, t, z, sched)


class TestReconstructX0:
    def test_roundtrip_all_steps(self, rng):
        sched = make_schedule(25, 0.01, 0.2)
        z0 = Tensor(rng.normal(size=(3, 5)))
        for t in range(1, 26):
            eps = Tensor(rng.normal(size=(3, 5)))
            z_t = forward_diffuse(z0, t, eps, sched)
            back = reconstruct_x0(z_t, eps, t, sched)
            assert np.max(np.abs(back.data - z0.data)) < 1e-10

    def test_zero_eps_hat(self, rng):
        sched = make_schedule(5, 0.1, 0.1)
        z_t = Tensor(rng.normal(size=(4,)))
        out = reconstruct_x0(z_t, Tensor(np.zeros(4)), 3, sched)
        assert np.max(np.abs(out.data - z_t.data / math.sqrt(sched.alpha_bar(3)))) < 1e-15

    def test_against_formula_oracle(self, rng):
        sched = make_schedule(12, 0.05, 0.3)
        z_t = rng.normal(size=(6,))
        eps_hat = rng.normal(size=(6,))
        t = 7
        out = reconstruct_x0(Tensor(z_t), Tensor(eps_hat), t, sched)
        ab = sched.alpha_bar(t)
        expected = (z_t - math.sqrt(1 - ab) * eps_hat) / math.sqrt(ab)
        assert np.max(np.abs(out.data - expected)) < 1e-12

    def test_zero_alpha_bar_is_singular(self, rng):
        fake = SimpleNamespace(T=5, alpha_bar=lambda t: 0.0)
        with pytest.raises(SingularityError):
            reconstruct_x0(Tensor(rng.normal(size=(2,))), Tensor(np.zeros(2)), 1, fake)


class TestSpatialInput:
    def test_channel_count(self, rng):
        inp = small_input(rng)
        assert inp.channels.shape == (7, 16, 16)

    def test_mask_range_enforced(self, rng):
        z = Tensor(rng.normal(size=(3, 8, 8)))
        with pytest.raises(ContractError):
            SpatialInput.assemble(z, z, Tensor(np.full((1, 8, 8), 1.5)))


class TestPredictNoise:
    def test_output_shape_matches_latent(self, rng):
        params = init_params(tryon_model_spec(SMALL), seed=0)
        for hw in ((16, 16), (16, 12)):
            inp = small_input(rng, hw)
            c_g, c_l = small_conditions(rng)
            out = predict_noise(inp, 3, c_g, c_l, params, SMALL)
            assert out.shape == (3, *hw)

    def test_deterministic(self, rng):
        params = init_params(tryon_model_spec(SMALL), seed=1)
        inp = small_input(rng)
        c_g, c_l = small_conditions(rng)
        a = predict_noise(inp, 5, c_g, c_l, params, SMALL).data
        b = predict_noise(inp, 5, c_g, c_l, params, SMALL).data
        assert np.array_equal(a, b)

    def test_decoder_lambda_gradient_matches_fd(self, rng):
        params = init_params(tryon_model_spec(SMALL), seed=2)
        for name in params.names():
            if not name.endswith(("ln1.g", "ln2.g", "ln.g")):
                params[name].data[:] = rng.normal(size=params[name].shape) * 0.2
        inp = small_input(rng)
        c_g, c_l = small_conditions(rng)
        lam = params["unet.dec0.jab.lam"]

        def build():
            return num.tmean(predict_noise(inp, 4, c_g, c_l, params, SMALL))

        check_grads(build, [lam], tol=1e-4)

    def test_level_count_contract(self, rng):
        params = init_params(tryon_model_spec(SMALL), seed=0)
        c_g, c_l = small_conditions(rng)
        with pytest.raises(ContractError):
            predict_noise(small_input(rng), 3, c_g,
                          LocalConditions(c_l.levels[:1], c_l.grid), params, SMALL)


class TestDdimSample:
    def test_monotone_subsample(self):
        assert ddim_steps(200, 20) == [10 * (i + 1) for i in range(20)]
        with pytest.raises(ContractError):
            ddim_steps(10, 11)

    def test_same_seed_identical(self, rng):
        sched = make_schedule(10, 0.05, 0.2)
        agnostic = rng.uniform(-1, 1, size=(3, 8, 8))
        mask = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
        eps_fn = lambda z, t: np.zeros_like(z)
        a = ddim_sample(eps_fn, agnostic, mask, sched, 5, seed=3).data
        b = ddim_sample(eps_fn, agnostic, mask, sched, 5, seed=3).data
        assert np.array_equal(a, b)

    def test_closed_loop_recovers_z0(self, rng):
        sched = make_schedule(50, 1e-4, 0.05)
        z0 = rng.uniform(-0.9, 0.9, size=(3, 8, 8))
        mask = np.ones((8, 8))

        def true_eps(z, t):
            ab = sched.alpha_bar(t)
            return (z - math.sqrt(ab) * z0) / math.sqrt(1.0 - ab)

        out = ddim_sample(true_eps, np.zeros_like(z0), mask, sched, 25, seed=0)
        assert np.max(np.abs(out.data - z0)) < 1e-6

    def test_unmasked_pixels_bit_identical(self, rng):
        sched = make_schedule(10, 0.05, 0.2)
        agnostic = rng.uniform(-1, 1, size=(3, 8, 8))
        mask = np.zeros((8, 8))
        mask[2:6, 2:6] = 1.0
        out = ddim_sample(lambda z, t: np.zeros_like(z), agnostic, mask, sched, 5, seed=1)
        keep = mask < 0.5
        assert np.array_equal(out.data[:, keep], agnostic[:, keep])

    def test_steps_beyond_T_rejected(self, rng):
        sched = make_schedule(4, 0.1, 0.1)
        with pytest.raises(ContractError):
            ddim_sample(lambda z, t: z, np.zeros((3, 8, 8)), np.ones((8, 8)), sched, 5, 0)


def _garments(rng, hw=(16, 16), front=None, back=None):
    skel = PoseSkeleton(np.concatenate([rng.uniform(0.2, 0.8, size=(18, 2)),
                                        np.ones((18, 1))], axis=1))
    return GarmentPair(
        front_image=Tensor(front if front is not None else rng.uniform(-1, 1, size=(3, *hw))),
        back_image=Tensor(back if back is not None else rng.uniform(-1, 1, size=(3, *hw))),
        front_pose=skel, back_pose=skel)


class TestPastePrewarp:
    def test_zero_garment_zeroes_mask_region(self, rng):
        agnostic = Tensor(rng.uniform(-1, 1, size=(3, 16, 16)))
        mask = np.zeros((16, 16))
        mask[4:10, 5:12] = 1.0
        garments = _garments(rng, front=np.zeros((3, 16, 16)))
        out = paste_prewarp(agnostic, mask, garments, ViewChoice.FRONT)
        inside = mask > 0.5
        assert np.array_equal(out.data[:, inside], np.zeros((3, int(inside.sum()))))
        assert np.array_equal(out.data[:, ~inside], agnostic.data[:, ~inside])

    def test_full_mask_same_size_copies_garment(self, rng):
        agnostic = Tensor(rng.uniform(-1, 1, size=(3, 16, 16)))
        garments = _garments(rng)
        out = paste_prewarp(agnostic, np.ones((16, 16)), garments, ViewChoice.BACK)
        assert np.array_equal(out.data, garments.back_image.data)

    def test_corner_markers_land_on_mask_corners(self, rng):
        garment = np.full((3, 16, 16), -1.0)
        garment[:, 0, 0] = 1.0    # distinct marker values per corner
        garment[:, 0, -1] = 0.5
        garment[:, -1, 0] = 0.25
        garment[:, -1, -1] = 0.75
        agnostic = Tensor(np.zeros((3, 24, 20)))
        mask = np.zeros((24, 20))
        r0, r1, c0, c1 = 5, 18, 3, 15
        mask[r0:r1 + 1, c0:c1 + 1] = 1.0
        out = paste_prewarp(agnostic, mask, _garments(rng, front=garment), ViewChoice.FRONT).data
        assert abs(out[0, r0, c0] - 1.0) < 1e-12
        assert abs(out[0, r0, c1] - 0.5) < 1e-12
        assert abs(out[0, r1, c0] - 0.25) < 1e-12
        assert abs(out[0, r1, c1] - 0.75) < 1e-12

    def test_empty_mask_rejected(self, rng):
        with pytest.raises(ContractError):
            paste_prewarp(Tensor(np.zeros((3, 8, 8))), np.zeros((8, 8)),
                          _garments(rng, hw=(8, 8)), ViewChoice.FRONT)


class TestTryOnModel:
    def test_condition_shapes_all_modes(self, rng):
        samples = synth_generate(5, 1, image_hw=(16, 16))
        item = make_tryon_sample(samples[0], 0)
        for use_hard, use_soft in ((True, True), (True, False), (False, False)):
            model = TryOnModel.create(SMALL, seed=3, use_hard=use_hard, use_soft=use_soft)
            c_g, c_l = model.garment_conditions(item.garments, item.pose)
            expect_tokens = 1 if use_hard else 2
            tokens = c_g.token if use_hard else c_g
            assert tokens.shape == (expect_tokens, SMALL.d_g)
            assert c_l.grid == (2, 2)
            for lvl, d in zip(c_l.levels, SMALL.local_widths):
                assert lvl.shape == (4, 2 * d)

    def test_sample_tryon_respects_mask_and_seed(self):
        samples = synth_generate(6, 1, image_hw=(16, 16))
        item = make_tryon_sample(samples[0], 1)
        model = TryOnModel.create(SMALL, seed=4)
        out1 = model.sample_tryon(item, seed=11, steps=4)
        out2 = model.sample_tryon(item, seed=11, steps=4)
        assert np.array_equal(out1, out2)
        keep = item.mask < 0.5
        assert np.array_equal(out1[:, keep], item.agnostic[:, keep])

    def test_sinusoidal_embedding_shape(self):
        emb = sinusoidal_embedding(7, 16)
        assert emb.shape == (1, 16)
        assert np.isfinite(emb.data).all()
