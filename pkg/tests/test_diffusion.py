import numpy as np
import pytest
from scipy import stats

import util

from viewsynth import diffusion as df
from viewsynth import tensor as tc
from viewsynth import warp


class TestSchedule:
    def test_linear_beta_endpoints(self):
        sched = df.make_schedule(1000, "linear_beta")
        assert sched.T == 1000
        # reconstruct betas: beta_t = 1 - ab[t] / ab[t-1]
        betas = 1.0 - sched.alpha_bar[1:] / sched.alpha_bar[:-1]
        assert betas[0] == pytest.approx(1e-4, rel=1e-9)
        assert betas[-1] == pytest.approx(2e-2, rel=1e-9)

    @pytest.mark.parametrize("kind", ["linear_beta", "cosine"])
    def test_alpha_bar_zero_is_one_and_monotone(self, kind):
        sched = df.make_schedule(50, kind)
        assert sched.alpha_bar[0] == 1.0
        assert (np.diff(sched.alpha_bar) < 0).all()
        assert (sched.alpha_bar > 0).all() and (sched.alpha_bar <= 1).all()

    def test_invalid(self):
        with pytest.raises(df.DiffusionError):
            df.make_schedule(0)
        with pytest.raises(df.DiffusionError):
            df.make_schedule(10, "quadratic")


class TestPerturbRecover:
    def setup_method(self):
        self.sched = df.make_schedule(100)

    def test_limit_alpha_near_one(self):
        z = np.full((2, 2), 3.0, dtype=np.float32)
        out = df.perturb(z, np.ones((2, 2), dtype=np.float32), 1, self.sched)
        np.testing.assert_allclose(out, z, atol=0.05)

    def test_scalar_formula(self):
        # alpha_bar = 0.25: 0.5*1 + sqrt(0.75)*2 = 2.23205...
        sched = df.DiffusionSchedule("linear_beta", np.array([1.0, 0.25]))
        out = df.perturb(np.array([1.0]), np.array([2.0]), 1, sched)
        assert out[0] == pytest.approx(2.232050807568877, rel=1e-7)
        back = df.recover(np.array([2.232050807568877]), np.array([2.0]), 1, sched)
        assert back[0] == pytest.approx(1.0, rel=1e-6)

    def test_zero_noise_recover(self):
        sched = df.DiffusionSchedule("linear_beta", np.array([1.0, 0.25]))
        out = df.recover(np.array([2.0]), np.array([0.0]), 1, sched)
        assert out[0] == pytest.approx(4.0)

    def test_round_trip_all_t(self):
        rng = np.random.default_rng(0)
        for seed in range(100):
            z = rng.standard_normal((4,)).astype(np.float32)
            xi = rng.standard_normal((4,)).astype(np.float32)
            t = int(rng.integers(1, self.sched.T + 1))
            back = df.recover(df.perturb(z, xi, t, self.sched), xi, t, self.sched)
            np.testing.assert_allclose(back, z, atol=1e-5)

    def test_variance_preservation(self):
        rng = np.random.default_rng(1)
        for t in (1, 37, 100):
            xi = rng.standard_normal(10_000).astype(np.float32)
            out = df.perturb(np.zeros(10_000, dtype=np.float32), xi, t, self.sched)
            assert out.var() == pytest.approx(1.0 - self.sched.alpha_bar[t], rel=0.05) or t == 1
            # full variance check: signal 0, Var = 1 - alpha_bar; plus a unit
            # standard normal signal makes the total variance 1
            z = rng.standard_normal(10_000).astype(np.float32)
            assert df.perturb(z, xi, t, self.sched).var() == pytest.approx(1.0, rel=0.05)

    def test_t_out_of_range(self):
        with pytest.raises(df.DiffusionError):
            df.perturb(np.zeros(1), np.zeros(1), 0, self.sched)
        with pytest.raises(df.DiffusionError):
            df.recover(np.zeros(1), np.zeros(1), 101, self.sched)


class TestStructuredNoise:
    def test_single_identity_view_equals_eps0(self):
        _, _, frames, _ = util.small_conditioning(seed=0, n=2, res=16)
        # a trajectory whose target equals the reference pose: dolly step 0
        _, _, frames, cond = util.small_conditioning(seed=1, n=1, res=16, kind="dolly")
        cond.cameras[1] = cond.cameras[0]
        bundle = df.sample_structured_noise(cond, seed=5)
        np.testing.assert_array_equal(bundle.xi[0], bundle.eps0)
        assert bundle.masks[0].min() == 1.0

    def test_identical_poses_agree_on_filled_region(self):
        _, _, frames, cond = util.small_conditioning(seed=2, n=2, res=16)
        cond.cameras[2] = cond.cameras[1]
        bundle = df.sample_structured_noise(cond, seed=6)
        joint = (bundle.masks[0] == 1) & (bundle.masks[1] == 1)
        np.testing.assert_array_equal(bundle.xi[0][:, joint], bundle.xi[1][:, joint])

    def test_filled_equals_warped_eps0_exactly(self):
        _, _, frames, cond = util.small_conditioning(seed=3, n=3, res=16)
        bundle = df.sample_structured_noise(cond, seed=7)
        r = warp.noise_receptive_px(16)
        for i in range(3):
            res = warp.warp_noise(bundle.eps0, cond.ref_depth, cond.cameras[0],
                                  cond.cameras[i + 1], r)
            np.testing.assert_array_equal(bundle.masks[i], res.mask)
            sel = res.mask == 1
            np.testing.assert_array_equal(bundle.xi[i][:, sel], res.image[:, sel])

    def test_per_pixel_marginals_standard_normal(self):
        _, _, frames, cond = util.small_conditioning(seed=4, n=2, res=12)
        samples = np.stack([df.sample_structured_noise(cond, seed=s).xi for s in range(200)])
        # per-pixel KS across seeds; false-rejection rate should sit near the
        # 1% significance level
        flat = samples.reshape(200, -1)
        pvals = np.array([stats.kstest(flat[:, j], "norm").pvalue
                          for j in range(0, flat.shape[1], 7)])
        assert (pvals < 0.01).mean() < 0.05

    def test_deterministic(self):
        _, _, frames, cond = util.small_conditioning(seed=5, n=2, res=16)
        a = df.sample_structured_noise(cond, seed=9)
        b = df.sample_structured_noise(cond, seed=9)
        np.testing.assert_array_equal(a.xi, b.xi)

    def test_independent_mode_empty_masks(self):
        _, _, frames, cond = util.small_conditioning(seed=6, n=2, res=16)
        bundle = df.sample_structured_noise(cond, seed=10, structured=False)
        assert bundle.masks.sum() == 0


class TestConditioning:
    def test_counts_and_binary_mask(self):
        _, _, frames, cond = util.small_conditioning(seed=7, n=3, res=16)
        assert cond.n_views == 3
        assert cond.pose_vecs.shape == (3, 12)
        assert np.isin(cond.masks, (0, 1)).all()

    def test_no_warp_and_no_pose_flags(self):
        _, _, frames, cond = util.small_conditioning(seed=7, n=2, res=16,
                                                     no_warp=True, no_pose=True)
        assert not cond.warped.any()
        assert not cond.masks.any()
        assert not cond.pose_vecs.any()

    def test_edit_mask_opens_hole(self):
        scene, traj, frames, cond = util.small_conditioning(seed=8, n=2, res=16)
        edit = np.ones((16, 16))
        edit[6:10, 6:10] = 0  # keep only a small central patch
        cond2 = df.build_conditioning(frames[0].image, frames[0].depth,
                                      [f.camera for f in frames], edit_mask=edit)
        assert cond2.masks.sum() < cond.masks.sum()
        assert not cond2.reference[:, edit == 1].any()
        # masked warp never uses masked sources: targets covered by cond2 are
        # a subset of those covered without the edit
        assert np.all(cond.masks[cond2.masks == 1] == 1)


class QuadModel:
    """100-parameter toy: eps_hat = W @ flat(z_t) reshaped, silu'd."""

    def __init__(self, n_in, seed=0):
        rng = np.random.default_rng(seed)
        self.params = {"w": tc.parameter(rng.standard_normal((n_in, n_in)) * 0.1)}

    def forward(self, z_t, cond, t):
        flat = tc.constant(np.asarray(z_t, dtype=self.params["w"].dtype).reshape(1, -1))
        out = tc.silu(tc.matmul(flat, self.params["w"]))
        return tc.reshape(out, np.asarray(z_t).shape)

    def predict(self, z_t, cond, t):
        return self.forward(z_t, cond, t).data


class TestTrainingLoss:
    def make(self, seed=9):
        _, _, frames, cond = util.small_conditioning(seed=seed, n=2, res=16)
        views = np.stack([f.image for f in frames[1:]])
        return views, cond

    def test_perfect_predictor_zero_loss(self):
        views, cond = self.make()
        sched = df.make_schedule(60)

        class Oracle:
            params = {}

            def forward(self, z_t, cond, t, _v=views, _s=sched):
                # invert the perturbation analytically: the true noise
                a = _s.alpha_bar[t]
                xi = (z_t - np.sqrt(a) * _v) / np.sqrt(1 - a)
                return tc.constant(xi)

        loss, _, _ = df.training_loss(Oracle(), views, cond, sched, seed=11)
        assert loss < 1e-10

    def test_zero_predictor_loss_near_one(self):
        views, cond = self.make()
        sched = df.make_schedule(60)

        class Zero:
            params = {}

            def forward(self, z_t, cond, t):
                return tc.constant(np.zeros_like(z_t))

        losses = [df.training_loss(Zero(), views, cond, sched, seed=s)[0] for s in range(30)]
        # E[xi^2] = 1 per pixel
        assert np.mean(losses) == pytest.approx(1.0, rel=0.05)

    def test_loss_gradient_matches_finite_differences(self):
        views, cond = self.make()
        n = views.size
        sched = df.make_schedule(40)
        rng = np.random.default_rng(3)
        model = QuadModel(n_in=n, seed=4)
        model.params["w"] = tc.parameter(rng.standard_normal((n, n))[:10, :10] * 0.05)

        # shrink to a 10x10 weight on a 10-pixel slice to keep FD affordable
        class Small:
            def __init__(self):
                self.params = model.params

            def forward(self, z_t, cond, t):
                flat = tc.constant(np.asarray(z_t, dtype=np.float64).reshape(-1)[:10][None])
                out = tc.silu(tc.matmul(flat, self.params["w"]))
                full = np.zeros(n)
                pad = tc.constant(np.zeros((1, n - 10)))
                return tc.reshape(tc.concat([out, pad], axis=1), views.shape)

        small = Small()
        small.params["w"] = tc.parameter(np.asarray(small.params["w"].data, dtype=np.float64))
        loss, grads, t = df.training_loss(small, views, cond, sched, seed=12)

        def loss_fn(w):
            small.params["w"] = w
            val, _, _ = df.training_loss(small, views, cond, sched, seed=12)
            return tc.constant(np.array(val))

        w = small.params["w"]
        numeric = tc.numeric_gradient(loss_fn, [w])[0]
        small.params["w"] = w
        denom = max(np.abs(numeric).max(), 1e-12)
        assert np.abs(grads["w"] - numeric).max() / denom < 1e-4


class TestDDIM:
    def test_timesteps_include_endpoints(self):
        ts = df.ddim_timesteps(1000, 35)
        assert ts[0] == 1000 and ts[-1] == 1
        assert len(ts) == 35
        with pytest.raises(df.DiffusionError):
            df.ddim_timesteps(100, 101)

    def test_single_step_perfect_predictor_recovers_exactly(self):
        # eps_theta == the true noise: one step to t=0 with alpha_0 = 1
        # returns z exactly (algebraic identity)
        rng = np.random.default_rng(13)
        sched = df.make_schedule(50)
        z = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        xi = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        z_t = df.perturb(z, xi, 50, sched)
        model = util.ConstantNoisePredictor(xi)
        out = df.ddim_sample(model, cond=None, sched=sched, num_steps=1, seed=0, xi_init=z_t)
        np.testing.assert_allclose(out, z, atol=1e-5)

    def test_gaussian_toy_statistics(self):
        mu, sigma = 1.5, 0.7
        sched = df.make_schedule(1000)
        model = util.GaussianOptimalPredictor(mu, sigma, sched)
        n = 10_000
        rng = np.random.default_rng(14)
        xi = rng.standard_normal((n,)).astype(np.float32)
        out = df.ddim_sample(model, cond=None, sched=sched, num_steps=300, seed=0, xi_init=xi)
        se_mean = sigma / np.sqrt(n)
        se_var = sigma ** 2 * np.sqrt(2.0 / (n - 1))
        assert abs(out.mean() - mu) < 3 * se_mean
        assert abs(out.var() - sigma ** 2) < 3 * se_var
        assert util.histogram_kl(out, mu, sigma) < 0.01

    def test_deterministic_given_seed(self):
        _, _, frames, cond = util.small_conditioning(seed=10, n=2, res=16)
        sched = df.make_schedule(40)
        rng = np.random.default_rng(15)
        xi = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        model = util.ConstantNoisePredictor(xi * 0.1)
        a = df.ddim_sample(model, cond, sched, 10, seed=3)
        b = df.ddim_sample(model, cond, sched, 10, seed=3)
        assert a.tobytes() == b.tobytes()


class TestRefinePass:
    def test_no_views_below_threshold_is_noop(self):
        _, _, frames, cond = util.small_conditioning(seed=11, n=2, res=16, kind="dolly")
        sched = df.make_schedule(40)
        model = util.ConstantNoisePredictor(np.zeros((2, 3, 16, 16)))
        first = df.ddim_sample(model, cond, sched, 5, seed=4)
        out, meta = df.refine_pass(model, first, cond, sched, 5, seed=4,
                                   overlap_threshold=0.0)
        np.testing.assert_array_equal(out, first)
        assert meta["passes"] == 1 and meta["refined"] == []

    def test_u_turn_triggers_refinement_from_generated_view(self):
        scene, traj, frames, cond = util.small_conditioning(seed=12, n=7, res=16,
                                                            kind="u_turn")
        sched = df.make_schedule(40)
        model = util.ConstantNoisePredictor(np.zeros((7, 3, 16, 16)))
        first = np.stack([f.image for f in frames[1:]])  # pretend a good pass
        out, meta = df.refine_pass(model, first, cond, sched, 5, seed=5,
                                   renderer_depths=[f.depth for f in frames[1:]])
        assert len(meta["refined"]) >= 1
        assert meta["passes"] == 2
        # at least one refined view re-conditions on a generated neighbor
        assert any(v != 0 for v in meta["sources"].values())

    def test_default_threshold(self):
        import inspect
        sig = inspect.signature(df.refine_pass)
        assert sig.parameters["overlap_threshold"].default == 0.20
