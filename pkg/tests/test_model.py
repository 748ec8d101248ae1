"""Tests for the backbone + mixture head model and its gradients."""

import numpy as np
import pytest

from mixcast import gmm, model
from mixcast.model import (
    BackboneConfig,
    ForecastBatch,
    HeadConfig,
    ModelConfig,
    ModelParams,
    default_anchors,
)


def gmm_config(k=5, horizon=4, t_h=6, hidden=8, features=8, proj=8, channels=1, alpha=0.3):
    return ModelConfig(
        variant="gmm" if k > 1 else "norm",
        backbone=BackboneConfig(
            input_steps=t_h, channels=channels, hidden=hidden, features=features,
            graph_alpha=alpha,
        ),
        horizon=horizon,
        head=HeadConfig(components=k, horizon=horizon, proj_width=proj),
    )


def det_config(horizon=4, t_h=6, hidden=8, features=8):
    return ModelConfig(
        variant="det",
        backbone=BackboneConfig(input_steps=t_h, hidden=hidden, features=features),
        horizon=horizon,
    )


def random_batch(rng, cfg, b=3, n=2):
    inputs = rng.normal(0, 1, (b, n, cfg.backbone.input_dim))
    targets = rng.normal(0, 1, (b, n, cfg.horizon))
    return ForecastBatch(inputs=inputs, targets=targets)


def randomize(params, rng, scale=0.3):
    out = params.copy()
    for name in out.names():
        out[name] = rng.normal(0, scale, out[name].shape)
    return out


class TestHeadConfig:
    def test_default_anchor_geometry(self):
        scale, anchors = default_anchors(5)
        assert (5 + 1) * scale == pytest.approx(6.0, abs=1e-12)
        np.testing.assert_allclose(anchors, [-2, -1, 0, 1, 2], atol=1e-12)
        np.testing.assert_allclose(anchors, -anchors[::-1], atol=1e-12)

    def test_other_k_keeps_span(self):
        for k in (1, 2, 3, 7, 9):
            scale, anchors = default_anchors(k)
            assert (k + 1) * scale == pytest.approx(6.0, abs=1e-12)
            np.testing.assert_allclose(anchors, -anchors[::-1], atol=1e-12)
            if k > 1:
                assert np.all(np.diff(anchors) > 0)

    def test_norm_variant_requires_single_component(self):
        with pytest.raises(ValueError):
            ModelConfig(
                variant="norm",
                backbone=BackboneConfig(input_steps=4),
                horizon=2,
                head=HeadConfig(components=3, horizon=2),
            )


class TestInitialization:
    def test_branch_init_values(self):
        cfg = gmm_config()
        params = model.init_params(cfg, np.random.default_rng(0))
        assert np.all(params["mix.w"] == 0)
        assert np.all(params["mix.b"] == 1.0 / 5)
        for name in ("mean.w", "mean.b", "logvar.w", "logvar.b"):
            assert np.all(params[name] == 0)

    def test_prior_at_init_exact_for_any_input(self):
        cfg = gmm_config()
        params = model.init_params(cfg, np.random.default_rng(1))
        rng = np.random.default_rng(2)
        for _ in range(5):
            inputs = rng.normal(0, 5, (2, 3, cfg.backbone.input_dim))
            mb = model.predict(params, cfg, inputs)
            assert np.all(mb.weights == 1.0 / 5)
            np.testing.assert_array_equal(
                mb.means, np.broadcast_to(cfg.head.anchors, mb.means.shape)
            )
            assert np.all(mb.variances == 1.0)

    def test_same_seed_same_params(self):
        cfg = gmm_config()
        a = model.init_params(cfg, np.random.default_rng(7))
        b = model.init_params(cfg, np.random.default_rng(7))
        for name in a.names():
            np.testing.assert_array_equal(a[name], b[name])

    def test_reference_mixture_matches_init_output(self):
        cfg = gmm_config()
        ref = model.reference_mixture(cfg.head)
        params = model.init_params(cfg, np.random.default_rng(0))
        mb = model.predict(params, cfg, np.zeros((1, 1, cfg.backbone.input_dim)))
        one = mb.at((0, 0, 0))
        np.testing.assert_allclose(one.weights, ref.weights, atol=1e-15)
        np.testing.assert_allclose(one.means, ref.means, atol=1e-15)
        np.testing.assert_allclose(one.variances, ref.variances, atol=1e-15)


class TestHeadForward:
    def test_weights_sum_to_one_for_random_params(self):
        cfg = gmm_config()
        rng = np.random.default_rng(3)
        params = randomize(model.init_params(cfg, rng), rng)
        z = rng.normal(0, 1, (10, cfg.backbone.features))
        mb = model.head_forward(z, cfg.head, params)
        np.testing.assert_allclose(mb.weights.sum(-1), 1.0, atol=1e-9)
        assert mb.shape == (10, cfg.horizon)

    def test_softmax_shift_invariance(self):
        cfg = gmm_config()
        rng = np.random.default_rng(4)
        params = randomize(model.init_params(cfg, rng), rng)
        z = rng.normal(0, 1, (4, cfg.backbone.features))
        mb = model.head_forward(z, cfg.head, params)
        shifted = params.copy()
        shifted["mix.b"] = shifted["mix.b"] + 3.7  # same shift on all K logits
        mb2 = model.head_forward(z, cfg.head, shifted)
        np.testing.assert_allclose(mb.weights, mb2.weights, atol=1e-12)

    def test_k1_head_reparameterization(self):
        cfg = gmm_config(k=1)
        rng = np.random.default_rng(5)
        params = randomize(model.init_params(cfg, rng), rng)
        z = rng.normal(0, 1, (6, cfg.backbone.features))
        mb = model.head_forward(z, cfg.head, params)
        zp = z @ params["proj.w"].T + params["proj.b"]
        offs = (zp @ params["mean.w"].T + params["mean.b"]).reshape(6, cfg.horizon, 1)
        np.testing.assert_allclose(
            mb.means, offs * cfg.head.anchor_scale + cfg.head.anchors, atol=1e-12
        )
        assert np.all(mb.weights == 1.0)

    def test_head_independent_of_backbone(self):
        # The head only sees z; feeding z from any source gives the same
        # mixtures, so an identity backbone stub is equivalent.
        cfg = gmm_config(t_h=8, features=8)
        rng = np.random.default_rng(6)
        params = randomize(model.init_params(cfg, rng), rng)
        z = rng.normal(0, 1, (3, 2, 8))
        direct = model.head_forward(z, cfg.head, params)
        identity = BackboneConfig(input_steps=8, hidden=8, features=8, activation="identity")
        stub = ModelParams(
            {
                "backbone.w1": np.eye(8),
                "backbone.b1": np.zeros(8),
                "backbone.w2": np.eye(8),
                "backbone.b2": np.zeros(8),
                "proj.w": params["proj.w"],
                "proj.b": params["proj.b"],
                "mix.w": params["mix.w"],
                "mix.b": params["mix.b"],
                "mean.w": params["mean.w"],
                "mean.b": params["mean.b"],
                "logvar.w": params["logvar.w"],
                "logvar.b": params["logvar.b"],
            }
        )
        via_stub = model.head_forward(
            model.backbone_forward(z, stub, identity), cfg.head, stub
        )
        np.testing.assert_array_equal(direct.weights, via_stub.weights)
        np.testing.assert_array_equal(direct.means, via_stub.means)

    def test_logvar_clamped(self):
        cfg = gmm_config()
        params = model.init_params(cfg, np.random.default_rng(0))
        params["logvar.b"] = np.full_like(params["logvar.b"], 50.0)
        mb = model.predict(params, cfg, np.zeros((1, 1, cfg.backbone.input_dim)))
        assert np.all(mb.variances == pytest.approx(np.exp(10.0)))


class TestBackbone:
    def test_zero_weights_give_prior_end_to_end(self):
        cfg = gmm_config()
        params = model.init_params(cfg, np.random.default_rng(0))
        for name in ("backbone.w1", "backbone.w2", "proj.w"):
            params[name] = np.zeros_like(params[name])
        mb = model.predict(params, cfg, np.random.default_rng(1).normal(0, 2, (2, 2, 6)))
        assert np.all(mb.weights == 0.2)
        assert np.all(mb.variances == 1.0)

    def test_identity_configuration_passes_inputs_through(self):
        bb = BackboneConfig(input_steps=5, hidden=5, features=5, activation="identity")
        params = ModelParams(
            {
                "backbone.w1": np.eye(5),
                "backbone.b1": np.zeros(5),
                "backbone.w2": np.eye(5),
                "backbone.b2": np.zeros(5),
            }
        )
        x = np.random.default_rng(2).normal(0, 1, (1, 1, 5))
        np.testing.assert_array_equal(model.backbone_forward(x, params, bb), x)

    def test_graph_alpha_zero_is_noop_bitwise(self):
        cfg_on = BackboneConfig(input_steps=4, hidden=6, features=6, graph_alpha=0.0)
        params = model.init_params(
            ModelConfig(variant="det", backbone=cfg_on, horizon=2),
            np.random.default_rng(3),
        )
        rng = np.random.default_rng(4)
        x = rng.normal(0, 1, (2, 5, 4))
        graph = rng.random((5, 5))
        with_graph = model.backbone_forward(x, params, cfg_on, graph)
        without = model.backbone_forward(x, params, cfg_on, None)
        np.testing.assert_array_equal(with_graph, without)

    def test_graph_mixing_averages_neighbors(self):
        bb = BackboneConfig(input_steps=3, hidden=3, features=3, activation="identity",
                            graph_alpha=0.5)
        params = ModelParams(
            {
                "backbone.w1": np.eye(3),
                "backbone.b1": np.zeros(3),
                "backbone.w2": np.eye(3),
                "backbone.b2": np.zeros(3),
            }
        )
        x = np.zeros((1, 2, 3))
        x[0, 0] = [1.0, 1.0, 1.0]
        graph = np.array([[0.0, 1.0], [1.0, 0.0]])
        z = model.backbone_forward(x, params, bb, graph)
        np.testing.assert_allclose(z[0, 0], 0.5 * x[0, 0])
        np.testing.assert_allclose(z[0, 1], 0.5 * x[0, 0])

    def test_shape_mismatch_rejected(self):
        cfg = gmm_config()
        params = model.init_params(cfg, np.random.default_rng(0))
        with pytest.raises(ValueError):
            model.backbone_forward(np.zeros((2, 3, 99)), params, cfg.backbone)


class TestForwardLoss:
    def test_init_loss_is_prior_nll_constant(self):
        cfg = gmm_config()
        params = model.init_params(cfg, np.random.default_rng(0))
        ref_nll = gmm.nll(model.reference_mixture(cfg.head), 0.0)
        rng = np.random.default_rng(1)
        losses = []
        for _ in range(3):
            batch = ForecastBatch(
                inputs=rng.normal(0, 1, (4, 2, 6)), targets=np.zeros((4, 2, 4))
            )
            loss, _ = model.forward_loss(batch, params, cfg)
            losses.append(loss)
        assert all(v == pytest.approx(ref_nll, abs=1e-12) for v in losses)

    def test_k1_init_loss_is_standard_normal_nll(self):
        cfg = gmm_config(k=1)
        params = model.init_params(cfg, np.random.default_rng(0))
        batch = ForecastBatch(inputs=np.zeros((2, 2, 6)), targets=np.zeros((2, 2, 4)))
        loss, _ = model.forward_loss(batch, params, cfg)
        assert loss == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_loss_decreases_on_fixed_batch(self):
        cfg = gmm_config(k=3, horizon=2, t_h=4)
        rng = np.random.default_rng(11)
        params = model.init_params(cfg, rng)
        batch = ForecastBatch(
            inputs=rng.normal(0, 1, (8, 2, 4)),
            targets=rng.choice([-1.5, 1.5], size=(8, 2, 2)) + rng.normal(0, 0.05, (8, 2, 2)),
        )
        first, _ = model.forward_loss(batch, params, cfg)
        lr = 0.05
        losses = [first]
        for _ in range(50):
            _, grads = model.backward(batch, params, cfg)
            for name in params.names():
                params[name] = params[name] - lr * grads[name]
            losses.append(model.forward_loss(batch, params, cfg)[0])
        assert losses[-1] < first - 0.1
        # Smoothed trend is monotone downward.
        smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
        assert smooth[-1] < smooth[0]

    def test_nan_params_reported_with_index(self):
        cfg = gmm_config()
        params = model.init_params(cfg, np.random.default_rng(0))
        params["mean.b"] = np.full_like(params["mean.b"], np.nan)
        batch = ForecastBatch(inputs=np.zeros((1, 1, 6)), targets=np.zeros((1, 1, 4)))
        with pytest.raises(ValueError, match="element"):
            model.forward_loss(batch, params, cfg)


class TestBackward:
    def rel_err(self, a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-6)

    def finite_difference_check(self, cfg, seed, probes=30, graph=None, tol=1e-3):
        rng = np.random.default_rng(seed)
        params = randomize(model.init_params(cfg, rng), rng)
        batch = random_batch(rng, cfg)
        if graph is not None:
            batch.graph = graph
        _, grads = model.backward(batch, params, cfg)
        h = 1e-4
        worst = 0.0
        for _ in range(probes):
            name = params.names()[rng.integers(len(params.names()))]
            flat_idx = int(rng.integers(params[name].size))
            idx = np.unravel_index(flat_idx, params[name].shape)
            for sign, store in ((1, "up"), (-1, "dn")):
                p = params.copy()
                p[name][idx] += sign * h
                if sign == 1:
                    up = model.forward_loss(batch, p, cfg)[0]
                else:
                    dn = model.forward_loss(batch, p, cfg)[0]
            fd = (up - dn) / (2 * h)
            worst = max(worst, self.rel_err(fd, grads[name][idx]))
        assert worst < tol

    def test_gmm_matches_finite_differences(self):
        self.finite_difference_check(gmm_config(k=2, horizon=3, t_h=4), seed=21)

    def test_det_matches_finite_differences(self):
        # |.| is non-differentiable at 0; random targets keep errors away
        # from the kink at the probe scale.
        self.finite_difference_check(det_config(horizon=3, t_h=4), seed=22)

    def test_norm_matches_finite_differences(self):
        self.finite_difference_check(gmm_config(k=1, horizon=2, t_h=4), seed=23)

    def test_graph_path_matches_finite_differences(self):
        rng = np.random.default_rng(24)
        graph = rng.random((2, 2))
        self.finite_difference_check(gmm_config(k=2, horizon=2, t_h=4), seed=24, graph=graph)

    def test_identity_activation_matches_finite_differences(self):
        cfg = ModelConfig(
            variant="gmm",
            backbone=BackboneConfig(input_steps=4, hidden=6, features=6, activation="identity"),
            horizon=2,
            head=HeadConfig(components=2, horizon=2, proj_width=6),
        )
        self.finite_difference_check(cfg, seed=25)

    def test_mean_bias_symmetry_at_init(self):
        # At the weakly-informative init with mirrored targets +-t, the
        # mean-branch bias gradient is mirror-antisymmetric across
        # components, so a uniform bias perturbation has zero directional
        # derivative.
        cfg = gmm_config(k=5, horizon=1, t_h=4)
        params = model.init_params(cfg, np.random.default_rng(0))
        t = 1.3
        batch = ForecastBatch(
            inputs=np.zeros((2, 1, 4)), targets=np.array([[[t]], [[-t]]])
        )
        _, grads = model.backward(batch, params, cfg)
        g = grads["mean.b"].reshape(cfg.horizon, 5)[0]
        np.testing.assert_allclose(g, -g[::-1], atol=1e-14)
        assert g.sum() == pytest.approx(0.0, abs=1e-14)

    def test_mixing_gradient_sign_at_anchor(self):
        # A target sitting exactly on anchor j makes that component the
        # most responsible one, so the loss gradient on its logit is
        # negative (descent raises its weight).
        cfg = gmm_config(k=5, horizon=1, t_h=4)
        params = model.init_params(cfg, np.random.default_rng(0))
        j = 3
        target = cfg.head.anchors[j]
        batch = ForecastBatch(inputs=np.zeros((1, 1, 4)), targets=np.full((1, 1, 1), target))
        _, grads = model.backward(batch, params, cfg)
        g = grads["mix.b"].reshape(cfg.horizon, 5)[0]
        assert g[j] < 0
        assert g[j] == g.min()

    def test_backward_deterministic(self):
        cfg = gmm_config(k=3, horizon=2, t_h=4)
        rng = np.random.default_rng(31)
        params = randomize(model.init_params(cfg, rng), rng)
        batch = random_batch(rng, cfg)
        l1, g1 = model.backward(batch, params, cfg)
        l2, g2 = model.backward(batch, params, cfg)
        assert l1 == l2
        for name in g1:
            np.testing.assert_array_equal(g1[name], g2[name])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = gmm_config()
        rng = np.random.default_rng(41)
        params = randomize(model.init_params(cfg, rng), rng)

        class Norm:
            mean = 3.25
            std = 1.75

        path = tmp_path / "model.npz"
        model.save_checkpoint(path, params, cfg, normalizer=Norm(), extra={"note": "test"})
        loaded, cfg2, norm, extra = model.load_checkpoint(path)
        for name in params.names():
            np.testing.assert_array_equal(loaded[name], params[name])
        assert cfg2.variant == cfg.variant
        assert cfg2.head.components == cfg.head.components
        np.testing.assert_array_equal(cfg2.head.anchors, cfg.head.anchors)
        assert norm == {"mean": 3.25, "std": 1.75}
        assert extra == {"note": "test"}

    def test_det_checkpoint_has_no_head(self, tmp_path):
        cfg = det_config()
        params = model.init_params(cfg, np.random.default_rng(0))
        path = tmp_path / "det.npz"
        model.save_checkpoint(path, params, cfg)
        _, cfg2, norm, _ = model.load_checkpoint(path)
        assert cfg2.variant == "det"
        assert cfg2.head is None
        assert norm is None

    def test_wrong_file_rejected(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, a=np.zeros(3))
        with pytest.raises((ValueError, KeyError)):
            model.load_checkpoint(path)
