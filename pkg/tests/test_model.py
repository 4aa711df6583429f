"""Model tests: shape arithmetic, attention pooling bounds, domain head and
gradient reversal, seeding, persistence, and a full-model gradient check."""

import numpy as np
import pytest

from sedtriadv import autodiff as ad
from sedtriadv.errors import CheckpointError, ConfigError, ShapeError
from sedtriadv.losses import LabelTensor, domain_bce, labeler_orthogonality, \
    total_classification_loss
from sedtriadv.model import (
    ADV_NONE,
    ADV_TIME,
    ADV_WHOLE,
    CLASSIFIER,
    HEADS,
    LABELER_A,
    LABELER_B,
    ModelConfig,
    SedModel,
    paper_scale_config,
)

MICRO = dict(n_classes=2, cnn_blocks=[(2, 2)], gru_hidden=3, gru_layers=1,
             time_pool_factor=1)


def micro_model(adv_mode=ADV_NONE, alpha=1.0, seed=0, dtype=np.float64,
                n_mels=4, **overrides):
    cfg = ModelConfig(**{**MICRO, **overrides}, adv_mode=adv_mode, alpha=alpha)
    return SedModel(cfg, n_mels=n_mels, seed=seed, dtype=dtype)


def micro_input(n=2, t=6, n_mels=4, seed=0):
    return np.random.default_rng(seed).normal(size=(n, t, n_mels))


class TestShapes:

    def test_default_config_maps_640x128_to_640_frames(self):
        cfg = ModelConfig()
        model = SedModel(cfg, n_mels=128, seed=0)
        x = np.random.default_rng(0).normal(size=(1, 640, 128)).astype(np.float32)
        feats = model.extract_features(x)
        assert feats.shape == (1, 640, cfg.feature_dim)

    def test_time_pooling_divides_frame_count(self):
        model = micro_model(time_pool_factor=2)
        feats = model.extract_features(micro_input(t=8))
        assert feats.shape == (2, 4, 6)

    def test_paper_scale_config_arithmetic(self):
        cfg = paper_scale_config()
        assert len(cfg.cnn_blocks) == 7
        assert cfg.gru_layers == 2
        assert cfg.n_classes == 10
        assert cfg.freq_out(128) == 1

    def test_wrong_mel_count_rejected(self):
        with pytest.raises(ShapeError):
            micro_model().extract_features(micro_input(n_mels=5))

    def test_indivisible_time_pool_rejected(self):
        with pytest.raises(ShapeError):
            micro_model(time_pool_factor=4).extract_features(micro_input(t=6))

    def test_indivisible_freq_pool_rejected(self):
        with pytest.raises(ShapeError):
            SedModel(ModelConfig(**{**MICRO, "cnn_blocks": [(2, 3)]}), n_mels=4)

    def test_zero_input_gives_identical_frames(self):
        # zero biases make the all-zero state a fixed point of the GRU
        model = micro_model()
        feats = model.extract_features(np.zeros((1, 6, 4)))
        np.testing.assert_array_equal(feats.data, 0.0)


class TestClassifyHead:

    def test_probabilities_in_open_interval(self):
        model = micro_model()
        frame, clip = model.classify_head(
            model.extract_features(micro_input()), CLASSIFIER)
        for arr in (frame.data, clip.data):
            assert np.all(arr > 0) and np.all(arr < 1)

    def test_clip_bounded_by_frame_extremes(self):
        model = micro_model(seed=3)
        frame, clip = model.classify_head(
            model.extract_features(micro_input(seed=4)), LABELER_A)
        lo = frame.data.min(axis=1) - 1e-12
        hi = frame.data.max(axis=1) + 1e-12
        assert np.all(clip.data >= lo) and np.all(clip.data <= hi)

    def test_uniform_attention_equals_mean_pooling(self):
        model = micro_model(seed=5)
        model.param(f"{CLASSIFIER}.attn.w").data[:] = 0.0
        model.param(f"{CLASSIFIER}.attn.b").data[:] = 0.0
        frame, clip = model.classify_head(
            model.extract_features(micro_input(seed=6)), CLASSIFIER)
        np.testing.assert_allclose(clip.data, frame.data.mean(axis=1), rtol=1e-9)

    def test_single_frame_clip_equals_frame(self):
        model = micro_model(seed=7)
        frame, clip = model.classify_head(
            model.extract_features(micro_input(t=1, seed=8)), CLASSIFIER)
        np.testing.assert_allclose(clip.data, frame.data[:, 0], rtol=1e-12)

    def test_mean_pooling_config(self):
        model = micro_model(seed=9, clip_pooling="mean")
        frame, clip = model.classify_head(
            model.extract_features(micro_input(seed=9)), LABELER_B)
        np.testing.assert_allclose(clip.data, frame.data.mean(axis=1), rtol=1e-12)

    def test_unknown_head_rejected(self):
        model = micro_model()
        with pytest.raises(ConfigError):
            model.classify_head(model.extract_features(micro_input()), "oracle")

    def test_heads_share_one_feature_tensor(self):
        model = micro_model(seed=10)
        feats = model.extract_features(micro_input(seed=10))
        outs = [model.classify_head(feats, h)[1] for h in HEADS]
        assert len({id(o) for o in outs}) == 3


class TestDomainHead:

    def test_whole_mode_one_probability_per_clip(self):
        model = micro_model(adv_mode=ADV_WHOLE)
        probs = model.classify_domain(model.extract_features(micro_input(n=3)))
        assert probs.shape == (3,)
        assert np.all((probs.data > 0) & (probs.data < 1))

    def test_time_mode_one_probability_per_frame(self):
        model = micro_model(adv_mode=ADV_TIME)
        probs = model.classify_domain(model.extract_features(micro_input(n=3, t=6)))
        assert probs.shape == (3, 6)

    def test_disabled_mode_rejected(self):
        model = micro_model(adv_mode=ADV_NONE)
        with pytest.raises(ConfigError):
            model.classify_domain(model.extract_features(micro_input()))

    def test_feature_gradient_is_minus_alpha_times_no_grl_gradient(self):
        # two-pass oracle: replicate the domain forward pass without the
        # reversal op and compare extractor gradients
        alpha = 0.6
        x = micro_input(seed=11)
        d = np.array([1.0, 0.0])

        def domain_grads(use_grl):
            model = micro_model(adv_mode=ADV_TIME, alpha=alpha, seed=12)
            feats = model.extract_features(x)
            if use_grl:
                probs = model.classify_domain(feats)
            else:
                n, t, h = feats.shape
                flat = feats.reshape(n * t, h)
                hidden = ad.relu(flat @ model.param("domain.h.w").transpose(1, 0)
                                 + model.param("domain.h.b"))
                probs = ad.sigmoid(hidden @ model.param("domain.out.w").transpose(1, 0)
                                   + model.param("domain.out.b")).reshape(n, t)
            ad.backward(domain_bce(probs, d))
            return [p.grad.copy() for p in model.feature_parameters()]

        with_grl = domain_grads(True)
        without = domain_grads(False)
        for g1, g0 in zip(with_grl, without):
            np.testing.assert_allclose(g1, -alpha * g0, rtol=1e-12, atol=1e-15)

    def test_domain_parameters_gradient_unflipped(self):
        # the head's own weights must descend on the domain loss
        model = micro_model(adv_mode=ADV_WHOLE, alpha=1.0, seed=13)
        probs = model.classify_domain(model.extract_features(micro_input(seed=13)))
        ad.backward(domain_bce(probs, np.array([1.0, 1.0])))
        w = model.param("domain.out.w")
        step = w.data - 1e-3 * w.grad
        assert np.linalg.norm(step - w.data) > 0


class TestSeeding:

    def test_same_seed_reproduces_parameters(self):
        a = micro_model(seed=21)
        b = micro_model(seed=21)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_adding_domain_head_never_shifts_other_components(self):
        plain = micro_model(adv_mode=ADV_NONE, seed=22)
        adv = micro_model(adv_mode=ADV_TIME, seed=22)
        for name, p in plain._params.items():
            np.testing.assert_array_equal(p.data, adv.param(name).data)

    def test_labelers_start_different(self):
        model = micro_model(seed=23)
        wa, wb = model.labeler_frame_weights()
        assert not np.array_equal(wa.data, wb.data)

    def test_orthogonality_penalty_wires_to_labeler_weights(self):
        model = micro_model(seed=24)
        wa, wb = model.labeler_frame_weights()
        val = labeler_orthogonality(wa, wb)
        assert 0.0 <= val.item() <= 1.0


class TestFreqReversalTying:

    def test_reversed_bins_with_reversed_kernels_match(self):
        # reversing the mel axis, flipping every conv kernel's frequency
        # axis, and permuting the first GRU input weights accordingly must
        # reproduce the original features exactly
        model = micro_model(seed=25, cnn_blocks=[(2, 2), (3, 2)], n_mels=8)
        x = micro_input(n=1, t=4, n_mels=8, seed=25)
        base = model.extract_features(x).data

        mirrored = micro_model(seed=25, cnn_blocks=[(2, 2), (3, 2)], n_mels=8)
        for i in range(2):
            w = mirrored.param(f"conv{i}.w")
            w.data = w.data[:, :, :, ::-1].copy()
        f_out = mirrored.cfg.freq_out(8)
        c_out = mirrored.cfg.cnn_blocks[-1][0]
        perm = np.arange(c_out * f_out).reshape(c_out, f_out)[:, ::-1].reshape(-1)
        for direction in ("fwd", "bwd"):
            w = mirrored.param(f"gru0.{direction}.w_ih")
            w.data = w.data[:, perm].copy()
        got = mirrored.extract_features(x[:, :, ::-1].copy()).data
        np.testing.assert_allclose(got, base, rtol=1e-10, atol=1e-12)


class TestPersistence:

    def test_round_trip_preserves_predictions(self, tmp_path):
        model = micro_model(adv_mode=ADV_TIME, seed=31, dtype=np.float32)
        model.norm_mean = np.arange(4, dtype=np.float32)
        model.norm_std = np.full(4, 2.0, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        model.save(path)
        back = SedModel.load(path, model.cfg, n_mels=4)
        x = micro_input(seed=31).astype(np.float32)
        np.testing.assert_array_equal(back.norm_mean, model.norm_mean)
        a = model.predict(x[0], frame_hop_s=0.1)
        b = back.predict(x[0], frame_hop_s=0.1)
        np.testing.assert_array_equal(a.frame_probs, b.frame_probs)
        np.testing.assert_array_equal(a.clip_probs, b.clip_probs)

    def test_config_mismatch_rejected(self, tmp_path):
        model = micro_model(seed=32, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        model.save(path)
        bigger = ModelConfig(**{**MICRO, "gru_hidden": 5})
        with pytest.raises(CheckpointError):
            SedModel.load(path, bigger, n_mels=4)

    def test_adv_mode_mismatch_rejected(self, tmp_path):
        model = micro_model(adv_mode=ADV_NONE, seed=33, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        model.save(path)
        cfg = ModelConfig(**MICRO, adv_mode=ADV_TIME)
        with pytest.raises(CheckpointError):
            SedModel.load(path, cfg, n_mels=4)

    def test_missing_norm_stats_rejected(self, tmp_path):
        from sedtriadv.checkpoint import save_checkpoint
        model = micro_model(seed=34, dtype=np.float32)
        arrays = {n: p.data for n, p in model._params.items()}
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, arrays)
        with pytest.raises(CheckpointError):
            SedModel.load(path, model.cfg, n_mels=4)


class TestConfig:

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"n_classes": 2, "hidden": 4})

    def test_dict_round_trip(self):
        cfg = ModelConfig(**MICRO, adv_mode=ADV_WHOLE, alpha=0.5)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_negative_alpha_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(alpha=-1.0)

    def test_zero_gru_layers_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(gru_layers=0)


class TestFullModelGradient:
    """Finite differences measure true gradients, so the expected value for
    extractor parameters is FD(classification) - alpha * FD(domain): the
    reversal op flips only the domain term's path into the extractor.
    All other parameters must match the plain FD sum."""

    ALPHA = 0.8

    def _setup(self):
        model = micro_model(adv_mode=ADV_TIME, alpha=self.ALPHA, seed=41)
        x = micro_input(n=2, t=4, seed=41)
        fy = np.zeros((2, 4, 2))
        fy[0, 1:3, 0] = 1.0
        fy[1, 0:2, 1] = 1.0
        labels = LabelTensor(fy.max(axis=1), fy)
        dlab = np.array([1.0, 0.0])

        def classification_loss():
            feats = model.extract_features(x)
            loss = None
            for head in HEADS:
                frame, clip = model.classify_head(feats, head)
                term = total_classification_loss(clip, frame, labels)
                loss = term if loss is None else loss + term
            wa, wb = model.labeler_frame_weights()
            return loss + labeler_orthogonality(wa, wb)

        def domain_loss():
            feats = model.extract_features(x)
            return domain_bce(model.classify_domain(feats), dlab)

        return model, classification_loss, domain_loss

    def test_joint_loss_gradients_match_finite_differences(self):
        model, cls_loss, dom_loss = self._setup()
        ad.backward(cls_loss() + dom_loss())
        grads = {n: p.grad.copy() for n, p in model._params.items()}
        for p in model.parameters():
            p.zero_grad()

        feature_names = {p.name for p in model.feature_parameters()}
        eps = 1e-5
        rng = np.random.default_rng(42)
        worst = 0.0
        for name, p in model._params.items():
            # probe a few entries per parameter; full enumeration is slow
            flat = p.data.reshape(-1)
            probe = rng.choice(flat.size, size=min(4, flat.size), replace=False)
            for idx in probe:
                orig = flat[idx]
                vals = []
                for s in (eps, -eps):
                    flat[idx] = orig + s
                    with ad.no_grad():
                        vals.append((cls_loss().item(), dom_loss().item()))
                flat[idx] = orig
                fd_cls = (vals[0][0] - vals[1][0]) / (2 * eps)
                fd_dom = (vals[0][1] - vals[1][1]) / (2 * eps)
                if name in feature_names:
                    num = fd_cls - self.ALPHA * fd_dom
                else:
                    num = fd_cls + fd_dom
                ana = grads[name].reshape(-1)[idx]
                denom = max(abs(num), abs(ana), 1e-6)
                worst = max(worst, abs(num - ana) / denom)
        assert worst <= 1e-3, f"worst rel err {worst:.3e}"
