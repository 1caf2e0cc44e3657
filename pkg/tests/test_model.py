import itertools
import math

import numpy as np
import pytest

from pvda import autodiff as ad
from pvda.errors import ConfigError, InputError
from pvda.model import (
    ModelConfig,
    PatanModel,
    attention_weight,
    certainty,
    clip_subsets,
    forward,
    local_temporal_feature,
    overall_temporal_feature,
    predict_label,
    predict_labels,
)

TANH_1 = 0.7615941559557649


def tiny_model(**kw):
    cfg = dict(d_in=3, k=3, num_classes=4, d_sp=4, d_t=5, h_rel=6, h_disc=3, seed=11)
    cfg.update(kw)
    return PatanModel(ModelConfig(**cfg))


class TestClipSubsets:
    def test_all_pairs_of_four(self):
        assert clip_subsets(4, 2, cap=10) == [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]

    def test_full_length_clip(self):
        assert clip_subsets(3, 3) == [(1, 2, 3)]

    def test_capped_sample_is_stable_and_valid(self):
        first = clip_subsets(8, 4, cap=3, seed=5)
        assert first == clip_subsets(8, 4, cap=3, seed=5)
        universe = set(itertools.combinations(range(1, 9), 4))
        assert len(first) == 3 == len(set(first))
        assert all(t in universe for t in first)
        assert all(list(t) == sorted(t) for t in first)

    def test_cap_exactly_reached_enumerates(self):
        assert len(clip_subsets(6, 3, cap=20)) == 20

    @pytest.mark.parametrize("r", [1, 5])
    def test_scale_out_of_range(self, r):
        with pytest.raises(ConfigError):
            clip_subsets(4, r)


class TestAttention:
    def test_certainty_closed_forms(self):
        assert certainty([0, 0, 1.0]) == 0.0
        assert certainty([0.5, 0.5]) == pytest.approx(-math.log(2), abs=1e-12)
        assert certainty(np.full(14, 1 / 14)) == pytest.approx(-2.6391, abs=5e-5)

    def test_weight_closed_forms(self):
        assert attention_weight([1.0, 0.0, 0.0]) == pytest.approx(TANH_1, abs=1e-12)
        assert attention_weight([0.5, 0.5]) == pytest.approx(math.tanh(1 - math.log(2)), abs=1e-12)
        assert attention_weight(np.full(14, 1 / 14)) == 0.0

    def test_batched_rows(self):
        out = attention_weight(np.array([[1.0, 0.0], [0.5, 0.5]]))
        assert out.shape == (2,)
        assert out[0] == pytest.approx(TANH_1)

    def test_graph_weight_matches_numpy_helper(self):
        from pvda.model import _attention_node

        logits = np.array([[2.0, -1.0, 0.3], [0.0, 0.0, 0.0], [9.0, -9.0, 0.0]])
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        for track in (False, True):
            node = _attention_node(ad.constant(logits), track)
            np.testing.assert_allclose(node.values[:, 0], attention_weight(probs), atol=1e-12)


class TestTemporalFeatures:
    def test_zero_relation_module_gives_zero(self):
        model = tiny_model()
        for node in model.params.values():
            if node in (model.rel[2].out.weight, model.rel[2].out.bias):
                node.values[...] = 0.0
        f = local_temporal_feature(model, np.ones((3, 3)), 2)
        np.testing.assert_array_equal(f.values, 0.0)

    def test_summing_module_over_three_pairs(self):
        # g(concat(a, b)) = a + b for non-negative frames, so the three pairs
        # (1,2), (1,3), (2,3) sum to 2 * (x1 + x2 + x3).
        model = tiny_model(d_in=2, k=3, h_rel=2, d_t=2)
        rel = model.rel[2]
        rel.hidden.weight.values[...] = np.vstack([np.eye(2), np.eye(2)])
        rel.hidden.bias.values[...] = 0.0
        rel.out.weight.values[...] = np.eye(2)
        rel.out.bias.values[...] = 0.0
        frames = np.array([[0.1, 0.2], [0.3, 0.5], [0.7, 1.1]])
        f = local_temporal_feature(model, frames, 2)
        np.testing.assert_allclose(f.values, 2 * frames.sum(axis=0, keepdims=True), atol=1e-15)

    def test_single_clip_when_k_is_two(self):
        model = tiny_model(k=2)
        frames = np.random.default_rng(0).normal(size=(2, 3))
        rel = model.rel[2]
        x = frames.reshape(1, -1)
        h = np.maximum(0, x @ rel.hidden.weight.values + rel.hidden.bias.values)
        expected = h @ rel.out.weight.values + rel.out.bias.values
        np.testing.assert_allclose(local_temporal_feature(model, frames, 2).values, expected, atol=1e-14)

    def test_weighted_sum_example(self):
        f_r = {2: ad.constant([[1.0, 0.0]]), 3: ad.constant([[0.0, 2.0]])}
        w_r = {2: ad.constant([[1.0]]), 3: ad.constant([[0.5]])}
        np.testing.assert_array_equal(overall_temporal_feature(f_r, w_r).values, [[1.0, 1.0]])

    def test_zero_weights_zero_feature(self):
        f_r = {2: ad.constant([[3.0, -1.0]]), 3: ad.constant([[0.5, 2.0]])}
        w_r = {r: ad.constant([[0.0]]) for r in f_r}
        np.testing.assert_array_equal(overall_temporal_feature(f_r, w_r).values, 0.0)

    def test_dimension_mismatch(self):
        f_r = {2: ad.constant([[1.0, 0.0]]), 3: ad.constant([[0.0, 2.0, 1.0]])}
        w_r = {r: ad.constant([[1.0]]) for r in f_r}
        with pytest.raises(ConfigError):
            overall_temporal_feature(f_r, w_r)


class TestForward:
    def test_zero_classifiers_give_uniform_probabilities(self):
        model = tiny_model()
        for name, node in model.params.items():
            if name.split(".")[0] in ("spy", "ty", "aux2", "aux3"):
                node.values[...] = 0.0
        out = forward(model, np.random.default_rng(1).normal(size=(2, 3, 3)))
        for probs in [out.y_sp, out.y_t, *out.y_r.values()]:
            np.testing.assert_allclose(probs, 0.25, atol=1e-15)
        # uniform over 4 classes: entropy ln 4 > 1 nat, so the weight clamps to zero
        for w in out.w_r.values():
            np.testing.assert_array_equal(w, 0.0)

    def test_reversal_coefficient_does_not_change_values(self):
        model = tiny_model()
        frames = np.random.default_rng(2).normal(size=(3, 3, 3))
        a, b = forward(model, frames, 0.0), forward(model, frames, 1.0)
        for name in ("sp_logits", "t_logits", "spd_logits", "td_logits", "f", "x"):
            assert np.array_equal(getattr(a, name).values, getattr(b, name).values)

    def test_hand_built_two_frame_model(self):
        model = tiny_model(d_in=2, k=2, num_classes=2, d_t=2, h_rel=2)
        rel, aux, ty = model.rel[2], model.aux[2], model.ty
        rel.hidden.weight.values[...] = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, -1.0]]
        rel.hidden.bias.values[...] = [[0.0, 0.5]]
        rel.out.weight.values[...] = [[2.0, 0.0], [0.0, 1.0]]
        rel.out.bias.values[...] = [[0.0, 0.0]]
        aux.weight.values[...] = 0.0
        aux.bias.values[...] = 0.0
        ty.weight.values[...] = [[1.0, -1.0], [0.5, 0.0]]
        ty.bias.values[...] = [[0.0, 0.25]]
        frames = np.array([[0.2, 0.4], [0.1, 0.1]])
        # hidden = relu([0.2 + 0.1, 0.4 - 0.1 + 0.5]) = [0.3, 0.8]; g = [0.6, 0.8]
        # aux is uniform over 2 classes, so w = tanh(1 - ln 2)
        w = math.tanh(1 - math.log(2))
        f = np.array([0.6 * w, 0.8 * w])
        logits = np.array([f[0] + 0.5 * f[1], -f[0] + 0.25])
        expected = np.exp(logits) / np.exp(logits).sum()
        out = forward(model, frames)
        np.testing.assert_allclose(out.w_r[2], [w], atol=1e-15)
        np.testing.assert_allclose(out.y_t[0], expected, atol=1e-14)

    def test_attentive_off_uses_unit_weights(self):
        model = tiny_model()
        frames = np.random.default_rng(3).normal(size=(2, 3, 3))
        out = forward(model, frames, attentive=False)
        for w in out.w_r.values():
            np.testing.assert_array_equal(w, 1.0)
        total = out.f_r[2].values + out.f_r[3].values
        np.testing.assert_allclose(out.f.values, total, atol=1e-15)

    def test_probabilities_and_weights_in_range(self):
        model = tiny_model(k=4)
        out = forward(model, np.random.default_rng(4).normal(size=(5, 4, 3)) * 3)
        for probs in [out.y_sp, out.y_t, *out.y_r.values()]:
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        for w in out.w_r.values():
            assert np.all((w >= 0) & (w <= TANH_1))
        assert len(out.y_r) == out.k - 1 == 3

    def test_repeat_is_bit_identical(self):
        model = tiny_model()
        frames = np.random.default_rng(5).normal(size=(2, 3, 3))
        a, b = forward(model, frames), forward(model, frames)
        assert np.array_equal(a.y_t, b.y_t) and np.array_equal(a.y_sp, b.y_sp)
        assert all(np.array_equal(a.w_r[r], b.w_r[r]) for r in a.w_r)

    def test_single_video_matches_batch_row(self):
        model = tiny_model()
        frames = np.random.default_rng(6).normal(size=(3, 3, 3))
        batch = forward(model, frames)
        single = forward(model, frames[1])
        np.testing.assert_allclose(single.y_t[0], batch.y_t[1], atol=1e-14)

    def test_frame_count_mismatch(self):
        with pytest.raises(InputError):
            forward(tiny_model(), np.zeros((2, 4, 3)))
        with pytest.raises(InputError):
            forward(tiny_model(), np.zeros((2, 3, 2)))

    def test_stop_grad_attention_blocks_aux_gradient_from_target_head(self):
        frames = np.random.default_rng(7).normal(size=(2, 3, 3))
        for stop, expect_zero in ((True, True), (False, False)):
            model = tiny_model(stop_grad_attention=stop)
            ad.backward(ad.op_mean(forward(model, frames).t_logits))
            grad = model.params["aux2.w"].grad
            assert np.all(grad == 0) == expect_zero


class TestPrediction:
    def _out(self, y_sp, y_t):
        model = tiny_model(num_classes=len(y_sp))
        out = forward(model, np.zeros((1, 3, 3)))
        out.y_sp = np.array([y_sp])
        out.y_t = np.array([y_t])
        return out

    def test_agreeing_heads(self):
        assert predict_label(self._out([0, 0, 1.0, 0], [0, 0, 1.0, 0])) == 2

    def test_fused_mean(self):
        assert predict_label(self._out([0.6, 0.4], [0.2, 0.8])) == 1

    def test_tie_goes_low(self):
        assert predict_label(self._out([0.5, 0.5], [0.5, 0.5])) == 0

    def test_single_label_needs_one_row(self):
        out = forward(tiny_model(), np.zeros((2, 3, 3)))
        assert predict_labels(out).shape == (2,)
        with pytest.raises(InputError):
            predict_label(out)


class TestInitAndPersistence:
    def test_seeded_initialization(self):
        a, b, c = tiny_model(seed=1), tiny_model(seed=1), tiny_model(seed=2)
        assert all(np.array_equal(a.params[n].values, b.params[n].values) for n in a.params)
        assert not np.array_equal(a.params["spf.0.w"].values, c.params["spf.0.w"].values)

    def test_glorot_bounds_and_zero_bias(self):
        model = tiny_model()
        for name, node in model.params.items():
            if name.endswith(".b"):
                assert np.all(node.values == 0)
            else:
                fan_in, fan_out = node.shape
                assert np.abs(node.values).max() <= math.sqrt(6 / (fan_in + fan_out))

    def test_shapes_follow_config(self):
        m = tiny_model(k=4)
        assert m.params["rel3.0.w"].shape == (9, 6)
        assert m.params["rel4.1.w"].shape == (6, 5)
        assert m.params["spd.1.w"].shape == (3, 2)
        assert m.params["aux4.w"].shape == (5, 4)

    def test_save_load_round_trip(self, tmp_path):
        model = tiny_model()
        model.save(tmp_path / "m.npz")
        back = PatanModel.load(tmp_path / "m.npz")
        assert back.config == model.config
        assert all(np.array_equal(back.params[n].values, model.params[n].values) for n in model.params)

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            PatanModel.load(tmp_path / "absent.npz")

    @pytest.mark.parametrize("kw", [dict(k=1), dict(num_classes=1), dict(d_t=0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            tiny_model(**kw)
