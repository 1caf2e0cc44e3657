import csv
import math

import numpy as np
import pytest

from pvda import autodiff as ad
from pvda.errors import ConfigError, UsageError
from pvda.filtration import (
    ClassWeights,
    gamma_pada,
    gamma_patan,
    normalize,
    outlier_ratio,
    update_schedule,
    write_gamma_csv,
)
from pvda.model import ForwardOutput


def fake_output(y_sp, y_t, y_r, w_r):
    """A forward output with hand-set probabilities; logits nodes are placeholders."""
    y_sp = np.atleast_2d(np.asarray(y_sp, dtype=float))
    n, c = y_sp.shape
    dummy = ad.constant(np.zeros((n, c)))
    out = ForwardOutput(
        x=ad.constant(np.zeros((n, 1))),
        sp_logits=dummy,
        f_r={r: dummy for r in y_r},
        aux_logits={r: dummy for r in y_r},
        w_r={r: np.atleast_1d(np.asarray(w, dtype=float)) for r, w in w_r.items()},
        f=dummy,
        t_logits=dummy,
        spd_logits=dummy,
        td_logits=dummy,
    )
    out.y_sp = y_sp
    out.y_t = np.atleast_2d(np.asarray(y_t, dtype=float))
    out.y_r = {r: np.atleast_2d(np.asarray(p, dtype=float)) for r, p in y_r.items()}
    return out


class TestPada:
    def test_single_one_hot(self):
        g = gamma_pada([[0, 0, 0, 1.0, 0]]).gamma
        np.testing.assert_array_equal(g, [0, 0, 0, 1, 0])

    def test_uniform_gives_ones(self):
        np.testing.assert_array_equal(gamma_pada(np.full((4, 3), 1 / 3)).gamma, 1.0)

    def test_hand_arithmetic(self):
        g = gamma_pada([[0.8, 0.2, 0.0], [0.6, 0.4, 0.0]]).gamma
        np.testing.assert_allclose(g, [1.0, 0.3 / 0.7, 0.0], atol=1e-15)
        assert g[1] == pytest.approx(0.4286, abs=5e-5)

    def test_empty_rejected(self):
        with pytest.raises(UsageError):
            gamma_pada([])


class TestPatan:
    def test_two_frame_one_hot(self):
        onehot = [1.0, 0.0, 0.0]
        out = fake_output([onehot], [onehot], {2: [onehot]}, {2: [math.tanh(1)]})
        # before normalization: (1 + 1 + tanh 1) / 3 in class 0, zero elsewhere
        assert (2 + math.tanh(1)) / 3 == pytest.approx(0.9205, abs=5e-5)
        np.testing.assert_array_equal(gamma_patan([out]).gamma, [1.0, 0.0, 0.0])

    def test_unnormalized_average_by_hand(self):
        # k = 3: spatial [.5,.5], temporal [1,0], scale 2 weight .5 on [0,1], scale 3 weight 0
        out = fake_output([[0.5, 0.5]], [[1.0, 0.0]], {2: [[0.0, 1.0]], 3: [[1.0, 0.0]]}, {2: [0.5], 3: [0.0]})
        raw = np.array([1.5, 1.0]) / 4
        np.testing.assert_allclose(gamma_patan([out]).gamma, raw / raw.max(), atol=1e-15)

    def test_zero_weights_match_head_average_argmax(self):
        rng = np.random.default_rng(0)
        outs = []
        heads = np.zeros(5)
        for _ in range(4):
            y_sp, y_t = rng.dirichlet(np.ones(5), 3), rng.dirichlet(np.ones(5), 3)
            heads += (y_sp + y_t).sum(axis=0)
            y_r = {r: rng.dirichlet(np.ones(5), 3) for r in (2, 3)}
            outs.append(fake_output(y_sp, y_t, y_r, {2: np.zeros(3), 3: np.zeros(3)}))
        g = gamma_patan(outs).gamma
        assert np.argmax(g) == np.argmax(heads)
        np.testing.assert_allclose(g, heads / heads.max(), atol=1e-14)

    def test_uniform_gives_ones(self):
        u = np.full((2, 4), 0.25)
        out = fake_output(u, u, {2: u, 3: u}, {2: [0.3, 0.1], 3: [0.0, 0.7]})
        np.testing.assert_allclose(gamma_patan([out]).gamma, 1.0, atol=1e-15)

    def test_without_local_weights_divides_by_two(self):
        out = fake_output([[0.2, 0.8]], [[0.6, 0.4]], {2: [[1.0, 0.0]]}, {2: [0.7]})
        np.testing.assert_allclose(gamma_patan([out], use_local=False).gamma, [0.8 / 1.2, 1.0])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        outs = [
            fake_output(rng.dirichlet(np.ones(3), 1), rng.dirichlet(np.ones(3), 1),
                        {2: rng.dirichlet(np.ones(3), 1)}, {2: rng.uniform(0, 0.76, 1)})
            for _ in range(6)
        ]
        a = gamma_patan(outs).gamma
        b = gamma_patan(outs[::-1]).gamma
        np.testing.assert_allclose(a, b, rtol=1e-14)

    def test_mixed_frame_counts_rejected(self):
        u = [[0.5, 0.5]]
        a = fake_output(u, u, {2: u}, {2: [1.0]})
        b = fake_output(u, u, {2: u, 3: u}, {2: [1.0], 3: [1.0]})
        with pytest.raises(ConfigError):
            gamma_patan([a, b])

    def test_empty_rejected(self):
        with pytest.raises(UsageError):
            gamma_patan([])


class TestNormalizeAndSchedule:
    def test_scale_invariance_and_idempotence(self):
        g = np.array([0.2, 0.7, 0.1])
        np.testing.assert_allclose(normalize(3.5 * g), normalize(g), rtol=1e-15)
        np.testing.assert_array_equal(normalize(normalize(g)), normalize(g))

    def test_all_zero_falls_back_to_ones(self):
        np.testing.assert_array_equal(normalize(np.zeros(3)), 1.0)

    def test_epoch_zero_is_ones(self):
        called = []
        w = update_schedule(0, 4, lambda: called.append(1))
        np.testing.assert_array_equal(w.gamma, 1.0)
        assert not called and w.epoch_computed == 0

    def test_later_epochs_recompute(self):
        w = update_schedule(3, 3, lambda: gamma_pada(np.full((2, 3), 1 / 3)))
        np.testing.assert_array_equal(w.gamma, 1.0)
        assert w.epoch_computed == 3

    def test_negative_epoch(self):
        with pytest.raises(UsageError):
            update_schedule(-1, 3)

    def test_weights_are_read_only(self):
        w = ClassWeights.ones(3)
        with pytest.raises(ValueError):
            w.gamma[0] = 0.5
        np.testing.assert_array_equal(w.lookup([2, 0, 2]), [1.0, 1.0, 1.0])


class TestExport:
    def test_ratio_examples(self):
        assert outlier_ratio([1, 1, 0, 0], 2) == 0.0
        assert outlier_ratio([1, 1, 1], 3) is None
        assert outlier_ratio([1.0, 0.5, 0.25, 0.25], 2) == pytest.approx(0.25 / 0.75)

    def test_csv_rows_and_summary(self, tmp_path):
        path = tmp_path / "g.csv"
        write_gamma_csv(ClassWeights([1.0, 1.0, 0.0, 0.0]), ["a", "b", "c", "d"], 2, path, summary=True)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["class_index", "class_name", "weight", "is_target_class"]
        assert rows[1:5] == [["0", "a", "1", "1"], ["1", "b", "1", "1"], ["2", "c", "0", "0"], ["3", "d", "0", "0"]]
        assert rows[5] == []
        assert rows[6] == ["shared_mean", "outlier_mean", "ratio"]
        assert rows[7] == ["1", "0", "0"]

    def test_equal_label_space_leaves_ratio_empty(self, tmp_path):
        path = tmp_path / "g.csv"
        write_gamma_csv(np.ones(3), ["a", "b", "c"], 3, path, summary=True)
        assert list(csv.reader(open(path)))[-1] == ["1", "", ""]

    def test_full_precision(self, tmp_path):
        path = tmp_path / "g.csv"
        value = 1 / 3
        write_gamma_csv([1.0, value], ["a", "b"], 1, path)
        assert float(list(csv.reader(open(path)))[2][2]) == value
