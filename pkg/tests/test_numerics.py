import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from muvo.exceptions import (DegenerateInputError, InvalidConfigError,
                             InvalidInputError)
from muvo.numerics import (cosine_similarity, ema_update, one_hot_argmax,
                           softmax)

finite_logits = st.lists(st.floats(-50, 50), min_size=2, max_size=8).map(
    lambda v: np.array(v))


class TestSoftmax:
    def test_uniform_logits(self):
        np.testing.assert_allclose(softmax(np.zeros(4)), np.full(4, 0.25))

    def test_two_class_value(self):
        # direct evaluation: e/(e+1), 1/(e+1)
        np.testing.assert_allclose(
            softmax(np.array([1.0, 0.0])),
            [0.7310585786300049, 0.2689414213699951], atol=1e-12)

    def test_stabilized_large_logits(self):
        out = softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one(self):
        out = softmax(np.random.default_rng(0).normal(size=(5, 7)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            softmax(np.array([np.nan, 0.0]))
        with pytest.raises(InvalidInputError):
            softmax(np.array([np.inf, 0.0]))

    @given(finite_logits, st.floats(-100, 100))
    @settings(max_examples=50)
    def test_shift_invariance(self, z, c):
        np.testing.assert_allclose(softmax(z + c), softmax(z), atol=1e-12)

    @given(finite_logits)
    @settings(max_examples=50)
    def test_argmax_preserved(self, z):
        # quantize so logit gaps either vanish exactly or survive the exp
        z = np.round(z, 3)
        assert np.argmax(one_hot_argmax(softmax(z))) == np.argmax(z)


class TestOneHotArgmax:
    def test_simple(self):
        np.testing.assert_array_equal(one_hot_argmax([0.1, 0.7, 0.2]),
                                      [0, 1, 0])

    def test_tie_lowest_index(self):
        np.testing.assert_array_equal(one_hot_argmax([0.5, 0.5]), [1, 0])

    def test_full_tie(self):
        np.testing.assert_array_equal(one_hot_argmax([0.25] * 4), [1, 0, 0, 0])

    def test_rejects_invalid_probs(self):
        with pytest.raises(InvalidInputError):
            one_hot_argmax([0.9, 0.9])


class TestCosineSimilarity:
    def test_identical_direction(self):
        assert cosine_similarity([3.0, 4.0], [3.0, 4.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)
        assert cosine_similarity([1, 1], [1, -1]) == pytest.approx(0.0)

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateInputError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.lists(st.floats(-10, 10), min_size=3, max_size=3))
    @settings(max_examples=50)
    def test_bounded(self, a, b):
        a, b = np.array(a), np.array(b)
        if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
            return
        assert -1.0 <= cosine_similarity(a, b) <= 1.0


class TestEmaUpdate:
    def test_single_step(self):
        assert ema_update(0.5, 0.9, 0.999) == pytest.approx(0.5004, abs=1e-12)

    def test_fixed_point(self):
        for lam in (0.0, 0.5, 0.999):
            assert ema_update(1.7, 1.7, lam) == pytest.approx(1.7)

    def test_no_memory(self):
        assert ema_update(0.0, 1.0, 0.0) == 1.0

    def test_elementwise(self):
        out = ema_update(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.9)
        np.testing.assert_allclose(out, [0.9, 0.1])

    def test_invalid_momentum(self):
        for lam in (-0.1, 1.0, 1.5):
            with pytest.raises(InvalidConfigError):
                ema_update(0.0, 1.0, lam)

    @given(st.floats(0, 1), st.floats(-5, 5), st.floats(-5, 5),
           st.integers(1, 200))
    @settings(max_examples=50)
    def test_closed_form_matches_loop_oracle(self, lam, old, target, steps):
        lam = min(lam, 0.9999)
        value = old
        for _ in range(steps):  # brute-force loop oracle
            value = ema_update(value, target, lam)
        closed = target + lam ** steps * (old - target)
        assert abs(value - closed) < 1e-9
