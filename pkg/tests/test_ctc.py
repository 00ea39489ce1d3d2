import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsnet import tensor as T
from tsnet.ctc import (
    InfeasibleError,
    collapse,
    ctc_brute_force,
    ctc_lattice,
    ctc_loss,
    ctc_loss_batch,
    ctc_mean_loss,
    greedy_decode,
    required_frames,
)
from tsnet.tensor import Tensor


def log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def random_instance(rng, t_max=6, k_max=4, l_max=3):
    t = int(rng.integers(1, t_max + 1))
    k = int(rng.integers(2, k_max + 1))
    n = int(rng.integers(0, l_max + 1))
    label = [int(c) for c in rng.integers(1, k, n)]
    return log_softmax(rng.standard_normal((t, k)) * 2), label


class TestCtcLoss:
    def test_single_frame(self):
        lp = np.log(np.array([[0.4, 0.6]]))
        loss, _ = ctc_loss(lp, [1])
        assert loss == pytest.approx(-math.log(0.6), abs=1e-12)

    def test_two_frames_uniform(self):
        lp = np.log(np.full((2, 2), 0.5))
        loss, _ = ctc_loss(lp, [1])
        assert loss == pytest.approx(-math.log(0.75), abs=1e-12)

    def test_repeat_needs_separator(self):
        assert required_frames([1, 1]) == 3
        with pytest.raises(InfeasibleError):
            ctc_loss(np.log(np.full((2, 2), 0.5)), [1, 1])

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ctc_loss(np.zeros((3, 3)), [3])

    def test_empty_label_is_all_blank(self):
        lp = log_softmax(np.random.default_rng(0).standard_normal((4, 3)))
        loss, _ = ctc_loss(lp, [])
        assert loss == pytest.approx(-lp[:, 0].sum(), abs=1e-12)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            lp, label = random_instance(rng)
            try:
                want = ctc_brute_force(lp, label)
            except InfeasibleError:
                with pytest.raises(InfeasibleError):
                    ctc_loss(lp, label)
                continue
            got, _ = ctc_loss(lp, label)
            assert abs(got - want) < 1e-9

    def test_forward_and_backward_tables_agree(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            lp, label = random_instance(rng, t_max=12, k_max=5, l_max=4)
            if required_frames(label) > lp.shape[0]:
                continue
            lat = ctc_lattice(lp, label)
            assert abs(lat.log_likelihood - lat.log_likelihood_backward()) < 1e-9

    def test_long_sequence_does_not_underflow(self):
        rng = np.random.default_rng(3)
        lp = log_softmax(rng.standard_normal((400, 6)))
        loss, grad = ctc_loss(lp, list(rng.integers(1, 6, 60)))
        assert np.isfinite(loss) and np.all(np.isfinite(grad))

    def test_batch_equals_single(self):
        rng = np.random.default_rng(4)
        lps = log_softmax(rng.standard_normal((3, 7, 4)))
        labels = [[1, 2], [3], [2, 2, 1]]
        losses, grads = ctc_loss_batch(lps, labels)
        for i in range(3):
            loss, grad = ctc_loss(lps[i], labels[i])
            assert losses[i] == pytest.approx(loss, abs=1e-12)
            np.testing.assert_allclose(grads[i], grad, atol=1e-12)


class TestCtcGradient:
    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            lp, label = random_instance(rng, t_max=6, k_max=4, l_max=2)
            if required_frames(label) > lp.shape[0]:
                continue
            _, grad = ctc_loss(lp, label)
            h = 1e-6
            num = np.zeros_like(lp)
            for idx in np.ndindex(lp.shape):
                up, dn = lp.copy(), lp.copy()
                up[idx] += h
                dn[idx] -= h
                num[idx] = (ctc_loss(up, label)[0] - ctc_loss(dn, label)[0]) / (2 * h)
            np.testing.assert_allclose(grad, num, atol=1e-7)

    def test_simplex_tangency_through_log_softmax(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((2, 8, 5)), requires_grad=True)
        T.backward(ctc_mean_loss(T.log_softmax(x, axis=-1), [[1, 2, 3], [4, 4]]))
        np.testing.assert_allclose(x.grad.sum(axis=-1), 0.0, atol=1e-8)

    def test_permutation_covariance(self):
        rng = np.random.default_rng(7)
        lp = log_softmax(rng.standard_normal((6, 4)))
        label = [1, 3, 2]
        perm = np.array([0, 2, 3, 1])  # blank fixed
        moved = np.empty_like(lp)
        moved[:, perm] = lp
        assert ctc_loss(moved, [int(perm[c]) for c in label])[0] == ctc_loss(lp, label)[0]


class TestBruteForce:
    def test_guard(self):
        with pytest.raises(ValueError):
            ctc_brute_force(np.zeros((20, 4)), [1])

    def test_partition_sums_to_one(self):
        rng = np.random.default_rng(8)
        t, k = 4, 3
        lp = log_softmax(rng.standard_normal((t, k)))
        outputs = {tuple(collapse(p)) for p in itertools.product(range(k), repeat=t)}
        total = sum(math.exp(-ctc_brute_force(lp, list(o))) for o in outputs)
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_zero_paths_is_infeasible(self):
        with pytest.raises(InfeasibleError):
            ctc_brute_force(np.zeros((2, 2)), [1, 1])


class TestGreedyDecode:
    @staticmethod
    def frames(path, k=3):
        lp = np.full((len(path), k), -5.0)
        lp[np.arange(len(path)), path] = 0.0
        return lp

    def test_collapse_rule(self):
        assert greedy_decode(self.frames([1, 1, 0, 1])) == [1, 1]

    def test_all_blank(self):
        assert greedy_decode(self.frames([0, 0, 0])) == []

    def test_alternating(self):
        assert greedy_decode(self.frames([1, 0, 1, 0])) == [1, 1]

    def test_tie_goes_to_lower_index(self):
        assert greedy_decode(np.zeros((2, 3))) == []


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dp_equals_enumeration_property(seed):
    lp, label = random_instance(np.random.default_rng(seed), t_max=5, k_max=3, l_max=3)
    try:
        want = ctc_brute_force(lp, label)
    except InfeasibleError:
        return
    assert abs(ctc_loss(lp, label)[0] - want) < 1e-9
