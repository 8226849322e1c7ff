import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipmem.errors import ContractViolation, ShapeError
from clipmem.numerics import layer_norm, masked_softmax, matmul, seeded_rng


def oracle_matmul(a, b):
    """Naive triple loop, fixed row-major ascending-k accumulation."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def oracle_softmax(logits, allowed):
    """Row-wise exp/sum over the allowed set in extended precision."""
    import mpmath

    mpmath.mp.dps = 50
    out = np.zeros_like(logits)
    for i in range(logits.shape[0]):
        cols = [j for j in range(logits.shape[1]) if allowed[i, j]]
        exps = [mpmath.exp(mpmath.mpf(logits[i, j])) for j in cols]
        total = mpmath.fsum(exps)
        for j, e in zip(cols, exps):
            out[i, j] = float(e / total)
    return out


class TestMatmul:
    def test_identity(self):
        out = matmul(np.eye(2), [[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(out, [[3.0, 4.0], [5.0, 6.0]])

    def test_hand_case(self):
        assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).item() == pytest.approx(11.0)

    def test_against_triple_loop(self):
        rng = seeded_rng(11)
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((4, 3))
        assert np.max(np.abs(matmul(a, b) - oracle_matmul(a, b))) < 1e-12

    def test_associativity(self):
        rng = seeded_rng(12)
        for _ in range(10):
            a, b, c = (rng.standard_normal((4, 4)) for _ in range(3))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.max(np.abs(left - right)) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ContractViolation):
            matmul(np.array([[np.nan, 1.0]]), np.ones((2, 1)))

    def test_deterministic(self):
        rng = seeded_rng(13)
        a = rng.standard_normal((8, 8))
        b = rng.standard_normal((8, 8))
        first = matmul(a, b)
        assert np.array_equal(first, matmul(a, b))


class TestMaskedSoftmax:
    def test_symmetric_row_with_masked_tail(self):
        logits = np.array([[0.0, 0.0, 5.0]])
        allowed = np.array([[True, True, False]])
        assert masked_softmax(logits, allowed).tolist() == [[0.5, 0.5, 0.0]]

    def test_hand_two_entry_row(self):
        out = masked_softmax(np.array([[np.log(2.0), 0.0]]), np.ones((1, 2), dtype=bool))
        assert out[0] == pytest.approx([2 / 3, 1 / 3], abs=1e-15)

    def test_against_extended_precision_oracle(self):
        rng = seeded_rng(21)
        logits = rng.standard_normal((6, 6)) * 3
        allowed = rng.random((6, 6)) < 0.5
        allowed[np.arange(6), np.arange(6)] = True  # diagonal kept
        out = masked_softmax(logits, allowed)
        assert np.max(np.abs(out - oracle_softmax(logits, allowed))) < 1e-12

    def test_rows_sum_to_one_and_zeros_exact(self):
        rng = seeded_rng(22)
        for _ in range(20):
            n = int(rng.integers(2, 9))
            logits = rng.standard_normal((n, n)) * 10
            allowed = rng.random((n, n)) < 0.4
            allowed[np.arange(n), np.arange(n)] = True
            out = masked_softmax(logits, allowed)
            assert np.all(out[~allowed] == 0.0)
            assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-12

    def test_fully_masked_row_raises(self):
        with pytest.raises(ContractViolation):
            masked_softmax(np.zeros((2, 2)), np.array([[True, False], [False, False]]))

    def test_huge_masked_logits_do_not_leak(self):
        logits = np.array([[0.0, 800.0], [0.0, 0.0]])
        allowed = np.array([[True, False], [True, True]])
        out = masked_softmax(logits, allowed)
        assert out[0, 0] == 1.0 and out[0, 1] == 0.0


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = layer_norm(np.full((1, 4), 3.5), np.ones(4), np.zeros(4), eps=1e-6)
        assert np.max(np.abs(out)) < 1e-6

    def test_hand_row(self):
        out = layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-14)
        assert out[0] == pytest.approx([-1.0, 1.0], abs=1e-7)

    def test_random_rows_standardised(self):
        rng = seeded_rng(31)
        x = rng.standard_normal((4, 8)) * 5 + 2
        out = layer_norm(x, np.ones(8), np.zeros(8), eps=1e-12)
        assert np.max(np.abs(out.mean(axis=1))) < 1e-10
        assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-8

    def test_affine_applied_after_standardisation(self):
        x = np.array([[1.0, 3.0]])
        out = layer_norm(x, np.array([2.0, 2.0]), np.array([1.0, -1.0]), eps=1e-14)
        assert out[0] == pytest.approx([-1.0, 1.0], abs=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = seeded_rng(0).random(100)
        b = seeded_rng(0).random(100)
        assert np.array_equal(a, b)

    def test_recorded_first_draws(self):
        # Values recorded from PCG64; pins the generator choice.
        assert seeded_rng(0).random() == 0.6369616873214543
        assert seeded_rng(1).random() == 0.5118216247002567

    def test_uniform_mean(self):
        draws = seeded_rng(7).random(100_000)
        assert 0.49 < draws.mean() < 0.51


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=7),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_masked_softmax_row_stochastic_property(n, seed):
    rng = seeded_rng(seed)
    logits = rng.standard_normal((n, n)) * 4
    allowed = rng.random((n, n)) < 0.5
    allowed[np.arange(n), np.arange(n)] = True
    out = masked_softmax(logits, allowed)
    assert np.all(out[~allowed] == 0.0)
    assert np.all(out[allowed] >= 0.0)
    assert out.sum(axis=1) == pytest.approx(np.ones(n), abs=1e-12)
