import math

import numpy as np
import pytest

from mixnas import attention as A
from mixnas import tensor as T
from util import finite_difference_grad, max_rel_error


def rng(seed=0):
    return np.random.default_rng(seed)


def softmax_attention_oracle(q, k, v, causal=False):
    """Explicit double-loop exp/normalize reference."""
    n_q, d = q.shape
    out = np.zeros((n_q, v.shape[1]))
    for i in range(n_q):
        scores = []
        for j in range(k.shape[0]):
            if causal and j > i:
                scores.append(None)
            else:
                scores.append(float(q[i] @ k[j]) / math.sqrt(d))
        mx = max(s for s in scores if s is not None)
        ws = np.array([0.0 if s is None else math.exp(s - mx) for s in scores])
        out[i] = (ws / ws.sum()) @ v
    return out


class TestSoftmaxAttention:
    def test_single_position_returns_value_row(self):
        r = rng(1)
        q, k, v = (T.tensor(r.standard_normal((1, 4))) for _ in range(3))
        out = A.softmax_attention(q, k, v)
        np.testing.assert_allclose(out.data, v.data, atol=1e-15)

    def test_identical_keys_give_mean_of_values(self):
        r = rng(2)
        k_row = r.standard_normal(4)
        k = T.tensor(np.tile(k_row, (6, 1)))
        q = T.tensor(r.standard_normal((3, 4)))
        v = T.tensor(r.standard_normal((6, 4)))
        out = A.softmax_attention(q, k, v)
        mean = v.data.mean(axis=0)
        for i in range(3):
            np.testing.assert_allclose(out.data[i], mean, atol=1e-12)

    def test_matches_quadratic_oracle(self):
        r = rng(3)
        q = T.tensor(r.standard_normal((6, 4)))
        k = T.tensor(r.standard_normal((6, 4)))
        v = T.tensor(r.standard_normal((6, 4)))
        out = A.softmax_attention(q, k, v)
        ref = softmax_attention_oracle(q.data, k.data, v.data)
        assert np.abs(out.data - ref).max() < 1e-10

    def test_causal_rows_sum_to_one_and_match_oracle(self):
        r = rng(4)
        q, k, v = (T.tensor(r.standard_normal((7, 4))) for _ in range(3))
        out = A.softmax_attention(q, k, v, causal=True)
        ref = softmax_attention_oracle(q.data, k.data, v.data, causal=True)
        assert np.abs(out.data - ref).max() < 1e-10


class TestLinearAttention:
    def test_single_position_nonnegative_inputs(self):
        r = rng(5)
        q = T.tensor(np.abs(r.standard_normal((1, 4))) + 0.1)
        k = T.tensor(np.abs(r.standard_normal((1, 4))) + 0.1)
        v = T.tensor(r.standard_normal((1, 4)))
        res = A.linear_attention(q, k, v)
        assert not res.degenerate
        # equal up to the eps stabilizer in the normalizer
        np.testing.assert_allclose(res.output.data, v.data, rtol=1e-5)

    def test_all_negative_queries_degenerate(self):
        r = rng(6)
        q = T.tensor(-np.abs(r.standard_normal((3, 4))) - 0.1)
        k = T.tensor(r.standard_normal((3, 4)))
        v = T.tensor(r.standard_normal((3, 4)))
        res = A.linear_attention(q, k, v)
        assert res.degenerate
        np.testing.assert_array_equal(res.output.data, np.zeros((3, 4)))

    def test_matches_associativity_oracle(self):
        r = rng(7)
        q, k, v = (T.tensor(r.standard_normal((16, 8))) for _ in range(3))
        res = A.linear_attention(q, k, v)
        ref = A.quadratic_linear_attention_reference(q.data, k.data, v.data)
        assert np.abs(res.output.data - ref).max() < 1e-8


class TestCosformerAttention:
    def test_single_position_positive_weight(self):
        q = T.tensor([[1.0, 2.0]])
        k = T.tensor([[0.5, 1.0]])
        v = T.tensor([[3.0, -4.0]])
        res = A.cosformer_attention(q, k, v)
        np.testing.assert_allclose(res.output.data, v.data, rtol=1e-5)

    def test_reweighting_coefficients_positive(self):
        for n in (1, 2, 5, 33):
            i = np.arange(n)[:, None]
            j = np.arange(n)[None, :]
            coeff = np.cos((math.pi / 2) * (i - j) / n)
            assert (coeff > 0).all()

    def test_matches_double_loop_oracle(self):
        r = rng(8)
        q, k, v = (T.tensor(r.standard_normal((32, 8))) for _ in range(3))
        res = A.cosformer_attention(q, k, v)
        ref = A.quadratic_cosformer_reference(q.data, k.data, v.data)
        assert np.abs(res.output.data - ref).max() < 1e-8

    def test_cross_attention_lengths(self):
        r = rng(9)
        q = T.tensor(r.standard_normal((5, 4)))
        k = T.tensor(r.standard_normal((9, 4)))
        v = T.tensor(r.standard_normal((9, 4)))
        res = A.cosformer_attention(q, k, v)
        ref = A.quadratic_cosformer_reference(q.data, k.data, v.data)
        assert np.abs(res.output.data - ref).max() < 1e-8

    def test_unnormalized_mode(self):
        r = rng(10)
        q, k, v = (T.tensor(r.standard_normal((6, 4))) for _ in range(3))
        res = A.cosformer_attention(q, k, v, normalize=False)
        # reconstruct by multiplying the normalized output by its denominator
        norm = A.cosformer_attention(q, k, v)
        qp = np.maximum(q.data, 0)
        kp = np.maximum(k.data, 0)
        m = 6
        ang_q = (math.pi / 2) * np.arange(6) / m
        den = np.zeros((6, 1))
        for i in range(6):
            for j in range(6):
                den[i] += qp[i] @ kp[j] * math.cos((math.pi / 2) * (i - j) / m)
        np.testing.assert_allclose(res.output.data, norm.output.data * (den + A.EPS_DEFAULT), atol=1e-8)

    def test_oracle_equivalence_sweep(self):
        """Linear form equals quadratic form for all N <= 64, d <= 16 samples."""
        for trial in range(100):
            r = rng(1000 + trial)
            n = int(r.integers(1, 65))
            d = int(r.integers(2, 17))
            q, k, v = (r.standard_normal((n, d)) for _ in range(3))
            res = A.cosformer_attention(T.tensor(q), T.tensor(k), T.tensor(v))
            ref = A.quadratic_cosformer_reference(q, k, v)
            assert np.abs(res.output.data - ref).max() < 1e-8


class TestCausalLinearAttention:
    def test_length_one_reduces_to_noncausal(self):
        r = rng(11)
        q, k, v = (T.tensor(r.standard_normal((1, 4))) for _ in range(3))
        causal = A.causal_linear_attention(q, k, v)
        plain = A.linear_attention(q, k, v)
        np.testing.assert_array_equal(causal.output.data, plain.output.data)

    def test_prefix_oracle(self):
        """Row i equals non-causal attention over the length-(i+1) prefix."""
        r = rng(12)
        n = 12
        q, k, v = (r.standard_normal((n, 5)) for _ in range(3))
        full = A.causal_linear_attention(T.tensor(q), T.tensor(k), T.tensor(v))
        for i in range(1, n + 1):
            prefix = A.linear_attention(
                T.tensor(q[i - 1 : i]), T.tensor(k[:i]), T.tensor(v[:i])
            )
            np.testing.assert_allclose(full.output.data[i - 1], prefix.output.data[0], atol=1e-10)

    def test_masked_quadratic_oracle(self):
        r = rng(13)
        q, k, v = (r.standard_normal((10, 6)) for _ in range(3))
        res = A.causal_linear_attention(T.tensor(q), T.tensor(k), T.tensor(v))
        ref = A.quadratic_linear_attention_reference(q, k, v, causal=True)
        assert np.abs(res.output.data - ref).max() < 1e-8

    def test_causal_cosformer_matches_oracle(self):
        r = rng(14)
        q, k, v = (r.standard_normal((14, 4)) for _ in range(3))
        res = A.cosformer_attention(T.tensor(q), T.tensor(k), T.tensor(v), causal=True)
        ref = A.quadratic_cosformer_reference(q, k, v, causal=True)
        assert np.abs(res.output.data - ref).max() < 1e-8


class TestCausalProperty:
    @pytest.mark.parametrize("kind", ["softmax", "linear", "cosformer"])
    def test_future_value_perturbation_exact_zero_effect(self, kind):
        r = rng(15)
        n, d = 9, 4
        q, k, v = (r.standard_normal((n, d)) for _ in range(3))

        def run(vv, kk):
            if kind == "softmax":
                return A.softmax_attention(T.tensor(q), T.tensor(kk), T.tensor(vv), causal=True).data
            if kind == "linear":
                return A.causal_linear_attention(T.tensor(q), T.tensor(kk), T.tensor(vv)).output.data
            return A.cosformer_attention(T.tensor(q), T.tensor(kk), T.tensor(vv), causal=True).output.data

        base = run(v, k)
        for i in range(n - 1):
            v2, k2 = v.copy(), k.copy()
            v2[i + 1 :] += r.standard_normal((n - i - 1, d)) * 100
            k2[i + 1 :] += r.standard_normal((n - i - 1, d)) * 100
            pert = run(v2, k2)
            assert (pert[: i + 1] == base[: i + 1]).all()


class TestGradients:
    @pytest.mark.parametrize("kind", ["softmax", "linear", "cosformer", "causal_linear", "causal_cosformer"])
    @pytest.mark.parametrize("wrt", ["q", "k", "v"])
    def test_finite_differences(self, kind, wrt):
        r = rng(16)
        n, d = 6, 4
        # keep magnitudes ~1 and away from relu kinks
        vals = {name: r.standard_normal((n, d)) + 0.0 for name in "qkv"}
        for name in "qk":
            kink = np.abs(vals[name]) < 1e-3
            vals[name][kink] += np.sign(vals[name][kink] + 0.5) * 0.01
        w = r.standard_normal((n, d))

        def forward(q, k, v):
            if kind == "softmax":
                return A.softmax_attention(q, k, v)
            if kind == "linear":
                return A.linear_attention(q, k, v).output
            if kind == "cosformer":
                return A.cosformer_attention(q, k, v).output
            if kind == "causal_linear":
                return A.causal_linear_attention(q, k, v).output
            return A.cosformer_attention(q, k, v, causal=True).output

        target = T.tensor(vals[wrt], requires_grad=True)
        args = {name: (target if name == wrt else T.tensor(vals[name])) for name in "qkv"}
        with T.Tape() as tape:
            out = forward(args["q"], args["k"], args["v"])
            loss = T.sum_all(T.mul(out, T.tensor(w)))
        tape.backward(loss)

        def f(x):
            a = {name: T.tensor(x if name == wrt else vals[name]) for name in "qkv"}
            return float((forward(a["q"], a["k"], a["v"]).data * w).sum())

        fd = finite_difference_grad(f, vals[wrt].copy())
        assert max_rel_error(target.grad, fd) < 1e-4, f"{kind} wrt {wrt}"


class TestAllocationBound:
    def test_linear_paths_avoid_quadratic_memory(self):
        n, d = 512, 16
        r = rng(17)
        q, k, v = (T.tensor(r.standard_normal((n, d))) for _ in range(3))
        budget = 40 * (n * d + d * d) * 8  # generous constant, still << N^2 floats

        with A.track_peak_allocation() as lin:
            A.linear_attention(q, k, v)
        assert lin.peak_bytes < budget

        with A.track_peak_allocation() as cosf:
            A.cosformer_attention(q, k, v)
        assert cosf.peak_bytes < budget

        with A.track_peak_allocation() as caus:
            A.causal_linear_attention(q, k, v)
        assert caus.peak_bytes < budget

        with A.track_peak_allocation() as soft:
            A.softmax_attention(q, k, v)
        assert soft.peak_bytes > n * n * 8  # the quadratic path really is quadratic

    def test_linear_path_bound_holds_under_tape(self):
        n, d = 512, 16
        r = rng(18)
        q = T.tensor(r.standard_normal((n, d)), requires_grad=True)
        k, v = (T.tensor(r.standard_normal((n, d))) for _ in range(2))
        budget = 60 * (n * d + d * d) * 8
        with A.track_peak_allocation() as rep:
            with T.Tape():
                A.cosformer_attention(q, k, v)
        assert rep.peak_bytes < budget
