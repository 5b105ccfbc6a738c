"""Numeric-kernel tests: softmax, attention, MLP, Adagrad, gradient checking."""

import numpy as np
import pytest

from iu4rec.nn import (AdagradState, EmbeddingTable, KernelError,
                       adagrad_update, attention_backward, attention_forward,
                       grad_check, masked_softmax, mlp_backward, mlp_forward,
                       softmax_rows, target_attention)


def rand_attention(rng, B=3, H=5, dq=6, dk=6, p=8, heads=2):
    query = rng.normal(size=(B, dq))
    history = rng.normal(size=(B, H, dk))
    mask = np.ones((B, H), dtype=bool)
    mask[0, 3:] = False
    wq = rng.normal(size=(p, dq))
    wk = rng.normal(size=(p, dk))
    wv = rng.normal(size=(p, dk))
    return query, history, mask, wq, wk, wv, heads


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(4, 7)) * 50
        s = softmax_rows(m)
        assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)
        assert (s > 0).all()

    def test_stability_at_large_magnitudes(self):
        s = softmax_rows(np.array([[1000.0, 1000.0, -1000.0]]))
        assert np.isfinite(s).all()
        assert s[0, 0] == pytest.approx(0.5)

    def test_nan_raises_naming_row(self):
        m = np.zeros((3, 2))
        m[1, 0] = np.nan
        with pytest.raises(KernelError, match="row 1"):
            softmax_rows(m)

    def test_masked_softmax_exact_zero_on_masked_slots(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(2, 5))
        mask = np.array([[True, True, False, False, True],
                         [True, True, True, True, True]])
        w = masked_softmax(logits, mask)
        assert (w[~mask] == 0.0).all()
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    def test_masked_softmax_ignores_masked_logits(self):
        logits = np.array([[1.0, 2.0, 1e9]])
        mask = np.array([[True, True, False]])
        w = masked_softmax(logits, mask)
        expect = softmax_rows(np.array([[1.0, 2.0]]))
        assert np.allclose(w[0, :2], expect[0], atol=1e-12)

    def test_masked_softmax_all_masked_row_raises(self):
        with pytest.raises(KernelError, match="no unmasked"):
            masked_softmax(np.zeros((1, 3)), np.zeros((1, 3), dtype=bool))


class TestAttention:
    def test_head_weights_sum_to_one(self):
        rng = np.random.default_rng(2)
        query, history, mask, wq, wk, wv, heads = rand_attention(rng)
        _, cache = attention_forward(query, history, mask, wq, wk, wv, heads)
        w = cache[-1]  # (B, heads, H)
        assert np.abs(w.sum(axis=-1) - 1.0).max() < 1e-12

    def test_output_invariant_under_joint_kv_permutation(self):
        rng = np.random.default_rng(3)
        query, history, _, wq, wk, wv, heads = rand_attention(rng)
        mask = np.ones(history.shape[:2], dtype=bool)
        out1, _ = attention_forward(query, history, mask, wq, wk, wv, heads)
        perm = rng.permutation(history.shape[1])
        out2, _ = attention_forward(query, history[:, perm], mask,
                                    wq, wk, wv, heads)
        assert np.allclose(out1, out2, atol=1e-12)

    def test_singleton_history_returns_projected_value_row(self):
        rng = np.random.default_rng(4)
        query, history, _, wq, wk, wv, heads = rand_attention(rng, H=1)
        mask = np.ones((query.shape[0], 1), dtype=bool)
        out, _ = attention_forward(query, history, mask, wq, wk, wv, heads)
        assert np.allclose(out, history[:, 0] @ wv.T, atol=1e-12)

    def test_masked_slot_content_does_not_affect_output(self):
        rng = np.random.default_rng(5)
        query, history, mask, wq, wk, wv, heads = rand_attention(rng)
        out1, _ = attention_forward(query, history, mask, wq, wk, wv, heads)
        poisoned = history.copy()
        poisoned[~mask] = 1e6
        out2, _ = attention_forward(query, poisoned, mask, wq, wk, wv, heads)
        assert np.allclose(out1, out2, atol=1e-9)

    def test_masked_slots_get_exact_zero_gradient(self):
        rng = np.random.default_rng(6)
        query, history, mask, wq, wk, wv, heads = rand_attention(rng)
        out, cache = attention_forward(query, history, mask, wq, wk, wv, heads)
        _, dhistory, _, _, _ = attention_backward(cache, np.ones_like(out))
        assert (dhistory[~mask] == 0.0).all()

    def test_heads_must_divide_width(self):
        rng = np.random.default_rng(7)
        query, history, mask, wq, wk, wv, _ = rand_attention(rng, p=8)
        with pytest.raises(KernelError, match="heads"):
            attention_forward(query, history, mask, wq, wk, wv, heads=3)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        query, history, mask, wq, wk, wv, heads = rand_attention(
            rng, B=2, H=4, p=6, heads=2)
        params = {"wq": wq, "wk": wk, "wv": wv}

        def loss_fn(p):
            out, cache = attention_forward(query, history, mask,
                                           p["wq"], p["wk"], p["wv"], heads)
            loss = 0.5 * (out ** 2).sum()
            _, _, dwq, dwk, dwv = attention_backward(cache, out)
            return loss, {"wq": dwq, "wk": dwk, "wv": dwv}

        errors = grad_check(loss_fn, params)
        assert max(errors.values()) < 1e-6

    def test_single_head_oracle(self):
        # hand-rolled single-sample single-head attention as the oracle
        rng = np.random.default_rng(9)
        dq = dk = 4
        p = 4
        target = rng.normal(size=dq)
        hist = rng.normal(size=(3, dk))
        params = {"wq": rng.normal(size=(p, dq)),
                  "wk": rng.normal(size=(p, dk)),
                  "wv": rng.normal(size=(p, dk))}
        q = params["wq"] @ target
        k = hist @ params["wk"].T
        v = hist @ params["wv"].T
        logits = k @ q / np.sqrt(p)
        e = np.exp(logits - logits.max())
        w = e / e.sum()
        expected = w @ v
        got = target_attention(target, hist, params, heads=1)
        assert np.allclose(got, expected, atol=1e-12)

    def test_empty_history_raises(self):
        rng = np.random.default_rng(10)
        params = {"wq": rng.normal(size=(4, 4)),
                  "wk": rng.normal(size=(4, 4)),
                  "wv": rng.normal(size=(4, 4))}
        with pytest.raises(KernelError, match="empty history"):
            target_attention(rng.normal(size=4), np.zeros((0, 4)), params, 1)


class TestMlp:
    def layers(self, rng, dims=(6, 5, 3, 1)):
        out = []
        for i in range(len(dims) - 1):
            act = "relu" if i < len(dims) - 2 else "linear"
            out.append((rng.normal(size=(dims[i + 1], dims[i])),
                        rng.normal(size=dims[i + 1]), act))
        return out

    def test_single_and_batched_agree(self):
        rng = np.random.default_rng(11)
        layers = self.layers(rng)
        x = rng.normal(size=(4, 6))
        batched, _ = mlp_forward(x, layers)
        singles = np.array([mlp_forward(row, layers)[0] for row in x])
        assert np.allclose(batched, singles, atol=1e-12)

    def test_width_mismatch_raises(self):
        rng = np.random.default_rng(12)
        with pytest.raises(KernelError, match="width"):
            mlp_forward(rng.normal(size=5), self.layers(rng))

    def test_final_width_must_be_one(self):
        rng = np.random.default_rng(13)
        layers = [(rng.normal(size=(2, 4)), np.zeros(2), "linear")]
        with pytest.raises(KernelError, match="expected 1"):
            mlp_forward(rng.normal(size=4), layers)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        layers = self.layers(rng)
        x = rng.normal(size=(3, 6))
        params = {f"w{i}": w for i, (w, b, a) in enumerate(layers)}
        params.update({f"b{i}": b for i, (w, b, a) in enumerate(layers)})

        def loss_fn(p):
            lyr = [(p[f"w{i}"], p[f"b{i}"], layers[i][2])
                   for i in range(len(layers))]
            logit, cache = mlp_forward(x, lyr)
            loss = 0.5 * (logit ** 2).sum()
            _, grads = mlp_backward(cache, logit)
            out = {}
            for i, (dw, db) in enumerate(grads):
                out[f"w{i}"] = dw
                out[f"b{i}"] = db
            return loss, out

        errors = grad_check(loss_fn, params)
        assert max(errors.values()) < 1e-6

    def test_input_gradient(self):
        rng = np.random.default_rng(15)
        layers = self.layers(rng)
        x = rng.normal(size=6)
        logit, cache = mlp_forward(x, layers)
        dx, _ = mlp_backward(cache, 1.0)
        eps = 1e-6
        for i in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[i] += eps
            xm[i] -= eps
            num = (mlp_forward(xp, layers)[0] - mlp_forward(xm, layers)[0]) / (2 * eps)
            assert abs(dx[i] - num) < 1e-5


class TestAdagrad:
    def test_dense_update_formula(self):
        param = np.array([1.0, -2.0])
        grad = np.array([0.5, 0.25])
        state = AdagradState(np.array([0.04, 0.09]), decay=0.9, epsilon=1e-8)
        # compute the expected values independently before updating
        accum = 0.9 * np.array([0.04, 0.09]) + grad ** 2
        expected = np.array([1.0, -2.0]) - 0.1 * grad / np.sqrt(accum + 1e-8)
        adagrad_update(param, grad, state, lr=0.1)
        assert np.allclose(state.accum, accum, atol=1e-15)
        assert np.allclose(param, expected, atol=1e-15)

    def test_sparse_skips_zero_rows(self):
        param = np.ones((4, 2))
        grad = np.zeros((4, 2))
        grad[2] = 0.3
        state = AdagradState(np.full((4, 2), 0.5), decay=0.9)
        adagrad_update(param, grad, state, lr=0.1, sparse=True)
        assert (param[[0, 1, 3]] == 1.0).all()
        assert (state.accum[[0, 1, 3]] == 0.5).all()  # no decay on untouched rows
        assert (param[2] != 1.0).all()

    def test_shape_mismatch_raises(self):
        with pytest.raises(KernelError, match="shape"):
            adagrad_update(np.zeros(3), np.zeros(4), AdagradState(np.zeros(3)), 0.1)


class TestEmbeddingTable:
    def test_padding_row_is_zero_and_frozen(self):
        rng = np.random.default_rng(16)
        t = EmbeddingTable.create(10, 4, rng)
        assert (t.weights[0] == 0.0).all()
        grad = np.ones((10, 4))
        t.apply_grad(grad, lr=0.1)
        assert (t.weights[0] == 0.0).all()
        assert (t.weights[1:] != 0.0).any()

    def test_out_of_vocab_raises(self):
        rng = np.random.default_rng(17)
        t = EmbeddingTable.create(10, 4, rng)
        with pytest.raises(KernelError, match="out of vocab"):
            t.lookup(np.array([3, 10]))

    def test_lookup_shape(self):
        rng = np.random.default_rng(18)
        t = EmbeddingTable.create(10, 4, rng)
        assert t.lookup(np.array([[1, 2], [3, 0]])).shape == (2, 2, 4)


class TestGradCheck:
    def test_flags_wrong_gradient(self):
        x = {"w": np.array([1.0, 2.0])}

        def bad_loss(p):
            return (p["w"] ** 2).sum(), {"w": 3.0 * p["w"]}  # true grad is 2w

        errors = grad_check(bad_loss, x)
        assert errors["w"] > 0.1

    def test_accepts_correct_gradient(self):
        x = {"w": np.array([0.3, -1.2, 2.0])}

        def good_loss(p):
            return (p["w"] ** 2).sum(), {"w": 2.0 * p["w"]}

        errors = grad_check(good_loss, x)
        assert errors["w"] < 1e-8

    def test_rejects_nondeterministic_loss(self):
        rng = np.random.default_rng(19)

        def noisy(p):
            return float(rng.normal()), {"w": np.zeros(1)}

        with pytest.raises(KernelError, match="deterministic"):
            grad_check(noisy, {"w": np.zeros(1)})
