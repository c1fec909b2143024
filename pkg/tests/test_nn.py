import numpy as np
import pytest

from detrack import nn

from conftest import rel_err


def grad_check(forward, backward, params, rng, n_checks: int = 8, eps: float = 1e-6):
    """Compare accumulated parameter grads against central differences of a
    scalar squared-sum loss."""
    coeff = None

    def loss():
        nonlocal coeff
        y, _ = forward()
        if coeff is None:
            coeff = rng.standard_normal(y.shape)
        return float(np.sum(y * coeff))

    base = loss()
    y, cache = forward()
    for p in params:
        p.zero_grad()
    backward(coeff, cache)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_checks, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, rel_err(fd, gflat[i], floor=1e-7))
    return worst


class TestLinear:
    def test_forward_matches_manual(self, rng):
        lin = nn.Linear(3, 5, rng)
        x = rng.standard_normal((7, 3))
        y, _ = lin.forward(x)
        assert np.allclose(y, x @ lin.w.value + lin.b.value)

    def test_gradients(self, rng):
        lin = nn.Linear(4, 6, rng)
        x = rng.standard_normal((2, 3, 4))
        worst = grad_check(lambda: lin.forward(x),
                           lambda dy, c: lin.backward(dy, c),
                           [lin.w, lin.b], rng)
        assert worst < 1e-6

    def test_input_gradient(self, rng):
        lin = nn.Linear(4, 4, rng)
        x = rng.standard_normal((5, 4))
        coeff = rng.standard_normal((5, 4))
        y, cache = lin.forward(x)
        dx = lin.backward(coeff, cache)
        eps = 1e-6
        xp = x.copy()
        xp[2, 1] += eps
        fd = (np.sum(lin.forward(xp)[0] * coeff) - np.sum(lin.forward(x)[0] * coeff)) / eps
        assert rel_err(fd, dx[2, 1], floor=1e-7) < 1e-4


class TestLayerNorm:
    def test_normalizes(self, rng):
        ln = nn.LayerNorm(16)
        y, _ = ln.forward(rng.standard_normal((3, 16)) * 5 + 2)
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-9)
        assert np.allclose(y.std(axis=-1), 1.0, atol=1e-3)

    def test_gradients(self, rng):
        ln = nn.LayerNorm(8)
        ln.gamma.value[...] = rng.standard_normal(8)
        x = rng.standard_normal((4, 8))
        worst = grad_check(lambda: ln.forward(x),
                           lambda dy, c: ln.backward(dy, c),
                           [ln.gamma, ln.beta], rng)
        assert worst < 1e-5


class TestAttention:
    def test_weight_rows_sum_to_one(self, rng):
        attn = nn.MultiHeadAttention(16, 4, rng)
        q = rng.standard_normal((2, 5, 16))
        kv = rng.standard_normal((2, 9, 16))
        _, cache = attn.forward(q, kv)
        weights = cache[7]
        assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-6)

    def test_mask_zeroes_weights(self, rng):
        attn = nn.MultiHeadAttention(8, 2, rng)
        x = rng.standard_normal((1, 4, 8))
        mask = np.tril(np.ones((4, 4), dtype=bool))
        _, cache = attn.forward(x, x, mask=mask)
        weights = cache[7]
        assert np.all(weights[:, :, ~mask] == 0.0)

    def test_gradients(self, rng):
        attn = nn.MultiHeadAttention(8, 2, rng)
        q = rng.standard_normal((2, 3, 8))
        kv = rng.standard_normal((2, 5, 8))
        params = [attn.wq.w, attn.wk.w, attn.wv.w, attn.wo.w, attn.wo.b]
        worst = grad_check(lambda: attn.forward(q, kv),
                           lambda dy, c: attn.backward(dy, c),
                           params, rng)
        assert worst < 1e-5


class TestFeedForward:
    @pytest.mark.parametrize("activation", ["relu", "gelu"])
    def test_gradients(self, rng, activation):
        ffn = nn.FeedForward(6, 12, rng, activation=activation)
        x = rng.standard_normal((3, 6))
        worst = grad_check(lambda: ffn.forward(x),
                           lambda dy, c: ffn.backward(dy, c),
                           [ffn.lin1.w, ffn.lin2.w, ffn.lin2.b], rng)
        assert worst < 1e-5


class TestFlopMeter:
    def test_linear_macs(self, rng):
        lin = nn.Linear(8, 16, rng)
        x = rng.standard_normal((3, 5, 8))
        nn.flop_meter.reset()
        with nn.flop_meter.measure():
            lin.forward(x)
        assert nn.flop_meter.macs == 3 * 5 * 8 * 16

    def test_inactive_by_default(self, rng):
        lin = nn.Linear(4, 4, rng)
        nn.flop_meter.reset()
        lin.forward(rng.standard_normal((2, 4)))
        assert nn.flop_meter.macs == 0

    def test_attention_macs(self, rng):
        attn = nn.MultiHeadAttention(8, 2, rng)
        q = rng.standard_normal((1, 3, 8))
        kv = rng.standard_normal((1, 7, 8))
        nn.flop_meter.reset()
        with nn.flop_meter.measure():
            attn.forward(q, kv)
        linears = 3 * 8 * 8 + 2 * (7 * 8 * 8) + 3 * 8 * 8  # q, k, v, out projections
        attn_macs = 2 * 1 * 2 * 3 * 7 * 4
        assert nn.flop_meter.macs == linears + attn_macs


class TestAdamW:
    def test_moves_toward_minimum(self, rng):
        p = nn.Param(np.array([4.0, -3.0]))
        opt = nn.AdamW({"g": ({"p": p}, 0.1)}, weight_decay=0.0, clip_norm=0.0)
        for _ in range(400):
            p.zero_grad()
            p.grad += 2 * p.value
            opt.step()
        assert np.all(np.abs(p.value) < 1e-2)

    def test_clip_bounds_update(self, rng):
        p = nn.Param(np.zeros(4))
        opt = nn.AdamW({"g": ({"p": p}, 1.0)}, clip_norm=1.0, weight_decay=0.0)
        p.grad += 1e6 * np.ones(4)
        opt.step()
        assert np.all(np.isfinite(p.value))

    def test_state_round_trip(self, rng):
        p = nn.Param(rng.standard_normal(3))
        opt = nn.AdamW({"g": ({"p": p}, 0.01)})
        p.grad += rng.standard_normal(3)
        opt.step()
        state = {k: v.copy() for k, v in opt.state_arrays().items()}
        p2 = nn.Param(p.value.copy())
        opt2 = nn.AdamW({"g": ({"p": p2}, 0.01)})
        opt2.load_state_arrays(state)
        assert opt2.step_count == opt.step_count
        assert np.array_equal(opt2.m["g"]["p"], opt.m["g"]["p"])
