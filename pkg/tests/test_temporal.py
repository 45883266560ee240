"""Tests for the scan, the scan layer, attention and the temporal module variants."""

import math

import numpy as np
import pytest

from tokentrack import tensor as T
from tokentrack.nn import Block, MultiHeadAttention
from tokentrack.temporal import VARIANTS, MambaLayer, TemporalModule, WindowBuffer, temporal_forward, window_push
from tokentrack.tensor import ContractError, Tensor, finite_diff_check

TOL = 1e-4


def naive_scan(x, delta, A, B, C, D):
    """Per-step, per-channel recurrence in extended precision."""
    x, delta, A, B, C, D = (np.asarray(a, dtype=np.longdouble) for a in (x, delta, A, B, C, D))
    L, E = x.shape
    N = A.shape[1]
    y = np.zeros((L, E), dtype=np.longdouble)
    h = np.zeros((E, N), dtype=np.longdouble)
    for t in range(L):
        for e in range(E):
            for n in range(N):
                h[e, n] = np.exp(delta[t, e] * A[e, n]) * h[e, n] + delta[t, e] * B[t, n] * x[t, e]
            y[t, e] = sum(h[e, n] * C[t, n] for n in range(N)) + D[e] * x[t, e]
    return y


def scan_inputs(rng, L=8, E=5, N=4):
    return (rng.normal(size=(L, E)), rng.uniform(0.01, 0.5, (L, E)), -rng.uniform(0.5, 3.0, (E, N)),
            rng.normal(size=(L, N)), rng.normal(size=(L, N)), rng.normal(size=E))


def naive_attention(mha, q_in, k_in, v_in):
    """Explicit loops over batch, head and query; reuses only the projection weights."""
    Wq, Wk, Wv, Wo = (getattr(mha, n).weight.data for n in ("q", "k", "v", "out"))
    bq, bk, bv, bo = (getattr(mha, n).bias.data for n in ("q", "k", "v", "out"))
    Bn, Lq, D = q_in.shape
    Lk = k_in.shape[1]
    H = mha.num_heads
    dh = D // H
    out = np.zeros((Bn, Lq, D))
    for b in range(Bn):
        q = q_in[b] @ Wq + bq
        k = k_in[b] @ Wk + bk
        v = v_in[b] @ Wv + bv
        ctx = np.zeros((Lq, D))
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(Lq):
                scores = np.array([q[i, sl] @ k[j, sl] for j in range(Lk)]) / math.sqrt(dh)
                w = np.exp(scores - scores.max())
                w /= w.sum()
                ctx[i, sl] = sum(w[j] * v[j, sl] for j in range(Lk))
        out[b] = ctx @ Wo + bo
    return out


class TestWindowBuffer:
    def test_partial_fill_keeps_order(self):
        buf = WindowBuffer(8)
        for i in range(3):
            window_push(buf, i)
        assert len(buf) == 3 and list(buf) == [0, 1, 2]

    def test_eviction_of_oldest(self):
        buf = WindowBuffer(8)
        for i in range(9):
            buf.push(i)
        assert len(buf) == 8 and 0 not in list(buf) and buf[0] == 1 and buf[-1] == 8

    def test_as_sequence_stacks_oldest_first(self, rng):
        toks = [Tensor(rng.normal(size=(2, 1, 3))) for _ in range(4)]
        buf = WindowBuffer(3)
        for t in toks:
            buf.push(t)
        np.testing.assert_array_equal(buf.as_sequence().data, np.concatenate([t.data for t in toks[1:]], axis=1))

    def test_empty_window_rejected(self):
        with pytest.raises(ContractError):
            WindowBuffer(2).as_sequence()

    def test_capacity_must_be_positive(self):
        with pytest.raises(ValueError):
            WindowBuffer(0)


class TestSelectiveScan:
    def test_matches_extended_precision_loop(self, rng):
        args = scan_inputs(rng)
        y = T.selective_scan(*(Tensor(a) for a in args)).data
        ref = naive_scan(*args)
        assert np.max(np.abs(y - ref.astype(np.float64))) < 1e-10

    def test_batched_rows_match_single_rows(self, rng):
        x, d, A, B, C, D = (rng.normal(size=(3, 6, 4)), rng.uniform(0.01, 0.3, (3, 6, 4)), -rng.uniform(1, 2, (4, 2)),
                            rng.normal(size=(3, 6, 2)), rng.normal(size=(3, 6, 2)), rng.normal(size=4))
        y = T.selective_scan(*(Tensor(a) for a in (x, d, A, B, C, D))).data
        for b in range(3):
            ref = naive_scan(x[b], d[b], A, B[b], C[b], D).astype(np.float64)
            assert np.max(np.abs(y[b] - ref)) < 1e-10

    def test_vanishing_step_keeps_state_at_zero(self, rng):
        x, _, A, B, C, D = scan_inputs(rng)
        y = T.selective_scan(Tensor(x), Tensor(np.full_like(x, 1e-300)), Tensor(A), Tensor(B), Tensor(C),
                             Tensor(D)).data
        np.testing.assert_allclose(y, D * x, atol=1e-250)

    def test_memoryless_limit(self, rng):
        x, d, _, B, C, D = scan_inputs(rng)
        A = np.full((x.shape[1], B.shape[1]), -1e6)
        y = T.selective_scan(*(Tensor(a) for a in (x, d, A, B, C, D))).data
        expected = (C @ B.T).diagonal()[:, None] * d * x + D * x
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_nonpositive_step_rejected(self, rng):
        x, d, A, B, C, D = scan_inputs(rng)
        d[3, 1] = 0.0
        with pytest.raises(ContractError):
            T.selective_scan(*(Tensor(a) for a in (x, d, A, B, C, D)))

    def test_gradients_for_every_operand(self, rng):
        args = [Tensor(a, requires_grad=True) for a in scan_inputs(rng, L=5, E=3, N=2)]
        w = rng.normal(size=(5, 3))
        for i, arg in enumerate(args):
            def f(_, i=i):
                return T.tsum(T.selective_scan(*args) * w)
            assert finite_diff_check(f, arg, eps=1e-6) < TOL, f"operand {i}"

    def test_state_does_not_leak_between_calls(self, rng):
        args = [Tensor(a) for a in scan_inputs(rng)]
        np.testing.assert_array_equal(T.selective_scan(*args).data, T.selective_scan(*args).data)


class TestMambaLayer:
    def test_initial_step_sizes_and_decay_rates(self, rng):
        layer = MambaLayer(32, rng)
        dt = np.log1p(np.exp(layer.dt_proj.bias.data))
        assert np.all((dt >= 0.01 - 1e-12) & (dt <= 0.1 + 1e-12))
        np.testing.assert_allclose(layer.A().data, -np.tile(np.arange(1, 17.0), (64, 1)), rtol=1e-15)
        assert layer.inner == 64 and layer.dt_rank == 2

    def test_zero_output_projection_is_identity(self, rng):
        layer = MambaLayer(8, rng, state_dim=4)
        layer.out_proj.weight.data[:] = 0.0
        layer.out_proj.bias.data[:] = 0.0
        x = rng.normal(size=(2, 5, 8))
        np.testing.assert_array_equal(layer(Tensor(x)).data, x)

    def test_single_token(self, rng):
        layer = MambaLayer(8, rng, state_dim=4)
        x = rng.normal(size=(1, 1, 8))
        assert layer(Tensor(x)).shape == (1, 1, 8)

    @pytest.mark.parametrize("seed", range(20))
    def test_strict_causality(self, seed):
        r = np.random.default_rng(seed)
        layer = MambaLayer(8, r, state_dim=4)
        x = r.normal(size=(1, 6, 8))
        base = layer(Tensor(x)).data
        for j in range(6):
            xp = x.copy()
            xp[0, j] += r.normal(size=8)
            out = layer(Tensor(xp)).data
            np.testing.assert_array_equal(out[0, :j], base[0, :j])
            assert np.any(out[0, j] != base[0, j])

    def test_gradients(self, rng):
        layer = MambaLayer(8, rng, state_dim=3)
        x = Tensor(rng.normal(size=(2, 4, 8)), requires_grad=True)
        w = rng.normal(size=(2, 4, 8))
        loss = lambda: T.tsum(layer(x) * w)  # noqa: E731
        assert finite_diff_check(lambda _: loss(), x) < TOL
        for name, p in layer.named_parameters():
            assert finite_diff_check(lambda _: loss(), p, indices=range(min(p.size, 12))) < TOL, name


class TestAttention:
    def test_matches_naive_loop(self, rng):
        mha = MultiHeadAttention(8, 2, rng)
        for name in ("q", "k", "v", "out"):
            getattr(mha, name).bias.data = rng.normal(size=8)
        q, k = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 5, 8))
        v = rng.normal(size=(2, 5, 8))
        out = mha(Tensor(q), Tensor(k), Tensor(v)).data
        assert np.max(np.abs(out - naive_attention(mha, q, k, v))) < 1e-10

    def test_single_key_gets_all_weight(self, rng):
        mha = MultiHeadAttention(8, 2, rng)
        q, kv = Tensor(rng.normal(size=(1, 4, 8))), Tensor(rng.normal(size=(1, 1, 8)))
        np.testing.assert_allclose(mha.weights(q, kv).data, 1.0, atol=1e-15)
        expected = mha.out(mha.v(kv)).data
        np.testing.assert_allclose(mha(q, kv, kv).data, np.broadcast_to(expected, (1, 4, 8)), atol=1e-14)

    def test_identical_keys_give_uniform_weights(self, rng):
        mha = MultiHeadAttention(8, 2, rng)
        k = Tensor(np.tile(rng.normal(size=(1, 1, 8)), (1, 5, 1)))
        np.testing.assert_allclose(mha.weights(Tensor(rng.normal(size=(1, 3, 8))), k).data, 0.2, atol=1e-15)

    def test_key_value_permutation_invariance(self, rng):
        blk = Block(8, 2, 2.0, rng, cross=True)
        q, kv = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 6, 8))
        perm = rng.permutation(6)
        a = blk(Tensor(q), Tensor(kv), Tensor(kv)).data
        b = blk(Tensor(q), Tensor(kv[:, perm]), Tensor(kv[:, perm])).data
        np.testing.assert_allclose(a, b, atol=1e-13)

    def test_cross_block_needs_keys(self, rng):
        with pytest.raises(TypeError):
            Block(8, 2, 2.0, rng, cross=True)(Tensor(rng.normal(size=(1, 2, 8))))

    def test_block_gradients(self, rng):
        blk = Block(8, 2, 2.0, rng, cross=True)
        q = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
        kv = Tensor(rng.normal(size=(2, 4, 8)), requires_grad=True)
        w = rng.normal(size=(2, 3, 8))
        loss = lambda: T.tsum(blk(q, kv, kv) * w)  # noqa: E731
        for t in (q, kv):
            assert finite_diff_check(lambda _: loss(), t) < TOL
        for name, p in blk.named_parameters():
            assert finite_diff_check(lambda _: loss(), p, indices=range(min(p.size, 10))) < TOL, name


def _module(variant, seed=0, dim=16):
    return TemporalModule(variant, dim, 2, 2.0, np.random.default_rng(seed), state_dim=4)


class TestTemporalModule:
    def test_unknown_variant(self, rng):
        with pytest.raises(ValueError):
            TemporalModule("cross-cross", 16, 2, 2.0, rng)

    def test_empty_window_rejected(self):
        with pytest.raises(ContractError):
            _module("mamba-cross")(Tensor(np.zeros((1, 0, 16))))

    def test_mamba_cross_reduces_to_scan_layer(self, rng):
        mod = _module("mamba-cross")
        for lin in (mod.second.attn.out, mod.second.mlp.fc2):
            lin.weight.data[:] = 0.0
            lin.bias.data[:] = 0.0
        win = Tensor(rng.normal(size=(2, 5, 16)))
        np.testing.assert_array_equal(temporal_forward(mod, win).data, mod.first(win).data)

    def test_self_self_single_token(self, rng):
        out = _module("self-self")(Tensor(rng.normal(size=(1, 1, 16))))
        assert out.shape == (1, 1, 16) and np.all(np.isfinite(out.data))

    def test_variants_differ(self, rng):
        win = Tensor(rng.normal(size=(1, 4, 16)))
        outs = [_module(v, seed=5)(win).data for v in VARIANTS]
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.max(np.abs(outs[i] - outs[j])) > 0

    def test_scan_variant_is_order_sensitive(self, rng):
        a, b, c = (rng.normal(size=(1, 1, 16)) for _ in range(3))
        mod = _module("mamba-cross")
        fwd = mod(Tensor(np.concatenate([a, b, c], axis=1))).data[:, -1]
        rev = mod(Tensor(np.concatenate([c, b, a], axis=1))).data[:, -1]
        assert np.max(np.abs(fwd - rev)) > 1e-8

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_repeated_calls_identical(self, rng, variant):
        mod = _module(variant)
        win = Tensor(rng.normal(size=(2, 4, 16)))
        np.testing.assert_array_equal(mod(win).data, mod(win).data)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_gradients(self, rng, variant):
        mod = _module(variant)
        win = Tensor(rng.normal(size=(2, 4, 16)), requires_grad=True)
        w = rng.normal(size=(2, 4, 16))
        loss = lambda: T.tsum(mod(win) * w)  # noqa: E731
        assert finite_diff_check(lambda _: loss(), win) < TOL
        for name, p in mod.named_parameters():
            assert finite_diff_check(lambda _: loss(), p, indices=range(min(p.size, 6))) < TOL, name
