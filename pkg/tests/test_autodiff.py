import math

import numpy as np
import pytest

from blindnav import autodiff as ad
from oracles import numeric_gradient


def _rand(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True)


class TestForwardValues:
    def test_softmax_uniform(self):
        out = ad.softmax(ad.Tensor(np.zeros((1, 4))))
        assert np.allclose(out.data, 0.25)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = ad.softmax(ad.Tensor(rng.standard_normal((7, 5)) * 10))
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_cross_entropy_uniform_is_log4(self):
        logits = ad.Tensor(np.zeros((3, 4)))
        ce = ad.cross_entropy(logits, np.array([0, 2, 3]))
        assert np.allclose(ce.data, math.log(4.0))

    def test_cross_entropy_nonnegative_and_stable(self):
        rng = np.random.default_rng(1)
        logits = ad.Tensor(rng.uniform(-1e4, 1e4, size=(16, 4)))
        ce = ad.cross_entropy(logits, rng.integers(0, 4, size=16))
        assert np.all(np.isfinite(ce.data)) and np.all(ce.data >= 0)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ad.AutodiffError, match=r"\(2, 3\).*\(4, 2\)"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))


class TestBackward:
    def test_matmul_against_finite_differences(self):
        rng = np.random.default_rng(2)
        a0 = rng.standard_normal((5, 4))
        b0 = rng.standard_normal((4, 3))
        a = ad.Tensor(a0.copy(), requires_grad=True)
        b = ad.Tensor(b0.copy(), requires_grad=True)
        ad.reduce_sum(ad.mul(ad.matmul(a, b), ad.matmul(a, b))).backward()
        num_a = numeric_gradient(lambda x: float((np.asarray(x) @ b0 * (np.asarray(x) @ b0)).sum()), a0)
        num_b = numeric_gradient(lambda x: float((a0 @ np.asarray(x) * (a0 @ np.asarray(x))).sum()), b0)
        assert np.max(np.abs(a.grad - num_a)) < 1e-6
        assert np.max(np.abs(b.grad - num_b)) < 1e-6

    @pytest.mark.parametrize("op", ["sigmoid", "tanh", "relu", "exp", "log",
                                    "softmax", "log_softmax"])
    def test_elementwise_ops(self, op):
        rng = np.random.default_rng(hash(op) % 2**32)
        fn = getattr(ad, op)
        base = rng.standard_normal((6, 5))
        if op == "log":
            base = np.abs(base) + 0.5
        weights = ad.Tensor(rng.standard_normal((6, 5)))
        err = ad.grad_check(lambda ts: ad.reduce_sum(ad.mul(fn(ts[0]), weights)),
                            [ad.Tensor(base)])
        assert err < 1e-4

    def test_concat_split_gather(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((7, 4))
        idx = np.array([0, 3, 3, 6, 1])
        weights = rng.standard_normal((5, 4))

        def fn(ts):
            rows = ad.gather_rows(ts[0], idx)
            left, right = ad.split(rows, [2, 2], axis=1)
            merged = ad.concat([right, left], axis=1)
            return ad.reduce_sum(ad.mul(merged, ad.Tensor(weights)))

        assert ad.grad_check(fn, [ad.Tensor(w)]) < 1e-4

    def test_scatter_rows(self):
        rng = np.random.default_rng(14)
        base = rng.standard_normal((6, 3))
        rows = rng.standard_normal((2, 3))
        idx = np.array([1, 4])
        weights = rng.standard_normal((6, 3))

        def fn(ts):
            out = ad.scatter_rows(ts[0], idx, ts[1])
            return ad.reduce_sum(ad.mul(out, ad.Tensor(weights)))

        assert ad.grad_check(fn, [ad.Tensor(base), ad.Tensor(rows)]) < 1e-4
        merged = ad.scatter_rows(ad.Tensor(base), idx, ad.Tensor(rows))
        assert np.array_equal(merged.data[idx], rows)
        keep = np.setdiff1d(np.arange(6), idx)
        assert np.array_equal(merged.data[keep], base[keep])

    def test_clip_minimum_take(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((8, 4))
        b = rng.standard_normal((8, 4))
        idx = rng.integers(0, 4, size=8)

        def fn(ts):
            low = ad.minimum(ts[0], ts[1])
            clipped = ad.clip(low, -0.5, 0.5)
            return ad.reduce_sum(ad.take_per_row(clipped, idx))

        assert ad.grad_check(fn, [ad.Tensor(a), ad.Tensor(b)]) < 1e-4

    def test_backward_deterministic(self):
        rng = np.random.default_rng(7)
        data = rng.standard_normal((4, 4))
        grads = []
        for _ in range(2):
            t = ad.Tensor(data.copy(), requires_grad=True)
            ad.reduce_sum(ad.tanh(ad.matmul(t, t))).backward()
            grads.append(t.grad.copy())
        assert np.array_equal(grads[0], grads[1])

    def test_no_grad_blocks_graph(self):
        t = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        with ad.no_grad():
            out = ad.reduce_sum(ad.tanh(t))
        assert out._backward is None


def _zero_gru(in_dim, h, dtype=np.float64):
    return ad.GruParams(
        w_in=ad.Tensor(np.zeros((in_dim, 3 * h), dtype=dtype)),
        bias=ad.Tensor(np.zeros(3 * h, dtype=dtype)),
        u_zr=ad.Tensor(np.zeros((h, 2 * h), dtype=dtype)),
        u_c=ad.Tensor(np.zeros((h, h), dtype=dtype)),
    )


class TestGru:
    def test_zero_weights_halve_state(self):
        p = _zero_gru(3, 2)
        h = ad.Tensor(np.array([[1.0, -1.0]]))
        out = ad.gru_step(p, ad.Tensor(np.ones((1, 3))), h)
        assert np.allclose(out.data, [[0.5, -0.5]])

    def test_state_stays_in_unit_box(self):
        rng = np.random.default_rng(8)
        p = ad.GruParams(
            w_in=_rand(rng, 4, 12), bias=_rand(rng, 12),
            u_zr=_rand(rng, 4, 8), u_c=_rand(rng, 4, 4),
        )
        h = ad.Tensor(rng.uniform(-1, 1, size=(5, 4)))
        for _ in range(50):
            h = ad.gru_step(p, ad.Tensor(rng.standard_normal((5, 4))), h)
            assert np.all(np.abs(h.data) < 1.0)

    def test_bptt_gradients(self):
        rng = np.random.default_rng(9)
        xs = [rng.standard_normal((2, 3)) for _ in range(8)]
        shapes = [(3, 12), (12,), (4, 8), (4, 4)]
        inits = [rng.standard_normal(s) * 0.4 for s in shapes]

        def fn(ts):
            p = ad.GruParams(w_in=ts[0], bias=ts[1], u_zr=ts[2], u_c=ts[3])
            h = ad.Tensor(np.zeros((2, 4)))
            for x in xs:
                h = ad.gru_step(p, ad.Tensor(x), h)
            return ad.reduce_sum(ad.mul(h, h))

        assert ad.grad_check(fn, [ad.Tensor(a) for a in inits]) < 1e-4


class TestGradCheckSelfTest:
    def test_linear_is_exact(self):
        rng = np.random.default_rng(10)
        w = rng.standard_normal((3, 3))
        err = ad.grad_check(lambda ts: ad.reduce_sum(ad.mul(ts[0], ad.Tensor(w))),
                            [ad.Tensor(rng.standard_normal((3, 3)))])
        assert err < 1e-9

    def test_detects_corrupted_backward(self):
        def bad_square(t):
            out = ad.Tensor(t.data * t.data)
            out._parents = (t,)
            out._backward = lambda g: (-2.0 * g * t.data,)  # sign flipped
            return out

        rng = np.random.default_rng(11)
        err = ad.grad_check(lambda ts: ad.reduce_sum(bad_square(ts[0])),
                            [ad.Tensor(rng.standard_normal(4) + 2.0)])
        assert err > 0.1


class TestAdamW:
    def test_pure_decay_step(self):
        store = ad.ParamStore()
        w = store.add("w", np.array([1.0], dtype=np.float32))
        w.grad = np.zeros(1, dtype=np.float32)
        ad.AdamW(store, ad.OptimConfig(lr=1.0, weight_decay=0.1)).step()
        assert np.allclose(w.data, 0.9)

    def test_zero_grad_zero_decay_is_identity(self):
        store = ad.ParamStore()
        w = store.add("w", np.array([1.0, -2.0], dtype=np.float32))
        w.grad = np.zeros(2, dtype=np.float32)
        ad.AdamW(store, ad.OptimConfig(lr=0.5)).step()
        assert np.array_equal(w.data, np.array([1.0, -2.0], dtype=np.float32))

    def test_quadratic_bowl_monotone(self):
        store = ad.ParamStore()
        w = store.add("w", np.array([3.0, -2.0], dtype=np.float64))
        opt = ad.AdamW(store, ad.OptimConfig(lr=0.05))
        losses = []
        for _ in range(20):
            loss = ad.reduce_sum(ad.mul(w, w))
            store.zero_grad()
            loss.backward()
            losses.append(loss.item())
            opt.step()
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_nonfinite_gradient_names_parameter(self):
        store = ad.ParamStore()
        w = store.add("layers/w0", np.ones(2, dtype=np.float32))
        w.grad = np.array([np.nan, 0.0], dtype=np.float32)
        with pytest.raises(ad.AutodiffError, match="layers/w0"):
            ad.AdamW(store, ad.OptimConfig()).step()

    def test_grad_norm_clip(self):
        store = ad.ParamStore()
        a = store.add("a", np.zeros(3, dtype=np.float32))
        a.grad = np.array([3.0, 4.0, 0.0], dtype=np.float32)
        norm = ad.clip_grad_norm(store, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.linalg.norm(a.grad) == pytest.approx(1.0, rel=1e-6)


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(12)
        params = {"enc/w": rng.standard_normal((4, 6)).astype(np.float32),
                  "enc/b": rng.standard_normal(6).astype(np.float32)}
        opt = {"adamw/step": np.array([7.0], dtype=np.float32),
               "adamw/m/enc/w": rng.standard_normal((4, 6)).astype(np.float32)}
        p = tmp_path / "ckpt.bin"
        ad.save_checkpoint(p, params, opt, meta={"arch": "toy", "hidden": 4})
        loaded, opt2, meta = ad.load_checkpoint(p)
        assert meta == {"arch": "toy", "hidden": 4}
        for k in params:
            assert np.array_equal(loaded[k], params[k])
        for k in opt:
            assert np.array_equal(opt2[k], opt[k])

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(ad.AutodiffError, match="not a checkpoint"):
            ad.load_checkpoint(p)

    def test_store_roundtrip_through_optimizer(self, tmp_path):
        rng = np.random.default_rng(13)
        store = ad.ParamStore()
        w = store.add("w", rng.standard_normal((3, 3)).astype(np.float32))
        opt = ad.AdamW(store, ad.OptimConfig(lr=1e-3, weight_decay=1e-5))
        for _ in range(3):
            loss = ad.reduce_sum(ad.mul(w, w))
            loss.backward()
            opt.step()
        p = tmp_path / "c.bin"
        ad.save_checkpoint(p, store.state_dict(), opt.state_dict())
        params, opt_state, _ = ad.load_checkpoint(p)
        store2 = ad.ParamStore()
        store2.add("w", np.zeros((3, 3), dtype=np.float32))
        store2.load_state_dict(params)
        opt2 = ad.AdamW(store2, ad.OptimConfig(lr=1e-3, weight_decay=1e-5))
        opt2.load_state_dict(opt_state)
        assert np.array_equal(store2["w"].data, store["w"].data)
        assert opt2.step_count == 3
