import numpy as np
import pytest

from cpfd import autodiff as ad
from cpfd.autodiff import Tensor, numerical_grad


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-8)


def grad_check(fn, *shapes, seed=0, positive=False):
    """Compare analytic and central-difference gradients of ``sum(w * fn(...))``."""
    rng = np.random.default_rng(seed)
    inputs = [Tensor(rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s), requires_grad=True)
              for s in shapes]
    probe = rng.normal(size=fn(*inputs).shape)

    def scalar():
        return ad.sum(ad.mul(fn(*inputs), probe))

    ad.backward(scalar())
    worst = 0.0
    for t in inputs:
        num = numerical_grad(lambda: scalar().item(), t.data)
        worst = max(worst, rel_err(t.grad, num))
    return worst


PRIMITIVES = {
    "add": (ad.add, [(2, 3), (2, 3)]),
    "add_broadcast": (ad.add, [(2, 3), (3,)]),
    "sub": (ad.sub, [(3, 2), (3, 2)]),
    "mul": (ad.mul, [(2, 2, 2), (2, 2, 2)]),
    "scale": (lambda a: ad.scale(a, -1.7), [(4, 3)]),
    "matmul": (ad.matmul, [(2, 3), (3, 4)]),
    "matmul_batched": (ad.matmul, [(2, 2, 3), (3, 2)]),
    "transpose": (ad.transpose, [(2, 3)]),
    "reshape": (lambda a: ad.reshape(a, (3, 2)), [(2, 3)]),
    "sum_axis0": (lambda a: ad.sum(a, axis=0), [(3, 4)]),
    "sum_axes": (lambda a: ad.sum(a, axis=(-1, -2)), [(2, 2, 3)]),
    "sum_all": (lambda a: ad.sum(a), [(3, 3)]),
    "softmax": (ad.softmax, [(3, 4)]),
    "log_softmax": (ad.log_softmax, [(2, 5)]),
    "exp": (ad.exp, [(2, 3)]),
    "gelu": (ad.gelu, [(4, 4)]),
    "sq_diff_sum": (ad.sq_diff_sum, [(2, 2, 2), (2, 2, 2)]),
    "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b), [(3, 4), (4,), (4,)]),
    "slice_last": (lambda a: ad.slice_last(a, 1, 3), [(2, 4)]),
    "concat": (lambda a, b: ad.concat([a, b]), [(2, 2), (2, 3)]),
    "stack": (lambda a, b: ad.stack([a, b], axis=1), [(2, 3), (2, 3)]),
}


class TestGradients:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_primitive_matches_finite_differences(self, name, seed):
        fn, shapes = PRIMITIVES[name]
        assert grad_check(fn, *shapes, seed=seed) < 1e-4

    def test_log(self):
        assert grad_check(ad.log, (3, 3), positive=True) < 1e-4

    def test_embedding(self):
        rng = np.random.default_rng(3)
        table = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        ids = np.array([[0, 2, 2], [4, 1, 0]])
        probe = rng.normal(size=(2, 3, 3))

        def f():
            return ad.sum(ad.mul(ad.embedding(table, ids), probe))

        ad.backward(f())
        num = numerical_grad(lambda: f().item(), table.data)
        assert rel_err(table.grad, num) < 1e-4

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        y = np.eye(5)[[0, 3, 3, 1]]

        def f():
            return ad.scale(ad.sum(ad.mul(ad.log(ad.softmax(logits)), y)), -0.25)

        ad.backward(f())
        num = numerical_grad(lambda: f().item(), logits.data, eps=1e-5)
        assert rel_err(logits.grad, num) < 1e-4

    def test_square_derivative(self):
        x = Tensor(3.0, requires_grad=True)
        ad.backward(ad.mul(x, x))
        assert x.grad == pytest.approx(6.0)

    def test_sum_gradient_broadcasts_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.sum(ad.sum(x, axis=1)))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


class TestForward:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_sum_identity(self):
        np.testing.assert_array_equal(ad.sum(Tensor(np.eye(2)), axis=0).data, [1.0, 1.0])

    def test_matmul_shape(self):
        assert ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))).shape == (2, 4)

    def test_softmax_rows_are_distributions(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            s = ad.softmax(Tensor(rng.normal(scale=5, size=(3, 7)))).data
            assert (s >= 0).all()
            np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        r1 = ad.softmax(ad.matmul(Tensor(a), Tensor(b))).data
        r2 = ad.softmax(ad.matmul(Tensor(a), Tensor(b))).data
        assert np.array_equal(r1, r2)


class TestErrors:
    def test_matmul_shape_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 4\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))))

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError, match="incompatible shapes"):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_non_scalar_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.scale(x, 2.0))

    def test_sq_diff_sum_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            ad.sq_diff_sum(Tensor(np.ones(3)), Tensor(np.ones(4)))


class TestTape:
    def test_topological_order(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = ad.mul(x, x)
        z = ad.sum(ad.add(y, x))
        tape = ad.Tape(z)
        pos = {n.node_id: i for i, n in enumerate(tape.nodes)}
        for n in tape.nodes:
            for p in n._parents:
                if p.requires_grad:
                    assert pos[p.node_id] < pos[n.node_id]

    def test_every_reachable_tensor_gets_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        mid = ad.exp(x)
        tape = ad.backward(ad.sum(mid))
        assert all(n.grad is not None and n.grad.shape == n.shape for n in tape.nodes)

    def test_repeated_backward_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        ad.backward(ad.mul(x, x))
        ad.backward(ad.mul(x, x))
        assert x.grad == pytest.approx(8.0)

    def test_constants_stay_off_tape(self):
        out = ad.mul(Tensor(np.ones(2)), Tensor(np.ones(2)))
        assert not out.requires_grad and out._parents == ()


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        np.testing.assert_array_equal(opt.m[0], 0.0)

    def test_first_step_moves_by_lr(self):
        # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps)
        p = Tensor(np.array(0.0), requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        p.grad = np.array(1.0)
        opt.step()
        assert p.data == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)

    def test_nan_aborts_step(self):
        p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(FloatingPointError):
            opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 1.0])
        assert opt.t == 0

    def test_seeded_runs_identical(self):
        def run():
            rng = np.random.Generator(np.random.PCG64(11))
            w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
            x = rng.normal(size=(5, 3))
            opt = ad.Adam([w], lr=0.05)
            for _ in range(20):
                opt.zero_grad()
                ad.backward(ad.sum(ad.mul(ad.matmul(x, w), ad.matmul(x, w))))
                opt.step()
            return w.data

        assert np.array_equal(run(), run())
