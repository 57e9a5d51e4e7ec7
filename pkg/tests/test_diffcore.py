import io

import numpy as np
import numpy.testing as npt
import pytest

import vlab.diffcore as dc
from vlab.errors import ContractError, DataError, ShapeError


def rand(shape, seed, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


class TestMatmul:
    def test_identity(self):
        eye = dc.Tensor(np.eye(2))
        npt.assert_array_equal(dc.matmul(eye, eye).data, np.eye(2))

    def test_hand_expansion(self):
        # [[1*1+2*1], [3*1+4*1]] = [[3], [7]]
        a = dc.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = dc.Tensor([[1.0], [1.0]])
        npt.assert_array_equal((a @ b).data, [[3.0], [7.0]])

    def test_shape_error_names_both_shapes(self):
        a = dc.Tensor(np.zeros((3, 5)))
        b = dc.Tensor(np.zeros((4, 2)))
        with pytest.raises(ShapeError, match=r"\(3, 5\).*\(4, 2\)"):
            dc.matmul(a, b)

    def test_batched_against_loop(self):
        a = rand((4, 3, 5), 0)
        b = rand((5, 2), 1)
        got = dc.matmul(dc.Tensor(a), dc.Tensor(b)).data
        want = np.stack([a[i] @ b for i in range(4)])
        npt.assert_allclose(got, want, rtol=0, atol=0)


class TestSoftmax:
    def test_uniform(self):
        out = dc.softmax(dc.Tensor([0.0, 0.0, 0.0]), axis=-1)
        npt.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_huge_logits_no_overflow(self):
        out = dc.softmax(dc.Tensor([1000.0, 1000.0]), axis=-1)
        npt.assert_allclose(out.data, [0.5, 0.5], atol=0)

    def test_two_logit_hand_value(self):
        # e / (e + 1) = 0.73105857863...
        out = dc.softmax(dc.Tensor([1.0, 0.0]), axis=-1)
        npt.assert_allclose(out.data, [0.7310585786300049, 0.2689414213699951], atol=1e-12)

    def test_rows_sum_to_one(self):
        x = rand((6, 9), 2, -30, 30)
        out = dc.softmax(dc.Tensor(x), axis=1)
        npt.assert_allclose(out.data.sum(axis=1), np.ones(6), atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        x = dc.Tensor(rand((3, 4), 3), requires_grad=True)
        x.sum().backward()
        npt.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_at_three(self):
        x = dc.Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_softmax_cross_entropy_matches_central_differences(self):
        logits = rand((1, 5), 4, -2, 2)
        target = np.array([2])
        x = dc.Tensor(logits, requires_grad=True)
        dc.cross_entropy(x, target).mean().backward()
        analytic = x.grad.copy()

        h = 1e-5
        numeric = np.zeros_like(logits)
        for i in range(5):
            for sign, slot in ((1, 0), (-1, 1)):
                pert = logits.copy()
                pert[0, i] += sign * h
                val = dc.cross_entropy(dc.Tensor(pert), target).mean().item()
                numeric[0, i] += sign * val
        numeric /= 2 * h
        npt.assert_allclose(analytic, numeric, rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = dc.Tensor(rand((3,), 5), requires_grad=True)
        with pytest.raises(ContractError):
            (x * x).backward()

    def test_accumulation_across_uses(self):
        # y = x*a + x*b must give grad(x) = a + b
        x = dc.Tensor(2.0, requires_grad=True)
        a, b = dc.Tensor(3.0), dc.Tensor(5.0)
        (x * a + x * b).backward()
        assert x.grad == pytest.approx(8.0)

    def test_accumulation_is_sum_of_single_use_grads(self):
        base = rand((4,), 6)
        x1 = dc.Tensor(base, requires_grad=True)
        (x1 * x1).sum().backward()
        twice = x1.grad.copy()

        x2 = dc.Tensor(base, requires_grad=True)
        (x2 * dc.Tensor(base)).sum().backward()
        once = x2.grad.copy()
        npt.assert_allclose(twice, 2 * once, rtol=1e-12)


class TestGradCheck:
    def test_sum_of_squares_tight(self):
        # coords bounded away from zero so the relative error is meaningful
        vals = rand((8,), 7, 0.5, 2.0) * np.sign(rand((8,), 8))
        x = dc.Tensor(vals, requires_grad=True)
        report = dc.grad_check(lambda t: (t * t).sum(), x, h=1e-5, tol=1e-8)
        assert report.passed, str(report)

    def test_corrupted_backward_fails(self):
        # hand-built op computing x^2 forward but claiming d/dx = 3x
        def bad_square(t):
            out = dc.Tensor(t.data**2)
            out.requires_grad = True
            out._parents = (t,)

            def backward(g):
                t._accum(g * 3.0 * t.data)

            out._backward = backward
            return out

        x = dc.Tensor(rand((4,), 9, 0.5, 1.5), requires_grad=True)
        report = dc.grad_check(lambda t: bad_square(t).sum(), x, tol=1e-4)
        assert not report.passed

    def test_restores_input(self):
        vals = rand((5,), 10)
        x = dc.Tensor(vals.copy(), requires_grad=True)
        dc.grad_check(lambda t: (t * t).sum(), x)
        npt.assert_array_equal(x.data, vals)


def fd_check(f, x, tol=1e-4, **kw):
    t = dc.Tensor(x, requires_grad=True)
    report = dc.grad_check(f, t, tol=tol, **kw)
    assert report.passed, str(report)


class TestPerOpGradients:
    """Every differentiable op against central differences on random input."""

    def test_add_broadcast(self):
        b = dc.Tensor(rand((4,), 11), requires_grad=True)
        fd_check(lambda t: (t + b).sum() * 1.5, rand((3, 4), 12))
        fd_check(lambda t: (dc.Tensor(rand((3, 4), 13)) + t).sum(), rand((4,), 14))

    def test_mul_broadcast(self):
        fd_check(lambda t: (t * dc.Tensor(rand((5,), 15))).mean(), rand((2, 5), 16))

    def test_matmul_both_sides(self):
        b = rand((4, 3), 17)
        fd_check(lambda t: (t @ dc.Tensor(b)).sum(), rand((2, 4), 18))
        a = rand((2, 4), 19)
        fd_check(lambda t: (dc.Tensor(a) @ t).sum(), b)

    def test_matmul_batched_weight_grad(self):
        a = rand((3, 2, 4), 20)
        fd_check(lambda t: (dc.Tensor(a) @ t).sum(), rand((4, 2), 21))

    def test_transpose(self):
        fd_check(lambda t: (t.transpose((1, 0, 2)) * 2.0).sum(), rand((2, 3, 4), 22))

    def test_reshape(self):
        fd_check(lambda t: (t.reshape(6) * dc.Tensor(rand((6,), 23))).sum(), rand((2, 3), 24))

    def test_concat(self):
        b = dc.Tensor(rand((2, 3), 25), requires_grad=True)
        fd_check(lambda t: dc.concat([t, b], axis=1).sum(), rand((2, 2), 26))

    def test_getitem(self):
        fd_check(lambda t: (t[1:, :2] * 3.0).sum(), rand((3, 4), 27))

    def test_take_rows(self):
        ids = np.array([0, 2, 2, 1])
        fd_check(lambda t: dc.take_rows(t, ids).sum(), rand((3, 4), 28))

    def test_softmax(self):
        fd_check(lambda t: (dc.softmax(t, axis=1) * dc.Tensor(rand((3, 5), 29))).sum(), rand((3, 5), 30))

    def test_layer_norm(self):
        fd_check(lambda t: (dc.layer_norm(t) * dc.Tensor(rand((2, 6), 31))).sum(), rand((2, 6), 32))

    def test_gelu(self):
        fd_check(lambda t: dc.gelu(t).sum(), rand((3, 4), 33, -3, 3))

    def test_cross_entropy(self):
        targets = np.array([1, 0, 3])
        fd_check(lambda t: dc.cross_entropy(t, targets).mean(), rand((3, 4), 34, -2, 2))

    def test_mean_axis(self):
        fd_check(lambda t: (t.mean(axis=1) * dc.Tensor(rand((3,), 35))).sum(), rand((3, 4), 36))

    def test_sum_keepdims(self):
        fd_check(lambda t: (t.sum(axis=0, keepdims=True) * 2.0).sum(), rand((3, 4), 37))

    def test_pow_scalar(self):
        fd_check(lambda t: dc.pow_scalar(t, -0.5).sum(), rand((4,), 38, 0.5, 2.0))


class TestTapeAndDeterminism:
    def test_topological_order(self):
        x = dc.Tensor(rand((3,), 39), requires_grad=True)
        y = dc.softmax(x * x + x, axis=0).sum()
        order = dc.topo_order(y)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]

    def test_forward_bit_identical_across_runs(self):
        def run():
            x = dc.Tensor(rand((4, 4), 40))
            w = dc.Tensor(rand((4, 4), 41))
            return dc.softmax(dc.gelu(x @ w), axis=-1).data.tobytes()

        assert run() == run()

    def test_guard_catches_nonfinite(self):
        dc.enable_guard(True)
        try:
            with pytest.raises(ContractError):
                dc.pow_scalar(dc.Tensor([0.0]), -1.0)
        finally:
            dc.enable_guard(False)

    def test_no_grad_skips_graph(self):
        x = dc.Tensor(rand((2,), 42), requires_grad=True)
        with dc.no_grad():
            y = x * x
        assert y._backward is None and not y.requires_grad


class TestContainer:
    def test_round_trip(self):
        arr = rand((2, 3, 4), 43).astype(np.float32)
        buf = io.BytesIO()
        dc.write_tensor(buf, arr)
        buf.seek(0)
        npt.assert_array_equal(dc.read_tensor(buf), arr)

    def test_bytes_are_stable(self):
        arr = rand((5, 5), 44)
        a, b = io.BytesIO(), io.BytesIO()
        dc.write_tensor(a, arr)
        dc.write_tensor(b, arr)
        assert a.getvalue() == b.getvalue()

    def test_layout(self):
        buf = io.BytesIO()
        dc.write_tensor(buf, np.zeros((2, 3), dtype=np.float32))
        raw = buf.getvalue()
        assert raw[:8] == b"VLABTNSR"
        assert raw[8:12] == (2).to_bytes(4, "little")
        assert raw[12:16] == (2).to_bytes(4, "little")
        assert raw[16:20] == (3).to_bytes(4, "little")
        assert len(raw) == 20 + 4 * 6

    def test_bad_magic_rejected(self):
        with pytest.raises(DataError):
            dc.read_tensor(io.BytesIO(b"NOTMAGIC" + b"\0" * 16))

    def test_file_round_trip(self, tmp_path):
        arr = rand((7,), 45).astype(np.float32)
        path = tmp_path / "t.bin"
        dc.save_tensor(path, arr)
        npt.assert_array_equal(dc.load_tensor(path), arr)
