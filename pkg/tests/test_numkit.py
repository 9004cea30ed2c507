import numpy as np
import pytest

from offcritic import numkit as nk
from offcritic.numkit import Tape, Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_matmul_identity():
    b = Tensor([[3.0, 1.0], [2.0, 7.0]])
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(nk.matmul(eye, b).data, b.data)


def test_matmul_hand_case():
    out = nk.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nk.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        nk.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_softmax_symmetry():
    out = nk.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_extreme_logits_no_overflow():
    out = nk.softmax(Tensor([1000.0, 0.0]))
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)


def test_softmax_against_high_precision_oracle():
    import mpmath

    mpmath.mp.dps = 50
    xs = [1.0, 2.0, 3.0]
    es = [mpmath.e ** x for x in xs]
    tot = sum(es)
    expected = np.array([float(e / tot) for e in es])
    out = nk.softmax(Tensor(xs))
    np.testing.assert_allclose(out.data, expected, rtol=1e-14)


def test_softmax_sums_to_one_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = rng.normal(scale=rng.uniform(0.1, 50), size=(3, 5))
        s = nk.softmax(Tensor(x), axis=-1).data.sum(axis=-1)
        np.testing.assert_allclose(s, 1.0, atol=1e-12)


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 4))
    a = nk.softmax(nk.tanh(Tensor(x))).data
    b = nk.softmax(nk.tanh(Tensor(x))).data
    assert np.array_equal(a, b)


def test_backward_sum_gives_ones():
    with Tape() as t:
        p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        t.backward(nk.tsum(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_zero_times_anything():
    with Tape() as t:
        p = Tensor([1.0, 2.0], requires_grad=True)
        t.backward(nk.tsum(nk.mul(0.0, nk.exp(p))))
    np.testing.assert_array_equal(p.grad, np.zeros(2))


def test_backward_non_scalar_rejected():
    with Tape() as t:
        p = Tensor([1.0, 2.0], requires_grad=True)
        out = nk.mul(p, 2.0)
        with pytest.raises(nk.NumkitError, match="scalar"):
            t.backward(out)


def test_backward_repeated_calls_accumulate():
    with Tape() as t:
        p = Tensor([2.0], requires_grad=True)
        loss = nk.tsum(nk.mul(p, p))
        t.backward(loss)
        t.backward(loss)
    np.testing.assert_allclose(p.grad, [8.0])


def test_backward_outside_tape_raises():
    with pytest.raises(nk.NumkitError, match="no active tape"):
        nk.backward(Tensor(1.0))


def test_no_tape_means_no_graph():
    p = Tensor([1.0], requires_grad=True)
    out = nk.mul(p, 3.0)
    assert out.is_leaf and not out.requires_grad


def test_gru_cell_zero_params_zero_state():
    rng = np.random.default_rng(0)
    p = nk.GRUParams.create(3, 4, rng)
    for t in vars(p).values():
        t.data[...] = 0.0
    out = nk.gru_cell(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 4))), p)
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_gru_sequence_matches_manual_unroll():
    rng = np.random.default_rng(3)
    p = nk.GRUParams.create(2, 3, rng)
    xs = [rng.normal(size=(1, 2)) for _ in range(3)]

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    h_ref = np.zeros((1, 3))
    for x in xs:
        z = sig(x @ p.wz.data + h_ref @ p.uz.data + p.bz.data)
        r = sig(x @ p.wr.data + h_ref @ p.ur.data + p.br.data)
        cand = np.tanh(x @ p.wc.data + (r * h_ref) @ p.uc.data + p.bc.data)
        h_ref = (1.0 - z) * h_ref + z * cand

    h = Tensor(np.zeros((1, 3)))
    for x in xs:
        h = nk.gru_cell(Tensor(x), h, p)
    np.testing.assert_allclose(h.data, h_ref, atol=1e-14)


def test_layer_norm_normalizes():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(3, 8)))
    g = Tensor(np.ones(8))
    b = Tensor(np.zeros(8))
    out = nk.layer_norm(x, g, b).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 5)))
    ce = nk.cross_entropy(logits, [1, 3])
    np.testing.assert_allclose(ce.item(), np.log(5.0), atol=1e-12)


# ---------------------------------------------------------------------------
# finite-difference oracles: every differentiable op, 20 random instances
# ---------------------------------------------------------------------------

REL_TOL = 1e-4

from offcritic.diagnostics import case_abs_floor, op_gradcheck_cases  # noqa: E402

OP_NAMES = [name for name, _ in op_gradcheck_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", OP_NAMES)
def test_gradients_match_finite_differences(name):
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        build, params = dict(op_gradcheck_cases(rng))[name]()
        err = nk.finite_difference_check(build, params,
                                         abs_floor=case_abs_floor(name))
        assert err < REL_TOL, f"{name} trial {trial}: rel err {err:.3e}"
