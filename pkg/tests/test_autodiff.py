"""Value and gradient semantics of the tape autodiff kernel."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tkgqa import autodiff as ad
from tkgqa.autodiff import Tape, Tensor, grad_check
from tkgqa.errors import ContractViolation, GradCheckError


def finite_arrays(shape, lo=-3.0, hi=3.0):
    return st.lists(
        st.floats(min_value=lo, max_value=hi, allow_nan=False),
        min_size=int(np.prod(shape)),
        max_size=int(np.prod(shape)),
    ).map(lambda xs: np.asarray(xs).reshape(shape))


# ---------------------------------------------------------------------------
# Scalar chains


def test_product_with_self_doubles_gradient():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        y = ad.add(ad.mul(x, x), x)
        tape.backward(y)
    assert y.item() == 6.0
    assert x.grad == pytest.approx(5.0)


def test_scale_and_negation_gradients():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = -x * 4.0
        tape.backward(y)
    assert y.item() == -12.0
    assert x.grad == pytest.approx(-4.0)


def test_gradients_accumulate_across_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.matmul(x, ad.add(x, x))
        tape.backward(y)
    # d/dx (2 x.x) = 4x
    np.testing.assert_allclose(x.grad, np.array([4.0, 8.0]))


def test_backward_is_deterministic_bitwise():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    v = Tensor(rng.normal(size=4), requires_grad=True)

    def run():
        w.zero_grad()
        v.zero_grad()
        with Tape() as tape:
            out = ad.softmax_cross_entropy(ad.matmul(w, ad.relu(v)), [1])
            tape.backward(out)
        return w.grad.copy(), v.grad.copy()

    gw1, gv1 = run()
    gw2, gv2 = run()
    assert np.array_equal(gw1, gw2)
    assert np.array_equal(gv1, gv2)


# ---------------------------------------------------------------------------
# Tape discipline


def test_nested_tapes_are_rejected():
    with Tape():
        with pytest.raises(ContractViolation):
            with Tape():
                pass


def test_ops_without_tape_do_not_track():
    x = Tensor(1.0, requires_grad=True)
    y = ad.mul(x, x)
    assert not y.requires_grad
    assert x.grad is None


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.add(x, x)
        with pytest.raises(ContractViolation):
            tape.backward(y)


def test_backward_root_must_be_tracked():
    x = Tensor(2.0)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ContractViolation):
        tape.backward(y)


# ---------------------------------------------------------------------------
# Shaped primitives


def test_matmul_rank_combinations_match_numpy():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(2, 3))
    n = rng.normal(size=(3, 4))
    v = rng.normal(size=3)
    np.testing.assert_allclose(ad.matmul(Tensor(m), Tensor(n)).data, m @ n)
    np.testing.assert_allclose(ad.matmul(Tensor(m), Tensor(v)).data, m @ v)
    np.testing.assert_allclose(ad.matmul(Tensor(v), Tensor(n)).data, v @ n)
    np.testing.assert_allclose(ad.matmul(Tensor(v), Tensor(v)).data, v @ v)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ContractViolation):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_transpose_gradient_transposes_back():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        out = ad.mean(ad.reshape(ad.transpose(w), (6,)), axis=0)
        tape.backward(out)
    np.testing.assert_allclose(w.grad, np.full((2, 3), 1.0 / 6.0))


def test_mean_over_empty_axis_raises():
    with pytest.raises(ContractViolation):
        ad.mean(Tensor(np.zeros((0, 2))), axis=0)


def test_concat_backward_routes_slices():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        joined = ad.concat([a, b], axis=0)
        out = ad.mean(ad.gather_rows(joined, [0, 4]), axis=0)
        out = ad.mean(out, axis=0)
        tape.backward(out)
    assert a.grad[0].sum() > 0 and a.grad[1].sum() == 0
    assert b.grad[2].sum() > 0 and b.grad[:2].sum() == 0


def test_gather_duplicate_indices_accumulate():
    table = Tensor(np.eye(3), requires_grad=True)
    with Tape() as tape:
        rows = ad.gather_rows(table, [1, 1])
        out = ad.mean(ad.mean(rows, axis=0), axis=0)
        tape.backward(out)
    assert table.grad[1].sum() == pytest.approx(1.0)
    assert table.grad[0].sum() == 0.0


def test_scatter_add_sums_duplicate_destinations():
    rows = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    out = ad.scatter_add_rows(rows, [0, 2, 0], n_rows=3)
    np.testing.assert_allclose(out.data, [[6.0, 8.0], [0.0, 0.0], [3.0, 4.0]])


def test_combine_bases_matches_einsum():
    rng = np.random.default_rng(2)
    coeffs = rng.normal(size=(5, 3))
    bases = rng.normal(size=(3, 4, 4))
    got = ad.combine_bases(Tensor(coeffs), Tensor(bases)).data
    np.testing.assert_allclose(got, np.einsum("rb,bij->rij", coeffs, bases))


def test_batched_vecmat_matches_loop():
    rng = np.random.default_rng(3)
    mats = rng.normal(size=(4, 3, 3))
    vecs = rng.normal(size=(4, 3))
    got = ad.batched_vecmat(Tensor(mats), Tensor(vecs)).data
    want = np.stack([m @ v for m, v in zip(mats, vecs)])
    np.testing.assert_allclose(got, want)


# ---------------------------------------------------------------------------
# Nonlinearities and norms


def test_relu_kink_has_zero_gradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        out = ad.mean(ad.relu(x), axis=0)
        tape.backward(out)
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 1.0 / 3.0])


def test_sigmoid_is_stable_at_extremes():
    out = ad.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0])))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0], atol=1e-12)


def test_l2_norm_of_zero_vector_has_zero_gradient():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        out = ad.l2_norm(x)
        tape.backward(out)
    assert out.item() == 0.0
    assert x.grad is None or not np.any(x.grad)


def test_cosine_of_orthogonal_vectors_is_zero():
    a = Tensor(np.array([1.0, 0.0]))
    b = Tensor(np.array([0.0, 5.0]))
    assert ad.cosine_similarity(a, b).item() == pytest.approx(0.0)


def test_cosine_zero_norm_operand_yields_zero_without_gradient():
    a = Tensor(np.zeros(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = ad.cosine_similarity(a, b)
        tape.backward(out)
    assert out.item() == 0.0
    assert a.grad is None or not np.any(a.grad)
    assert b.grad is None or not np.any(b.grad)


def test_cosine_is_scale_invariant():
    rng = np.random.default_rng(4)
    a = rng.normal(size=5)
    b = rng.normal(size=5)
    c1 = ad.cosine_similarity(Tensor(a), Tensor(b)).item()
    c2 = ad.cosine_similarity(Tensor(7.0 * a), Tensor(0.3 * b)).item()
    assert c1 == pytest.approx(c2)


def test_rowwise_cosine_matches_scalar_cosine_rowwise():
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(4, 6))
    rows[2] = 0.0
    v = rng.normal(size=6)
    got = ad.rowwise_cosine(Tensor(rows), Tensor(v)).data
    want = [ad.cosine_similarity(Tensor(r), Tensor(v)).item() for r in rows]
    np.testing.assert_allclose(got, want)
    assert got[2] == 0.0


# ---------------------------------------------------------------------------
# Cross entropy over candidate subsets


def test_cross_entropy_equals_negative_log_target_mass():
    logits = np.array([0.5, -1.0, 2.0, 0.0])
    targets = [0, 2]
    loss = ad.softmax_cross_entropy(Tensor(logits), targets).item()
    p = np.exp(logits - logits.max())
    p /= p.sum()
    assert loss == pytest.approx(-np.log(p[0] + p[2]))
    assert loss >= 0.0


def test_cross_entropy_deduplicates_targets():
    logits = Tensor(np.array([1.0, 2.0, 3.0]))
    a = ad.softmax_cross_entropy(logits, [1, 1, 2]).item()
    b = ad.softmax_cross_entropy(logits, [1, 2]).item()
    assert a == pytest.approx(b)


def test_cross_entropy_rejects_bad_targets():
    logits = Tensor(np.zeros(3))
    with pytest.raises(ContractViolation):
        ad.softmax_cross_entropy(logits, [])
    with pytest.raises(ContractViolation):
        ad.softmax_cross_entropy(logits, [3])


def test_full_target_set_gives_zero_loss():
    loss = ad.softmax_cross_entropy(Tensor(np.array([5.0, -2.0])), [0, 1])
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_batch_cross_entropy_is_mean_of_rows():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(3, 5))
    targets = [1, 4, 0]
    batch = ad.softmax_cross_entropy_batch(Tensor(logits), targets).item()
    singles = [ad.softmax_cross_entropy(Tensor(row), [t]).item() for row, t in zip(logits, targets)]
    assert batch == pytest.approx(np.mean(singles))


@settings(max_examples=30, deadline=None)
@given(finite_arrays((6,)), st.sets(st.integers(min_value=0, max_value=5), min_size=1))
def test_cross_entropy_mass_identity(logits, targets):
    loss = ad.softmax_cross_entropy(Tensor(logits), sorted(targets)).item()
    p = np.exp(logits - logits.max())
    p /= p.sum()
    mass = sum(p[i] for i in targets)
    assert loss >= -1e-12
    assert np.exp(-loss) == pytest.approx(mass, rel=1e-9)


# ---------------------------------------------------------------------------
# Finite-difference agreement


def test_grad_check_on_composite_network():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    v = Tensor(rng.normal(size=4), requires_grad=True)
    rows = Tensor(rng.normal(size=(5, 4)))

    def f():
        hidden = ad.relu(ad.matmul(w, v))
        cos = ad.rowwise_cosine(rows, hidden)
        return ad.softmax_cross_entropy(ad.scale(cos, 6.0), [2, 3])

    assert grad_check(f, [w, v]) < 1e-6


def test_grad_check_rejects_untracked_parameters():
    p = Tensor(np.ones(2))
    with pytest.raises(GradCheckError):
        grad_check(lambda: ad.mean(p, axis=0), [p])


@settings(max_examples=20, deadline=None)
@given(finite_arrays((3, 3)), finite_arrays((3,)))
def test_matmul_sigmoid_chain_gradients_match_numeric(m, v):
    w = Tensor(m, requires_grad=True)
    x = Tensor(v, requires_grad=True)

    def f():
        return ad.mean(ad.sigmoid(ad.matmul(w, x)), axis=0)

    assert grad_check(f, [w, x]) < 1e-5


@settings(max_examples=20, deadline=None)
@given(finite_arrays((4, 3)))
def test_scatter_gather_roundtrip_gradients_match_numeric(rows):
    t = Tensor(rows, requires_grad=True)

    def f():
        spread = ad.scatter_add_rows(ad.gather_rows(t, [0, 2, 2, 1]), [1, 0, 1, 1], n_rows=2)
        return ad.mean(ad.mean(spread, axis=0), axis=0)

    assert grad_check(f, [t]) < 1e-5
