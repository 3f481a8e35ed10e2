import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cobalt import conceptvq
from cobalt import tensorcore as tc
from cobalt.conceptvq import ConceptDictionary


def test_equidistant_slot_gets_uniform_column():
    # four codes on the unit circle around zbar = (1, 0)
    codes = np.array([[1.0, 1.0], [1.0, -1.0], [2.0, 0.0], [0.0, 0.0]])
    p = conceptvq.assign_student(np.array([[3.0, 0.0]]), codes, 0.1).values
    np.testing.assert_allclose(p[:, 0], 0.25, atol=1e-12)


def test_single_code_column_is_one():
    p = conceptvq.assign_student(np.random.default_rng(0).normal(size=(3, 4)), np.ones((1, 4)), 0.1).values
    np.testing.assert_allclose(p, 1.0)
    assert conceptvq.assign_teacher(np.random.default_rng(1).normal(size=(5, 4)), np.ones((1, 4))).tolist() == [0] * 5


def test_scalar_assignment_oracle():
    p = conceptvq.assign_student(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0], [1.0, 0.0]]), 0.1).values[:, 0]
    d2 = conceptvq.squared_distances(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 0.0]])).values[:, 0]
    np.testing.assert_allclose(d2, [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(p, [np.exp(-10) / (1 + np.exp(-10)), 1 / (1 + np.exp(-10))], rtol=1e-12)
    assert p[0] == pytest.approx(4.54e-5, rel=1e-2)


def test_student_slots_are_normalized_but_codes_are_not():
    codes = np.array([[2.0, 0.0], [0.9, 0.0]])
    a = conceptvq.assign_student(np.array([[5.0, 0.0]]), codes, 0.1).values
    b = conceptvq.assign_student(np.array([[1.0, 0.0]]), codes, 0.1).values
    np.testing.assert_allclose(a, b)
    assert a[1, 0] > a[0, 0]


def test_teacher_matches_exhaustive_scan():
    rng = np.random.default_rng(2)
    for _ in range(20):
        codes, z = rng.normal(size=(8, 4)), rng.normal(size=(6, 4))
        zb = z / np.linalg.norm(z, axis=1, keepdims=True)
        expect = []
        for j in range(6):
            best, best_d = 0, np.inf
            for i in range(8):
                d = float(np.sum((codes[i] - zb[j]) ** 2))
                if d < best_d:
                    best, best_d = i, d
            expect.append(best)
        assert conceptvq.assign_teacher(z, codes).tolist() == expect


def test_teacher_tie_goes_to_lowest_index():
    codes = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [1.0, 0.0]])
    assert conceptvq.assign_teacher(np.array([[1.0, 0.0]]), codes).tolist() == [1]


def test_zero_slot_rejected():
    with pytest.raises(ValueError, match="slot"):
        conceptvq.assign_student(np.zeros((1, 3)), np.ones((2, 3)), 0.1)
    with pytest.raises(ValueError, match="slot"):
        conceptvq.assign_teacher(np.zeros((1, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError, match="temperature"):
        conceptvq.assign_student(np.ones((1, 3)), np.ones((2, 3)), 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 10.0))
def test_teacher_is_argmax_of_student_for_any_temperature(seed, tau):
    rng = np.random.default_rng(seed)
    codes, z = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    d2 = conceptvq.squared_distances(codes, z / np.linalg.norm(z, axis=1, keepdims=True)).values
    gaps = np.sort(d2, axis=0)
    if np.any(gaps[1] - gaps[0] < 1e-9):
        return
    p = conceptvq.assign_student(z, codes, tau).values
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-9)
    assert conceptvq.assign_teacher(z, codes).tolist() == np.argmax(p, axis=0).tolist()


# codebook EMA


def test_one_step_update_arithmetic_and_untouched_codes():
    d = ConceptDictionary(np.array([[1.0, 0.0], [0.3, -0.7]]), alpha=0.9)
    untouched = d.codes[1].copy()
    conceptvq.update_codebook(d, np.array([[0.0, 1.0]]), np.array([0]))
    np.testing.assert_allclose(d.codes[0], [0.9, 0.1], atol=1e-15)
    assert d.codes[1].tobytes() == untouched.tobytes()
    assert d.usage.tolist() == [1, 0]


def test_update_uses_mean_and_only_active_slots():
    d = ConceptDictionary(np.zeros((2, 2)), alpha=0.5)
    z = np.array([[[2.0, 0.0], [0.0, 2.0], [9.0, 9.0]]])
    p = np.array([[0, 0, 0]])
    active = np.array([[True, True, False]])
    conceptvq.update_codebook(d, z, p, active)
    np.testing.assert_allclose(d.codes[0], [0.5, 0.5])
    assert d.usage.tolist() == [2, 0]


def test_update_rejects_out_of_range_assignment():
    d = ConceptDictionary(np.zeros((2, 2)))
    with pytest.raises(IndexError):
        conceptvq.update_codebook(d, np.ones((1, 2)), np.array([2]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_update_is_a_convex_combination_and_usage_monotone(seed, alpha):
    rng = np.random.default_rng(seed)
    d = ConceptDictionary(rng.normal(size=(4, 3)), alpha=alpha)
    old = d.codes.copy()
    usage_before = d.usage.copy()
    z, p = rng.normal(size=(10, 3)), rng.integers(0, 4, 10)
    conceptvq.update_codebook(d, z, p)
    assert np.all(d.usage >= usage_before)
    for j in range(4):
        if not np.any(p == j):
            assert d.codes[j].tobytes() == old[j].tobytes()
            continue
        mean = z[p == j].mean(axis=0)
        np.testing.assert_allclose(d.codes[j], alpha * old[j] + (1 - alpha) * mean, atol=1e-12)


def test_dictionary_validation_and_json_round_trip(tmp_path):
    with pytest.raises(ValueError):
        ConceptDictionary(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        ConceptDictionary(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        ConceptDictionary(np.zeros((2, 2)), alpha=2.0)
    d = ConceptDictionary.init(8, 4, rng=np.random.default_rng(3))
    conceptvq.update_codebook(d, np.ones((3, 4)), np.array([1, 1, 5]))
    d.save(tmp_path / "c.json")
    back = ConceptDictionary.load(tmp_path / "c.json")
    np.testing.assert_array_equal(back.codes, d.codes)
    assert back.usage.tolist() == d.usage.tolist() and back.alpha == 0.9
    assert set(d.to_json()) == {"K", "d", "alpha_c", "codes", "usage"}


def test_init_scale():
    d = ConceptDictionary.init(2000, 16, rng=np.random.default_rng(4))
    assert d.codes.std() == pytest.approx(0.25, rel=0.05)


# distillation loss


def test_vq_loss_examples():
    p_t = np.array([2, 0, 1])
    one_hot = np.eye(4)[:, p_t]
    assert float(conceptvq.vq_loss(one_hot, p_t, np.ones(3, bool)).values) == pytest.approx(0.0, abs=1e-12)
    uniform = np.full((4, 3), 0.25)
    assert float(conceptvq.vq_loss(uniform, p_t, np.zeros(3, bool)).values) == 0.0
    assert float(conceptvq.vq_loss(uniform, p_t, np.ones(3, bool)).values) == pytest.approx(3 * np.log(4))


def test_vq_loss_batch_mean_and_shape_check():
    uniform = np.full((2, 4, 3), 0.25)
    p_t = np.zeros((2, 3), int)
    gate = np.array([[True, True, True], [True, False, False]])
    assert float(conceptvq.vq_loss(uniform, p_t, gate).values) == pytest.approx(2 * np.log(4))
    with pytest.raises(ValueError):
        conceptvq.vq_loss(uniform, p_t[:, :2], gate)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.9))
def test_vq_loss_nonincreasing_in_assigned_probability(seed, boost):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4), size=3).T
    p_t = rng.integers(0, 4, 3)
    gate = np.ones(3, bool)
    base = float(conceptvq.vq_loss(p, p_t, gate).values)
    q = p.copy()
    i = int(rng.integers(0, 3))
    target = q[p_t[i], i] + boost * (1 - q[p_t[i], i])
    rest = np.delete(np.arange(4), p_t[i])
    q[rest, i] *= (1 - target) / q[rest, i].sum()
    q[p_t[i], i] = target
    assert float(conceptvq.vq_loss(q, p_t, gate).values) <= base + 1e-12


def test_vq_gradient_reaches_student_only():
    rng = np.random.default_rng(5)
    z_s = tc.Tensor(rng.normal(size=(3, 6)), True, "z_s")
    codes = tc.Tensor(rng.normal(size=(4, 6)), False, "codes")
    z_t = rng.normal(size=(3, 6))
    p_t = conceptvq.assign_teacher(z_t, codes.values)
    gate = np.array([True, False, True])
    loss = lambda: conceptvq.vq_loss(conceptvq.assign_student(z_s, codes.values, 0.1), p_t, gate)
    assert tc.grad_check(loss, [z_s]) <= 1e-4
    with tc.Tape() as tape:
        out = loss()
    tape.backward(out)
    assert codes.grad is None


def test_codes_in_use_counts_active_only():
    p_t = np.array([[0, 1, 1], [2, 2, 3]])
    active = np.array([[True, True, False], [False, True, False]])
    assert conceptvq.codes_in_use(p_t) == 4
    assert conceptvq.codes_in_use(p_t, active) == 3
