import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcd import losses as L
from dcd.errors import ConfigError, ShapeError, UsageError
from dcd.numeric import finite_diff_grad, max_relative_error

# Expected values below were evaluated directly with math.log/math.exp.
ITM_MARGIN_2 = math.log1p(math.exp(-2.0))  # 0.126928
ITM_MARGIN_M2 = math.log1p(math.exp(2.0))  # 2.126928


def test_nce_examples():
    sat = L.nce_loss([[30.0, 0.0, 0.0, 0.0]])
    assert sat.per_query_terms[0] < 1e-12
    for n in (2, 5, 8):
        assert L.nce_loss(np.zeros((1, n))).value == pytest.approx(math.log(n), abs=1e-12)
    assert L.nce_loss([[2.0, 0.0]]).value == pytest.approx(0.126928, abs=1e-6)


def test_nce_sums_over_queries():
    out = L.nce_loss([[2.0, 0.0], [0.0, 0.0]])
    assert out.value == pytest.approx(ITM_MARGIN_2 + math.log(2), abs=1e-12)
    assert out.value == pytest.approx(out.per_query_terms.sum(), abs=0)


def test_nce_empty_batch():
    with pytest.raises(UsageError):
        L.nce_loss(np.zeros((0, 3)))


@pytest.mark.parametrize("sp,sn,expected", [(1.0, 1.0, 0.693147), (2.0, 0.0, 0.126928), (-1.0, 1.0, 2.126928)])
def test_itm_examples(sp, sn, expected):
    assert L.itm_loss([[sp, sn]]).value == pytest.approx(expected, abs=1e-6)


def test_itm_requires_two_scores():
    with pytest.raises(UsageError):
        L.itm_loss([[1.0, 0.0, 0.0]])


def test_itm_hard_examples():
    s = np.random.default_rng(0).normal(size=(6, 2))
    assert L.itm_hard_loss(s).value == L.itm_loss(s).value
    assert L.itm_hard_loss(np.full((1, 8), 0.3)).value == pytest.approx(2.079442, abs=1e-6)
    assert L.itm_hard_loss([[1.0, 0.0, 0.0, 0.0]]).value == pytest.approx(0.743668, abs=1e-6)
    assert L.itm_hard_loss([[1.0, 0.0, 0.0, 0.0]]).value == pytest.approx(math.log(1 + 3 / math.e), abs=1e-12)


def test_itm_hard_candidate_length_check():
    class C:
        teacher_logits_adjusted = np.zeros(3)

    with pytest.raises(ShapeError):
        L.itm_hard_loss(np.zeros((1, 4)), [C()])


def test_kl_examples():
    z = np.random.default_rng(1).normal(size=(3, 5))
    assert L.kl_distill_loss(z, z).value == pytest.approx(0.0, abs=1e-15)
    assert L.kl_distill_loss([[0.0, 0.0]], [[math.log(3), 0.0]]).value == pytest.approx(0.130812, abs=1e-6)


def test_kl_temperature_scaling():
    s, t = [[0.0, 0.0]], [[math.log(3), 0.0]]
    # at tau=2 the teacher distribution is softmax([ln3/2, 0]) = [sqrt3, 1]/(sqrt3+1)
    p = math.sqrt(3) / (math.sqrt(3) + 1)
    expected = 4 * (p * math.log(p / 0.5) + (1 - p) * math.log((1 - p) / 0.5))
    assert L.kl_distill_loss(s, t, 2.0).value == pytest.approx(expected, abs=1e-12)


def test_kl_gibbs_fuzz():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = rng.integers(2, 10)
        s, t = rng.normal(scale=3, size=(1, n)), rng.normal(scale=3, size=(1, n))
        assert L.kl_distill_loss(s, t, rng.uniform(0.5, 4)).value >= 0.0


def test_kl_zero_iff_same_distribution():
    z = np.array([[0.3, -1.0, 2.0]])
    assert L.kl_distill_loss(z + 5.0, z).value == pytest.approx(0.0, abs=1e-14)
    assert L.kl_distill_loss(z * 1.1, z).value > 1e-6


def test_mse_examples():
    z = np.array([[1.0, 2.0, 3.0]])
    assert L.mse_distill_loss(z, z).value == 0.0
    assert L.mse_distill_loss([[1.0, -1.0]], [[0.0, 0.0]]).value == 2.0
    assert L.mse_distill_loss(L.DistillPair(np.array([3.0, 0.0, 1.0]), np.array([1.0, 1.0, 1.0]))).value == 5.0
    with pytest.raises(ShapeError):
        L.mse_distill_loss([[1.0, 2.0]], [[1.0, 2.0, 3.0]])


def test_mse_list_of_pairs():
    pairs = [L.DistillPair(np.array([3.0, 0.0, 1.0]), np.array([1.0, 1.0, 1.0])),
             L.DistillPair(np.array([1.0, -1.0, 0.0]), np.zeros(3))]
    out = L.mse_distill_loss(pairs)
    np.testing.assert_array_equal(out.per_query_terms, [5.0, 2.0])


def test_vanilla_kd_objective():
    mse, task = L.LossValue(2.0, np.array([2.0])), L.LossValue(4.0, np.array([4.0]))
    assert L.vanilla_kd_objective(mse, task, 0.0).value == 4.0
    assert L.vanilla_kd_objective(mse, task, 1.0).value == 2.0
    assert L.vanilla_kd_objective(mse, task, 0.5).value == 3.0
    with pytest.raises(ConfigError):
        L.vanilla_kd_objective(mse, task, 1.5)


def test_uncertainty_examples():
    assert L.teacher_uncertainty(np.zeros(8)) == pytest.approx(2.079442, abs=1e-6)
    assert L.teacher_uncertainty([30.0, 0.0, 0.0]) < 1e-9
    assert L.teacher_uncertainty([math.log(9.0), 0.0]) == pytest.approx(0.325083, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=10), st.randoms(use_true_random=False))
def test_uncertainty_bounded_and_permutation_invariant(z, rnd):
    u = L.teacher_uncertainty(z)
    assert 0.0 <= u <= math.log(len(z))
    perm = list(z)
    rnd.shuffle(perm)
    assert L.teacher_uncertainty(perm) == pytest.approx(u, abs=1e-12)


def test_uncertainty_batch_form():
    z = np.random.default_rng(3).normal(size=(4, 6))
    u = L.teacher_uncertainty(z)
    assert u.shape == (4,)
    assert u[2] == pytest.approx(L.teacher_uncertainty(z[2]), abs=0)


def test_hard_weights_examples():
    np.testing.assert_allclose(L.hard_label_weights([1.0, 1.0, 2.0]).weights, [0.25, 0.25, 0.5], atol=1e-15)
    np.testing.assert_allclose(L.hard_label_weights([0.7] * 5).weights, [0.2] * 5, atol=1e-15)
    np.testing.assert_allclose(L.hard_label_weights([0.2, 0.8]).weights, [0.2, 0.8], atol=1e-15)
    w = L.hard_label_weights([0.0, 0.0, 0.0])
    np.testing.assert_array_equal(w.weights, [1 / 3] * 3)
    assert w.kind == "hard"


def test_hard_weights_zero_entry_stays_positive():
    w = L.hard_label_weights([0.0, 1.0]).weights
    assert w[0] > 0 and abs(w.sum() - 1) <= 1e-9


def test_soft_weights_examples():
    np.testing.assert_allclose(L.soft_label_weights(L.WeightVector.uniform(4, "hard")).weights, [0.25] * 4,
                               atol=1e-15)
    c = L.soft_label_weights(L.WeightVector(np.array([0.2, 0.8]), "hard"))
    np.testing.assert_allclose(c.weights, [0.645656, 0.354344], atol=1e-6)
    assert c.kind == "soft"


def test_soft_weights_reverse_order_fuzz():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        k = rng.integers(2, 16)
        w = L.hard_label_weights(rng.uniform(0, 3, size=k))
        c = L.soft_label_weights(w).weights
        order = np.argsort(w.weights)
        # strictly larger w gives strictly smaller c
        for a, b in zip(order[:-1], order[1:]):
            if w.weights[b] > w.weights[a]:
                assert c[b] < c[a]


def test_weight_vector_validation():
    with pytest.raises(Exception):
        L.WeightVector(np.array([0.5, 0.6]), "hard")
    with pytest.raises(Exception):
        L.WeightVector(np.array([1.5, -0.5]), "soft")


def test_witm_examples():
    rng = np.random.default_rng(5)
    s = rng.normal(size=(5, 4))
    uni = L.WeightVector.uniform(5, "hard")
    assert L.witm_loss(s, uni).value == pytest.approx(L.itm_hard_loss(s).value / 5, abs=1e-12)
    one = L.witm_loss(s[:1], L.WeightVector(np.array([1.0]), "hard"))
    assert one.value == pytest.approx(L.itm_hard_loss(s[:1]).value, abs=0)
    out = L.witm_loss([[0.0, 0.0], [2.0, 0.0]], L.WeightVector(np.array([0.25, 0.75]), "hard"))
    assert out.value == pytest.approx(0.25 * math.log(2) + 0.75 * ITM_MARGIN_2, abs=1e-12)
    assert out.value == pytest.approx(0.268483, abs=1e-6)
    with pytest.raises(ShapeError):
        L.witm_loss(s, uni.weights[:3])


def test_wds_examples():
    rng = np.random.default_rng(6)
    s, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    uni = L.WeightVector.uniform(4, "soft")
    assert L.wds_loss(s, t, uni).value == pytest.approx(L.mse_distill_loss(s, t).value / 4, abs=1e-12)
    c = L.WeightVector(np.array([0.1, 0.2, 0.3, 0.4]), "soft")
    assert L.wds_loss(s, s, c).value == 0.0
    c2 = L.WeightVector(np.array([0.6, 0.4]), "soft")
    # per-query squared distances 2 and 5
    s2, t2 = np.array([[1.0, -1.0], [2.0, 1.0]]), np.zeros((2, 2))
    assert L.wds_loss(s2, t2, c2).value == pytest.approx(3.2, abs=1e-12)
    pairs = [L.DistillPair(s2[i], t2[i]) for i in range(2)]
    assert L.wds_loss(pairs, c2).value == pytest.approx(3.2, abs=1e-12)


def test_dcd_objective():
    wds, witm = L.LossValue(3.2, np.array([3.2])), L.LossValue(0.268483, np.array([0.268483]))
    assert L.dcd_objective(wds, witm, 0.0).value == witm.value
    assert L.dcd_objective(wds, witm, 1.0).value == wds.value
    witm_exact = 0.25 * math.log(2) + 0.75 * ITM_MARGIN_2
    out = L.dcd_objective(wds, L.LossValue(witm_exact, np.array([witm_exact])), 0.5)
    assert out.value == pytest.approx(1.734241, abs=1e-6)
    with pytest.raises(ConfigError):
        L.dcd_objective(wds, witm, -0.1)


# -- gradients -------------------------------------------------------------

def _grad_case(rng):
    k, n = rng.integers(1, 5), rng.integers(2, 7)
    s = rng.normal(scale=2.0, size=(k, n))
    t = rng.normal(scale=2.0, size=(k, n))
    w = L.hard_label_weights(rng.uniform(0.1, 2.0, size=k))
    c = L.soft_label_weights(w)
    return s, t, w, c


LOSSES = {
    "nce": lambda s, t, w, c: L.nce_loss(s),
    "itm": lambda s, t, w, c: L.itm_loss(s[:, :2]),
    "itm_hard": lambda s, t, w, c: L.itm_hard_loss(s),
    "kl_distill": lambda s, t, w, c: L.kl_distill_loss(s, t, 1.7),
    "mse_distill": lambda s, t, w, c: L.mse_distill_loss(s, t),
    "vanilla_kd": lambda s, t, w, c: L.vanilla_kd_objective(L.mse_distill_loss(s, t), L.itm_hard_loss(s), 0.3),
    "witm": lambda s, t, w, c: L.witm_loss(s, w),
    "wds": lambda s, t, w, c: L.wds_loss(s, t, c),
    "dcd_objective": lambda s, t, w, c: L.dcd_objective(L.wds_loss(s, t, c), L.witm_loss(s, w), 0.6),
}


@pytest.mark.parametrize("name", sorted(LOSSES))
def test_gradients_match_finite_differences(name):
    fn = LOSSES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        s, t, w, c = _grad_case(rng)
        if name == "itm":
            analytic = np.zeros_like(s)
            analytic[:, :2] = fn(s, t, w, c).grad
        else:
            analytic = fn(s, t, w, c).grad
        numeric = finite_diff_grad(lambda x: fn(x, t, w, c).value, s)
        assert max_relative_error(analytic, numeric) < 1e-4
