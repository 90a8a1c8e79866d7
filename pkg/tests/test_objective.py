import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tetsnn import ndgrad as nd
from tetsnn import objective as obj
from tetsnn.ndgrad import Tape, Tensor
from tetsnn.objective import SDT, TET, TOTAL, LossSpec

mpmath.mp.dps = 40


def mp_ce(z, y):
    """High-precision cross-entropy oracle for one logit vector."""
    z = [mpmath.mpf(float(v)) for v in z]
    return mpmath.log(mpmath.fsum(mpmath.e ** v for v in z)) - z[y]


def mp_sdt(O, y):
    T = len(O)
    mean = [mpmath.fsum(mpmath.mpf(float(O[t][i])) for t in range(T)) / T for i in range(len(O[0]))]
    return mp_ce(mean, y)


def mp_tet(O, y):
    return mpmath.fsum(mp_ce(o, y) for o in O) / len(O)


def draw(rng, T, K):
    return rng.normal(0, 3, size=(T, K)), int(rng.integers(0, K))


def test_sdt_single_step_is_plain_ce():
    rng = np.random.default_rng(0)
    O, y = draw(rng, 1, 5)
    assert obj.loss_sdt(O, y) == pytest.approx(float(mp_ce(O[0], y)), abs=1e-13)


def test_constant_steps_reduce_to_ce():
    rng = np.random.default_rng(1)
    o, y = draw(rng, 1, 6)
    O = np.repeat(o, 4, axis=0)
    ref = float(mp_ce(o[0], y))
    assert obj.loss_sdt(O, y) == pytest.approx(ref, abs=1e-12)
    assert obj.loss_tet(O, y) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_losses_match_high_precision_oracle(seed):
    rng = np.random.default_rng(seed)
    O, y = draw(rng, 4, 7)
    assert obj.loss_sdt(O, y) == pytest.approx(float(mp_sdt(O, y)), abs=1e-12)
    assert obj.loss_tet(O, y) == pytest.approx(float(mp_tet(O, y)), abs=1e-12)


def test_mse_brute_force():
    rng = np.random.default_rng(2)
    O, y = draw(rng, 3, 4)
    total = 0.0
    for t in range(3):
        for i in range(4):
            target = 1.0 if i == y else 0.0
            total += (O[t, i] - target) ** 2
    assert obj.loss_mse(O, y, phi=1.0) == pytest.approx(total / 12, abs=1e-12)
    uniform = ((O - 1.0) ** 2).mean()
    assert obj.loss_mse(O, y, phi=1.0, mse_target=obj.UNIFORM_PHI) == pytest.approx(uniform)


def test_mse_zero_at_target():
    O = np.tile([0.0, 1.0, 0.0], (5, 1))
    assert obj.loss_mse(O, 1, phi=1.0) == 0.0


def test_total_endpoints_and_convexity():
    rng = np.random.default_rng(3)
    O, y = draw(rng, 4, 10)
    tet, mse = obj.loss_tet(O, y), obj.loss_mse(O, y)
    assert obj.loss_total(O, y, LossSpec(lam=0.0)).total == pytest.approx(tet, abs=1e-15)
    assert obj.loss_total(O, y, LossSpec(lam=1.0)).total == pytest.approx(mse, abs=1e-15)
    b = obj.loss_total(O, y, LossSpec(lam=0.05))
    assert abs(b.total - (0.95 * b.ce_term + 0.05 * b.mse_term)) < 1e-12
    assert min(tet, mse) <= b.total <= max(tet, mse)
    assert len(b.per_timestep_ce) == 4


def test_total_linear_in_lambda():
    rng = np.random.default_rng(4)
    O, y = draw(rng, 3, 5)
    lams = np.linspace(0, 1, 11)
    vals = np.array([obj.loss_total(O, y, LossSpec(lam=l)).total for l in lams])
    assert np.abs(np.diff(vals, 2)).max() < 1e-12


def test_invalid_class_index():
    O = np.zeros((2, 3))
    for fn in (obj.loss_sdt, obj.loss_tet, obj.loss_mse):
        with pytest.raises(ValueError):
            fn(O, 3)
    with pytest.raises(ValueError):
        obj.loss_sdt(O, -1)


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec(lam=1.5)
    with pytest.raises(ValueError):
        LossSpec(kind="L1")


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_lemma1_property(T, K, seed):
    rng = np.random.default_rng(seed)
    O, y = draw(rng, T, K)
    assert obj.lemma1_check(O, y).holds


def test_lemma1_equality_case():
    rng = np.random.default_rng(5)
    o, y = draw(rng, 1, 8)
    r = obj.lemma1_check(np.repeat(o, 6, axis=0), y)
    assert r.holds and abs(r.l_tet - r.l_sdt) < 1e-12


def test_lemma1_adversarial_ascent():
    """Gradient ascent on l_sdt - l_tet never crosses zero."""
    rng = np.random.default_rng(6)
    for _ in range(20):
        T, K = int(rng.integers(2, 8)), int(rng.integers(2, 10))
        O, y = draw(rng, T, K)
        for _ in range(200):
            g = obj.analytic_grads(O, y, SDT) - obj.analytic_grads(O, y, TET)
            O = O + 0.5 * g
            assert obj.lemma1_check(O, y).holds
        gap = obj.loss_tet(O, y) - obj.loss_sdt(O, y)
        assert gap >= -obj.LEMMA_SLACK


def test_shift_invariance():
    rng = np.random.default_rng(7)
    O, y = draw(rng, 4, 5)
    for fn in (obj.loss_sdt, obj.loss_tet):
        assert abs(fn(O, y) - fn(O + 50.0, y)) < 1e-12


def test_sdt_signal_vanishes_at_target():
    # softmax(O_mean) == onehot only in the limit; use a huge margin
    O = np.array([[0.0, 800.0, 0.0], [0.0, 1200.0, 0.0]])
    assert np.abs(obj.analytic_grads(O, 1, SDT)).max() == 0.0


def test_single_step_signals_agree():
    rng = np.random.default_rng(8)
    O, y = draw(rng, 1, 4)
    assert np.array_equal(obj.analytic_grads(O, y, SDT), obj.analytic_grads(O, y, TET))


@pytest.mark.parametrize("which", [SDT, TET])
def test_linear_readout_tape_matches_closed_form(which):
    """dL/dW from the tape equals sum_t signal(t) dO(t)/dW for O(t) = W x(t)."""
    rng = np.random.default_rng(9)
    T, F, K = 5, 6, 4
    x = rng.normal(size=(T, F))
    y = 2
    W = Tensor(rng.normal(size=(K, F)), requires_grad=True)
    with Tape() as tape:
        O = nd.reshape(nd.linear(Tensor(x), W), (T, 1, K))
        loss = obj.objective(O, [y], LossSpec(kind=which, lam=0.0))
    tape_grad = tape.backward(loss)[W]
    signal = obj.analytic_grads(O.data[:, 0, :], y, which)
    closed = sum(np.outer(signal[t], x[t]) for t in range(T))
    assert np.abs(tape_grad - closed).max() < 1e-10


@pytest.mark.parametrize("kind,lam", [(SDT, 0.0), (TET, 0.0), (TOTAL, 0.05), (TOTAL, 1.0)])
def test_tape_losses_match_reference(kind, lam):
    rng = np.random.default_rng(10)
    O = rng.normal(0, 2, size=(3, 4, 5))
    y = rng.integers(0, 5, size=4)
    spec = LossSpec(kind=kind, lam=lam)
    tape_val = obj.objective(Tensor(O), y, spec).item()
    assert tape_val == pytest.approx(obj.breakdown(O, y, spec).total, abs=1e-12)


def test_breakdown_kinds():
    rng = np.random.default_rng(11)
    O = rng.normal(size=(3, 2, 4))
    y = np.array([0, 3])
    b = obj.breakdown(O, y, LossSpec(kind=SDT))
    assert b.total == b.ce_term == pytest.approx(obj.loss_sdt(O, y))
    b = obj.breakdown(O, y, LossSpec(kind=TET))
    assert b.total == pytest.approx(obj.loss_tet(O, y))
