import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from freqforce import tensor as T
from freqforce.flow import (
    ClockMap,
    ClockSchedule,
    LossWeights,
    interpolate,
    sample_training_clocks,
    schedule_map,
    total_loss,
    xpred_loss,
    xpred_loss_velocity_form,
)
from freqforce.tensor import Tensor
from freqforce.wavelet import WaveletRegWeights

GRID = np.linspace(0.0, 1.0, 1001)


def test_interpolation_endpoints_and_midpoint(rng):
    x, eps = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    np.testing.assert_array_equal(interpolate(x, eps, 0.0).data, eps)
    np.testing.assert_array_equal(interpolate(x, eps, 1.0).data, x)
    assert interpolate(np.array([2.0]), np.array([0.0]), 0.5).data[0] == 1.0


def test_interpolation_per_sample_clocks(rng):
    x, eps = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2, 2))
    t = np.array([0.0, 0.5, 1.0])
    z = interpolate(x, eps, t).data
    for i in range(3):
        np.testing.assert_allclose(z[i], t[i] * x[i] + (1 - t[i]) * eps[i])


def test_interpolation_errors():
    with pytest.raises(ValueError):
        interpolate(np.zeros(2), np.zeros(2), 1.2)
    with pytest.raises(T.ShapeError):
        interpolate(np.zeros(2), np.zeros(3), 0.5)


def test_loss_examples():
    z = np.array([[7.0]])
    assert xpred_loss(np.array([[1.0]]), np.array([[1.0]]), z, 0.3).item() == 0.0
    assert xpred_loss(np.array([[1.0]]), np.array([[0.0]]), z, 0.5).item() == pytest.approx(4.0)
    assert xpred_loss(np.array([[1.0]]), np.array([[0.0]]), z, 0.99, 0.05).item() == pytest.approx(400.0)


def test_loss_forms_agree_in_both_regimes(rng):
    worst = 0.0
    for t_lo, t_hi in ((0.0, 0.95), (0.95, 1.0)):
        for _ in range(200):
            xp, x, z = (rng.normal(size=(4, 3)) for _ in range(3))
            t = rng.uniform(t_lo, t_hi, size=4)
            a = xpred_loss(xp, x, z, t, check=True).item()
            b = xpred_loss_velocity_form(xp, x, z, t).item()
            worst = max(worst, abs(a - b) / max(abs(a), 1e-300))
    assert worst < 1e-10


def test_loss_is_invariant_to_z(rng):
    xp, x = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    a = xpred_loss(xp, x, rng.normal(size=(2, 5)), 0.4).item()
    b = xpred_loss(xp, x, 1e3 * rng.normal(size=(2, 5)), 0.4).item()
    assert a == b


def test_loss_gradient(rng):
    xp = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x = rng.normal(size=(3, 4))
    t = np.array([0.1, 0.6, 0.99])
    assert T.grad_check(lambda: xpred_loss(xp, x, x, t, weight=np.array([1.0, 0.5, 2.0])), [xp]) < 1e-4


def test_loss_rejects_non_finite_input():
    with pytest.raises(FloatingPointError):
        xpred_loss(np.array([np.nan]), np.array([0.0]), np.array([0.0]), 0.5)


# -- schedules ---------------------------------------------------------------------------------


@pytest.mark.parametrize("kind,param", [("cascaded", 0.5), ("cascaded", 1.0), ("linear_offset", 0.25),
                                        ("linear_offset", 0.0), ("variance_shifted", 3.0), ("variance_shifted", 1.0)])
def test_schedule_contract(kind, param):
    phi = ClockMap(kind, param)(GRID)
    assert np.all(np.diff(phi) >= 0)
    assert np.all(phi >= GRID)
    assert phi[-1] == 1.0 and np.all((phi >= 0) & (phi <= 1))


def test_schedule_examples():
    assert ClockMap()(0.3) == 0.3
    cas = ClockMap("cascaded", 0.5)
    np.testing.assert_array_equal(cas([0.25, 0.5, 0.7]), [0.5, 1.0, 1.0])
    assert np.all(cas(GRID[GRID >= 0.5]) == 1.0)
    assert ClockMap("variance_shifted", 3.0)(0.5) == pytest.approx(0.75)
    assert ClockMap("linear_offset", 0.25)(0.8) == 1.0


@pytest.mark.parametrize("kind,param", [("cascaded", 0.0), ("cascaded", 1.5), ("linear_offset", -0.1),
                                        ("variance_shifted", 0.5), ("bogus", 0.0)])
def test_schedule_rejects_bad_params(kind, param):
    with pytest.raises(ValueError):
        ClockMap(kind, param)


@given(st.sampled_from(["cascaded", "linear_offset", "variance_shifted"]), st.floats(0, 1),
       st.floats(0, 1), st.floats(0.01, 1))
def test_schedule_monotone_and_ahead_property(kind, t1, t2, u):
    param = {"cascaded": u, "linear_offset": u, "variance_shifted": 1 + 10 * u}[kind]
    phi = ClockMap(kind, param)
    lo, hi = sorted((t1, t2))
    assert phi(lo) <= phi(hi) and phi(lo) >= lo


def test_schedule_map_rejects_out_of_range():
    with pytest.raises(ValueError):
        schedule_map(1.5, ClockSchedule(), "fre")


def test_synchronous_clocks_are_equal(rng):
    c = sample_training_clocks(rng, ClockSchedule(), ("pix", "fre", "dino"), 50)
    np.testing.assert_array_equal(c["pix"], c["fre"])
    np.testing.assert_array_equal(c["pix"], c["dino"])


def test_coupled_clocks_follow_phi_and_independent_do_not(rng):
    sched = ClockSchedule.uniform("linear_offset", 0.25)
    c = sample_training_clocks(rng, sched, ("pix", "fre"), 200)
    np.testing.assert_array_equal(c["fre"], sched.phi("fre")(c["pix"]))
    c = sample_training_clocks(rng, sched, ("pix", "fre"), 200, independent=True)
    assert not np.allclose(c["fre"], sched.phi("fre")(c["pix"]))


def test_linear_offset_monte_carlo_mean():
    rng = np.random.default_rng(0)
    c = sample_training_clocks(rng, ClockSchedule.uniform("linear_offset", 0.2), ("pix", "fre"), 100_000)
    assert abs(c["fre"].mean() - (0.5 + 0.2 - 0.2**2 / 2)) < 0.01


# -- total loss ----------------------------------------------------------------------------------


def test_total_loss_composition(rng):
    losses = {s: Tensor(v) for s, v in zip(("pix", "fre"), rng.uniform(size=2))}
    regs = {k: Tensor(v) for k, v in zip(("sum", "hp", "ortho", "sparse"), rng.uniform(size=4))}
    w = LossWeights({"pix": 1.0, "fre": 0.7})
    rw = WaveletRegWeights(0.1, 0.2, 0.3, 0.4)
    want = (losses["pix"].item() + 0.7 * losses["fre"].item() + 0.1 * regs["sum"].item()
            + 0.2 * regs["hp"].item() + 0.3 * regs["ortho"].item() + 0.4 * regs["sparse"].item())
    assert total_loss(losses, w, regs, rw).item() == pytest.approx(want, rel=1e-14)
    zero = {s: Tensor(0.0) for s in losses}
    assert total_loss(zero, w).item() == 0.0
    no_fre = LossWeights({"pix": 1.0, "fre": 0.0})
    assert total_loss(losses, no_fre, regs, rw).item() == pytest.approx(want - 0.7 * losses["fre"].item())


def test_total_loss_missing_weight():
    with pytest.raises(KeyError):
        total_loss({"dino": Tensor(1.0)}, LossWeights({"pix": 1.0}))


def test_loss_weight_validation_and_decay():
    with pytest.raises(ValueError):
        LossWeights(t_clip=0.0)
    with pytest.raises(ValueError):
        LossWeights({"pix": -1.0})
    w = LossWeights(fre_decay=0.5)
    np.testing.assert_allclose(w.time_weight("fre", np.array([0.0, 1.0])), [1.0, 0.5])
    assert w.time_weight("pix", np.array([0.3])) is None
