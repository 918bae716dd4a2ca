import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from freqforce.backbone import Backbone, BackboneConfig
from freqforce.config import SamplerConfig, ConfigError
from freqforce.flow import ClockMap, ClockSchedule
from freqforce.sampler import (
    cfg_combine,
    clock_grid,
    crossing_time,
    generate,
    lowband_convergence,
    lowband_energy,
    read_trajectory,
    velocity_from_xpred,
    write_trajectory,
)
from reference_dit import euler_sample


def model(streams=("fre", "pix"), seed=0):
    cfg = BackboneConfig(image_size=8, patch=4, width=16, depth=2, heads=2, dino_dim=4, streams=streams)
    return Backbone(cfg, seed=seed, zero_init=False)


def test_velocity_examples():
    z = np.array([0.3, -1.0])
    np.testing.assert_array_equal(velocity_from_xpred(z, z, 0.5), 0.0)
    np.testing.assert_array_equal(velocity_from_xpred([1.0], [0.0], 0.0), [1.0])
    np.testing.assert_allclose(velocity_from_xpred([1.0], [0.0], 0.99, 0.05), [20.0])
    v = velocity_from_xpred(np.ones((2, 3)), np.zeros((2, 3)), np.array([0.0, 0.5]))
    np.testing.assert_allclose(v, [[1.0] * 3, [2.0] * 3])


@given(st.floats(0.0, 1.0))
def test_velocity_is_finite_up_to_t_one(t):
    assert np.all(np.isfinite(velocity_from_xpred([1.0], [0.0], t)))


def test_cfg_examples(rng):
    a, b = rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_array_equal(cfg_combine(a, b, 1.0), b)
    np.testing.assert_array_equal(cfg_combine(a, b, 0.0), a)
    np.testing.assert_allclose(cfg_combine([0.0], [2.0], 1.5), [3.0])
    with pytest.raises(ValueError):
        cfg_combine(a, b[:3], 1.5)


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(steps=0)
    with pytest.raises(ConfigError):
        SamplerConfig(guidance=-1)


def test_single_step_lands_on_the_prediction():
    m = model(("pix",))
    res = generate(m, [0, 1], SamplerConfig(steps=1, guidance=1.0, seed=3))
    z = np.random.default_rng(3).standard_normal(m.stream_shape("pix", 2))
    x_pred = m({"pix": z}, {"pix": np.zeros(2)}, np.array([0, 1]))["pix"].data
    np.testing.assert_allclose(res.images, x_pred, atol=1e-14)


class Spy:
    """Delegates to a model and records the frequency clock and state of every call."""

    def __init__(self, inner):
        self.inner, self.seen = inner, []

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def __call__(self, states, clocks, labels):
        self.seen.append((clocks["fre"][0], np.array(states["fre"].data)))
        return self.inner(states, clocks, labels)


def test_cascaded_stream_holds_after_completion():
    spy = Spy(model())
    sched = ClockSchedule({"fre": ClockMap("cascaded", 0.5)})
    res = generate(spy, [1], SamplerConfig(steps=8, guidance=1.5), schedule=sched)
    np.testing.assert_array_equal(res.clock_grid["fre"][4:], 1.0)
    assert len(spy.seen) == 16  # conditional and unconditional pass per step
    after = [s for tau, s in spy.seen if tau == 1.0]
    assert len(after) == 8
    assert all(np.array_equal(s, after[0]) for s in after)
    np.testing.assert_array_equal(res.states["fre"], after[0])
    before = [s for tau, s in spy.seen if tau < 1.0]
    assert not np.array_equal(before[-1], after[0])


@pytest.mark.parametrize("kind,param", [("linear_offset", 0.25), ("cascaded", 0.3), ("variance_shifted", 3.0)])
def test_clock_consistency(kind, param):
    sched = ClockSchedule({"fre": ClockMap(kind, param)})
    grid = clock_grid(sched, ("fre", "pix"), 17)
    t = np.arange(18) / 17
    np.testing.assert_allclose(grid["pix"], t, atol=1e-12)
    np.testing.assert_allclose(grid["fre"], ClockMap(kind, param)(t), atol=1e-12)


def test_determinism_and_seed_dependence():
    m = model()
    a = generate(m, [0, 2], SamplerConfig(steps=4, seed=9)).images
    b = generate(m, [0, 2], SamplerConfig(steps=4, seed=9)).images
    c = generate(m, [0, 2], SamplerConfig(steps=4, seed=10)).images
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_class_out_of_range():
    m = model()
    with pytest.raises(ValueError):
        generate(m, [m.cfg.num_classes], SamplerConfig(steps=2))
    with pytest.raises(ValueError):
        generate(None, [0], SamplerConfig(steps=2))


@pytest.mark.parametrize("guidance", [1.0, 1.5])
def test_pixel_only_sampling_matches_reference(guidance):
    m = model(("fre", "pix"), seed=4)
    res = generate(m, [1, 3], SamplerConfig(steps=6, guidance=guidance, seed=2), streams=("pix",),
                   keep_trajectory=True)
    ref = euler_sample(m, [1, 3], 6, seed=2, guidance=guidance)
    assert len(res.trajectory) == len(ref)
    for a, b in zip(res.trajectory, ref):
        np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)


def test_trajectory_round_trip(tmp_path):
    m = model()
    res = generate(m, [0, 1], SamplerConfig(steps=5), keep_trajectory=True)
    write_trajectory(tmp_path / "t.fqtr", res)
    header, states = read_trajectory(tmp_path / "t.fqtr")
    assert header["steps"] == 5 and header["shape"] == [2, 3, 8, 8]
    np.testing.assert_array_equal(states, np.stack(res.trajectory))
    np.testing.assert_allclose(header["clocks"]["fre"], res.clock_grid["fre"])
    np.testing.assert_array_equal(states[-1], res.images)
    with pytest.raises(ValueError):
        write_trajectory(tmp_path / "x.fqtr", generate(m, [0], SamplerConfig(steps=1)))
    (tmp_path / "bad.fqtr").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError):
        read_trajectory(tmp_path / "bad.fqtr")


def test_lowband_diagnostics(rng):
    final = rng.normal(size=(1, 3, 8, 8))
    noise = rng.normal(size=final.shape)
    ts = np.linspace(0, 1, 11)
    states = np.stack([(1 - t) * noise + t * final for t in ts])
    curve = lowband_convergence(states)
    assert curve[-1] == 0 and np.all(np.diff(curve[3:]) <= 1e-12)
    e = lowband_energy(states[-1:])
    # two orthonormal Haar levels keep the LL energy at or below the total
    assert 0 < e[0] <= np.sum(final**2) + 1e-9


def test_crossing_time():
    assert crossing_time(np.array([1.0, 0.5, 0.05, 0.0])) == pytest.approx(2 / 3)
    assert crossing_time(np.array([1.0, 0.05, 0.2, 0.0])) == pytest.approx(1.0)
    assert crossing_time(np.array([0.0, 0.0])) == 0.0
