import math

import numpy as np
import pytest

from splinediff.bspline import random_density, uniform_density
from splinediff.oracle import ScoreOracle
from splinediff.rng import stream
from splinediff.schedule import BetaSchedule, geometric_grid, noise_state
from splinediff.training import (
    ScoreMLP,
    TrainConfig,
    TrainedScore,
    conditional_score,
    empirical_loss,
    train,
    vincent_gap,
)

SCHED = BetaSchedule()


def gaussian_logpdf(x_t, x_0, t):
    ns = noise_state(SCHED, t)
    return -0.5 * ((x_t - ns.m * x_0) ** 2) / ns.sigma**2 - math.log(
        ns.sigma * math.sqrt(2 * math.pi)
    )


def test_conditional_score_zero_at_mean():
    ns = noise_state(SCHED, 0.4)
    x0 = np.array([[0.3]])
    out = conditional_score(ns.m * x0, x0, 0.4, SCHED)
    assert np.allclose(out, 0.0)


def test_conditional_score_closed_value():
    # sigma_t^2 = 0.5  =>  t = -log(0.5)/2
    t = -math.log(0.5) / 2.0
    ns = noise_state(SCHED, t)
    assert ns.sigma**2 == pytest.approx(0.5, abs=1e-12)
    out = conditional_score(np.array([[1.0]]), np.array([[0.0]]), t, SCHED)
    assert out[0, 0] == pytest.approx(-2.0, abs=1e-12)
    # cross-check by finite-differencing the Gaussian log-pdf
    h = 1e-6
    fd = (gaussian_logpdf(1.0 + h, 0.0, t) - gaussian_logpdf(1.0 - h, 0.0, t)) / (2 * h)
    assert out[0, 0] == pytest.approx(fd, abs=1e-5)


def test_conditional_score_matches_fd_on_random_draws():
    gen = stream(1).generator()
    h = 1e-6
    for _ in range(100):
        t = float(gen.uniform(0.05, 2.0))
        x0 = float(gen.uniform(-1, 1))
        xt = float(gen.normal())
        got = conditional_score(np.array([[xt]]), np.array([[x0]]), t, SCHED)[0, 0]
        fd = (gaussian_logpdf(xt + h, x0, t) - gaussian_logpdf(xt - h, x0, t)) / (2 * h)
        assert got == pytest.approx(fd, abs=1e-6 * max(1, abs(fd)))


def test_empirical_loss_zero_for_conditional_closure():
    # a score that reproduces each draw's own conditional target zeroes the
    # loss; emulate with the discrete_grid scheme where targets are exact
    p0 = uniform_density(1)
    data = p0.sample(64, stream(2))

    # build the same nodes the loss will see, then a lookup-free closure:
    # s(x, t) = conditional score of the pair that generated x is not
    # reconstructible in general, so instead check the loss of the true
    # conditional score field for a SINGLE data point, where it vanishes.
    single = data[:1]
    s = lambda x, t: conditional_score(x, np.broadcast_to(single, x.shape), t, SCHED)
    val = empirical_loss(s, single, "uniform_t", stream(3), SCHED, 0.05, 1.0,
                         m_draws=2000)
    assert val == pytest.approx(0.0, abs=1e-20)


def test_weighted_t_importance_identity():
    # E_{t ~ mu} [lambda(t) g(t)] equals E_{t ~ Unif} [g(t)] for g = 1:
    # with s = 0 and g(t) = E||cond score||^2 both schemes estimate the same
    # integral; check agreement within MC error for a smooth closure instead
    p0 = uniform_density(1)
    data = p0.sample(256, stream(4))
    zero = lambda x, t: np.zeros_like(np.atleast_2d(x))
    t_lo, t_hi = 0.05, 1.0
    quad = empirical_loss(zero, data, "expectation_quadrature", stream(5), SCHED,
                          t_lo, t_hi, n_time_panels=24, n_gh=32)
    uni = empirical_loss(zero, data, "uniform_t", stream(6), SCHED, t_lo, t_hi,
                         m_draws=10**6)
    wgt = empirical_loss(zero, data, "weighted_t", stream(7), SCHED, t_lo, t_hi,
                         m_draws=10**6)
    # s = 0: loss integrand E||cond||^2 = d / sigma_t^2 per draw
    # MC standard error ~ spread/sqrt(M); allow 3 SEs via a pilot spread
    assert uni == pytest.approx(quad, rel=0.02)
    assert wgt == pytest.approx(quad, rel=0.02)


def test_loss_permutation_invariant_quadrature():
    p0 = random_density(seed=9, d=1, n_atoms=3)
    data = p0.sample(128, stream(8))
    zero = lambda x, t: np.zeros_like(np.atleast_2d(x))
    a = empirical_loss(zero, data, "expectation_quadrature", stream(9), SCHED,
                       0.1, 0.9)
    perm = stream(10).generator().permutation(128)
    b = empirical_loss(zero, data[perm], "expectation_quadrature", stream(9),
                       SCHED, 0.1, 0.9)
    assert a == pytest.approx(b, rel=1e-12)


def test_zero_iteration_train_equals_initialization():
    p0 = uniform_density(1)
    cfg = TrainConfig(n_data=64, iterations=0, seed=5, t_lo=0.5, t_hi=1.0)
    ts = train(p0, SCHED, cfg)
    fresh = train(p0, SCHED, cfg)
    xs = stream(11).generator().normal(size=(50, 1))
    assert np.array_equal(ts(xs, 0.7), fresh(xs, 0.7))


def test_train_deterministic_same_seed():
    p0 = uniform_density(1)
    cfg = TrainConfig(n_data=128, iterations=40, seed=7, t_lo=0.3, t_hi=1.0,
                      scheme="uniform_t", m_draws=1024)
    a = train(p0, SCHED, cfg)
    b = train(p0, SCHED, cfg)
    assert a.training_loss_trace == b.training_loss_trace
    xs = stream(12).generator().normal(size=(20, 1))
    assert np.array_equal(a(xs, 0.5), b(xs, 0.5))


def test_loss_trace_monotone():
    p0 = random_density(seed=14, d=1, n_atoms=3)
    cfg = TrainConfig(n_data=128, iterations=80, seed=3, t_lo=0.2, t_hi=1.0,
                      widths=(32, 32), n_time_panels=4, n_gh=8)
    ts = train(p0, SCHED, cfg)
    trace = np.asarray(ts.training_loss_trace[0])
    ma = np.convolve(trace, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(ma) <= 1e-12)


def test_trained_net_matches_oracle_uniform():
    # uniform density, single interval [0.5, 1]: RMS error <= 0.1 on a
    # p_t-weighted grid after training
    p0 = uniform_density(1)
    oracle = ScoreOracle(density=p0, schedule=SCHED)
    cfg = TrainConfig(n_data=256, iterations=300, seed=1, t_lo=0.5, t_hi=1.0,
                      step_size=0.2, widths=(48, 48), n_time_panels=4, n_gh=8)
    ts = train(p0, SCHED, cfg)
    t = 1.0
    xs = np.linspace(-2.5, 2.5, 401).reshape(-1, 1)
    p = oracle.p_t(xs, t)
    p /= p.sum()
    diff = ts(xs, t)[:, 0] - oracle.score(xs, t)[:, 0]
    rms = math.sqrt(float(np.sum(p * diff**2)))
    assert rms <= 0.1


def test_output_clipping_enforced():
    p0 = uniform_density(1)
    cfg = TrainConfig(n_data=64, iterations=5, seed=2, t_lo=0.01, t_hi=1.0,
                      clip_mult=0.01)
    ts = train(p0, SCHED, cfg)
    xs = stream(13).generator().normal(size=(100, 1)) * 5
    for t in (0.01, 0.1, 1.0):
        ns = noise_state(SCHED, t)
        radius = 0.01 * math.sqrt(math.log(64)) / ns.sigma
        norms = np.linalg.norm(ts(xs, t), axis=1)
        assert np.all(norms <= radius * (1 + 1e-12))


def test_interval_switching_covers_grid():
    p0 = uniform_density(1)
    grid = geometric_grid(0.01, 1.0, 0.05, 2.0)
    cfg = TrainConfig(n_data=64, iterations=3, seed=4, t_lo=0.01, t_hi=1.0,
                      scheme="uniform_t", m_draws=256)
    ts = train(p0, SCHED, cfg, grid=grid)
    assert ts.t_lo == 0.01 and ts.t_hi == 1.0
    xs = np.zeros((1, 1))
    for t in (0.01, 0.049, 0.05, 0.3, 0.99, 1.0):
        out = ts(xs, t)
        assert np.all(np.isfinite(out))
    # hard mode: the queried net changes across a knot
    i_lo = ts._interval_index(0.049)
    i_hi = ts._interval_index(0.051)
    assert i_hi == i_lo + 1


def test_ramp_mode_continuous_at_knots():
    p0 = uniform_density(1)
    grid = geometric_grid(0.1, 0.9, 0.2, 2.0)
    cfg = TrainConfig(n_data=64, iterations=3, seed=6, t_lo=0.1, t_hi=0.9,
                      scheme="uniform_t", m_draws=256, switch_mode="ramp")
    ts = train(p0, SCHED, cfg, grid=grid)
    xs = np.array([[0.2]])
    knot = ts.intervals[0][1]
    below = ts.raw(xs, knot - 1e-9)[0, 0]
    above = ts.raw(xs, knot + 1e-9)[0, 0]
    assert abs(below - above) < 1e-5


def test_vincent_gap_zero_for_identical_networks():
    oracle = ScoreOracle(density=uniform_density(1), schedule=SCHED)
    net = ScoreMLP(1, (16, 16), stream(20), 1e-3, SCHED)
    assert vincent_gap(net, net, oracle, 0.3) == 0.0


def test_vincent_gap_small_for_random_pairs():
    oracle = ScoreOracle(density=uniform_density(1), schedule=SCHED)
    worst = 0.0
    for pair in range(5):
        a = ScoreMLP(1, (24, 24), stream(30 + pair), 1e-3, SCHED)
        b = ScoreMLP(1, (24, 24), stream(40 + pair), 1e-3, SCHED)
        for t in (0.05, 0.3, 1.0):
            worst = max(worst, abs(vincent_gap(a, b, oracle, t)))
    assert worst <= 1e-5


def test_vincent_gap_on_random_density():
    oracle = ScoreOracle(
        density=random_density(seed=15, d=1, n_atoms=4), schedule=SCHED
    )
    a = ScoreMLP(1, (16,), stream(50), 1e-3, SCHED)
    b = ScoreMLP(1, (16,), stream(51), 1e-3, SCHED)
    assert abs(vincent_gap(a, b, oracle, 0.3)) <= 1e-5


def test_training_error_carries_trace():
    p0 = uniform_density(1)
    cfg = TrainConfig(n_data=32, iterations=50, seed=8, t_lo=0.5, t_hi=1.0,
                      step_size=1e6)  # absurd step: safeguard must still cope
    ts = train(p0, SCHED, cfg)  # halving-on-increase absorbs the bad step
    trace = ts.training_loss_trace[0]
    assert np.all(np.isfinite(trace))
