"""Scale schedule arithmetic and separation checks."""

import math

import numpy as np
import pytest

from homoglab.scales import ScaleSchedule, ScheduleError


def random_schedule(rng, max_ratio=0.95, max_prefix=5):
    prefix = tuple(rng.uniform(0.05, max_ratio, rng.integers(0, max_prefix + 1)))
    tail = rng.uniform(0.05, max_ratio)
    return ScaleSchedule(prefix, tail)


def test_epsilon_zero_is_one_exactly():
    s = ScaleSchedule.geometric(0.3)
    assert s.epsilon(0) == 1.0


def test_separation_sup_geometric_equals_leading_ratio():
    s = ScaleSchedule.geometric(0.25)
    assert s.separation_sup(10) == 0.25
    assert ScaleSchedule.geometric(0.1).separation_sup(3) == 0.1


def test_separation_sup_explicit_prefix():
    s = ScaleSchedule.explicit([0.5, 0.125], tail_ratio=0.25)
    assert s.separation_sup(10) == 0.5


def test_sum_ratio_values():
    assert ScaleSchedule.geometric(0.5).sum_ratio(3) == pytest.approx(1.75, abs=1e-15)
    assert ScaleSchedule.geometric(0.25).sum_ratio(2) == pytest.approx(1.25, abs=1e-15)
    for s in (ScaleSchedule.geometric(0.7), ScaleSchedule.explicit([0.3], 0.5)):
        assert s.sum_ratio(1) == 1.0


def test_decay_bound_single_pairs():
    rep = ScaleSchedule.geometric(0.5).decay_bound_check(2.0, 8)
    assert rep.passed and rep.hypothesis_ok
    row = rep.pairs[(rep.pairs[:, 0] == 1) & (rep.pairs[:, 1] == 4)][0]
    assert row[2] == pytest.approx(0.125)
    assert row[3] == pytest.approx(0.25)

    rep = ScaleSchedule.geometric(0.25).decay_bound_check(4.0 / 3.0, 6)
    assert rep.passed
    row = rep.pairs[(rep.pairs[:, 0] == 1) & (rep.pairs[:, 1] == 2)][0]
    assert row[2] == pytest.approx(0.25)
    assert row[3] == pytest.approx(1.0 / 3.0)


def test_decay_bound_hypothesis_failure_flagged():
    s = ScaleSchedule.explicit([0.5, 0.45], tail_ratio=0.25)   # e2/e1 = 0.9
    rep = s.decay_bound_check(1.5, 8)
    assert not rep.hypothesis_ok
    assert rep.hypothesis_failure_m == 2
    assert rep.pairs.size == 0 and not rep.passed


def test_power_separation_geometric_always_passes():
    s = ScaleSchedule.geometric(0.3)
    for N in (1.0, 2.0, 7.5):
        assert s.power_separation_check(N).passed
        assert s.power_separation_check(N, two_sided=True).passed


def test_power_separation_spec_pairs():
    # ratios (1/2, 1/2, 1/16): one-sided passes at N = 4, two-sided passes
    # exactly at the boundary since (1/16)^(1/4) = 1/2
    s = ScaleSchedule((0.5, 0.5, 1.0 / 16.0), 1.0 / 16.0)
    assert s.power_separation_check(4.0).passed
    assert s.power_separation_check(4.0, two_sided=True).passed

    tight = ScaleSchedule((1.0 / 16.0, 0.5), 0.5)
    assert tight.power_separation_check(4.0).passed   # equality at (1, 0)
    strict = ScaleSchedule((1.0 / 32.0, 0.5), 0.5)
    rep = strict.power_separation_check(4.0)
    assert not rep.passed
    assert rep.first_violation == (1, 0)


def test_log_separation_constant_ratio_reduction():
    # for a constant ratio q the condition is q**a |log q| <= c0
    q = math.exp(-1.0)
    s = ScaleSchedule.geometric(q)
    assert s.log_separation_check(0, 0.5, 1.0).passed
    assert not s.log_separation_check(0, 0.3, 1.0).passed
    assert ScaleSchedule.geometric(1e-8).log_separation_check(0, 0.05, 1.0).passed


def test_rescale_geometric_self_similar():
    s = ScaleSchedule.geometric(0.4)
    r = s.rescale(2)
    for j in range(6):
        assert r.epsilon(j) == pytest.approx(s.epsilon(j + 2) / s.epsilon(2), rel=1e-15)


def test_rescale_identity_and_explicit():
    s = ScaleSchedule.explicit([0.5, 0.125, 0.0625], tail_ratio=0.5)
    assert s.rescale(0) is not None and s.rescale(0).epsilon(3) == s.epsilon(3)
    r = s.rescale(1)
    assert r.epsilon(1) == pytest.approx(0.25)   # (1/8) / (1/2)


def test_rescale_semigroup_exact():
    rng = np.random.default_rng(11)
    for _ in range(50):
        s = random_schedule(rng)
        a, b = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        left = s.rescale(a).rescale(b)
        right = s.rescale(a + b)
        for j in range(8):
            assert left.epsilon(j) == right.epsilon(j)


def test_monotone_decreasing_random():
    rng = np.random.default_rng(3)
    for _ in range(100):
        s = random_schedule(rng)
        eps = s.epsilons(40)
        assert np.all(np.diff(eps) < 0)


def test_sum_condition_implies_decay_bound():
    # closure of the decay lemma: whenever the sum condition holds up to
    # mmax, every pair bound follows
    rng = np.random.default_rng(5)
    for _ in range(100):
        K = rng.uniform(1.05, 2.0)
        s = random_schedule(rng, max_ratio=1.0 - 1.0 / K)
        rep = s.decay_bound_check(K, 32)
        assert rep.hypothesis_ok and rep.passed


def test_decay_bound_implies_squared_sum():
    # converse: a valid decay bound caps the ratio sums at K**2
    rng = np.random.default_rng(7)
    for _ in range(100):
        K = rng.uniform(1.05, 2.0)
        s = random_schedule(rng, max_ratio=1.0 - 1.0 / K)
        if s.decay_bound_check(K, 32).passed:
            for m in range(1, 33):
                assert s.sum_ratio(m) <= K ** 2 + 1e-12


def test_validation_errors():
    with pytest.raises(ScheduleError):
        ScaleSchedule((1.2,), 0.5)
    with pytest.raises(ScheduleError):
        ScaleSchedule((), 1.0)
    with pytest.raises(ScheduleError):
        ScaleSchedule.explicit([0.5, 0.6], 0.5)   # increasing
    with pytest.raises(ScheduleError):
        ScaleSchedule.geometric(0.5).sum_ratio(0)
    with pytest.raises(ScheduleError):
        ScaleSchedule.geometric(0.5).decay_bound_check(2.5)


def test_power_rule_generator():
    s = ScaleSchedule.power_rule(0.5, [1.0, 2.0], tail_increment=1.0)
    assert s.epsilon(1) == pytest.approx(0.5)
    assert s.epsilon(2) == pytest.approx(0.5 ** 3)     # beta_2 = 1 + 2
    assert s.epsilon(3) == pytest.approx(0.5 ** 4)
