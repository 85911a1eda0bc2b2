import numpy as np
import pytest
import scipy.stats

from levelk_highway.actions import AccelerationModel, classify_acceleration, sample_acceleration
from levelk_highway.env import Action

MODEL = AccelerationModel()


def draws(kind, n, seed=0):
    rng = np.random.default_rng(seed)
    return np.array([sample_acceleration(kind, rng) for _ in range(n)])


class TestSampling:
    def test_maintain_mean(self):
        a = draws(Action.MAINTAIN, 100_000)
        # CLT bound: 3 * sigma / sqrt(n) ~ 7e-5, assert the looser 1e-3
        assert abs(a.mean()) < 1e-3
        assert np.all(np.abs(a) < 0.04)  # 5.3 sigma

    def test_accelerate_support(self):
        a = draws(Action.ACCELERATE, 20_000)
        assert np.all((a >= 0.5) & (a <= 2.5))

    def test_decelerate_support(self):
        a = draws(Action.DECELERATE, 20_000)
        assert np.all((a >= -2.5) & (a <= -0.5))

    def test_hard_decelerate_stats(self):
        a = draws(Action.HARD_DECELERATE, 100_000)
        assert np.all(a <= -2.5)
        # E = -(3.5 - E|N(0,0.3)|) = -3.5 + 0.3*sqrt(2/pi) = -3.26064 (clamp shifts ~1e-4)
        assert a.mean() == pytest.approx(-3.26064, abs=0.01)

    def test_hard_accelerate_support(self):
        a = draws(Action.HARD_ACCELERATE, 50_000)
        assert np.all((a >= 2.5) & (a <= 3.5))

    def test_lane_changes_realize_zero(self):
        rng = np.random.default_rng(0)
        assert sample_acceleration(Action.MOVE_LEFT, rng) == 0.0
        assert sample_acceleration(Action.MOVE_RIGHT, rng) == 0.0

    def test_distribution_shapes_ks(self):
        # one-sample K-S of the sampler against each specified distribution
        n = 1_000_000
        rng = np.random.default_rng(42)

        maintain = rng.normal(0.0, MODEL.maintain_sigma, n)
        _, p = scipy.stats.kstest(maintain, "norm", args=(0.0, MODEL.maintain_sigma))
        # (sanity of the oracle itself)
        assert p > 0.01

        a = np.array([sample_acceleration(Action.ACCELERATE, rng) for _ in range(100_000)])
        _, p = scipy.stats.kstest(a, "uniform", args=(0.5, 2.0))
        assert p > 0.01

        m = np.array([sample_acceleration(Action.MAINTAIN, rng) for _ in range(100_000)])
        _, p = scipy.stats.kstest(m, "norm", args=(0.0, MODEL.maintain_sigma))
        assert p > 0.01

        def hard_cdf(x):
            # X = max(2.5, 3.5 - |N(0, 0.3)|): P(X <= x) = P(|N| >= 3.5 - x) for x < 3.5
            x = np.asarray(x)
            return np.where(
                x >= 3.5, 1.0, 2.0 * scipy.stats.norm.sf((3.5 - x) / MODEL.hard_sigma)
            )

        h = np.array([sample_acceleration(Action.HARD_ACCELERATE, rng) for _ in range(100_000)])
        _, p = scipy.stats.kstest(h, hard_cdf)
        assert p > 0.01


class TestClassify:
    @pytest.mark.parametrize(
        "a,expected",
        [
            (0.0, Action.MAINTAIN),
            (0.49, Action.MAINTAIN),
            (-0.49, Action.MAINTAIN),
            (0.5, Action.ACCELERATE),
            (1.7, Action.ACCELERATE),
            (2.49, Action.ACCELERATE),
            (2.5, Action.HARD_ACCELERATE),
            (5.0, Action.HARD_ACCELERATE),
            (-0.5, Action.DECELERATE),
            (-1.2, Action.DECELERATE),
            (-2.5, Action.HARD_DECELERATE),
            (-4.2, Action.HARD_DECELERATE),
        ],
    )
    def test_thresholds(self, a, expected):
        assert classify_acceleration(a) == expected

    def test_lane_change_dominates(self):
        assert classify_acceleration(5.0, "left") == Action.MOVE_LEFT
        assert classify_acceleration(-5.0, "right") == Action.MOVE_RIGHT

    def test_bad_lane_change(self):
        with pytest.raises(ValueError):
            classify_acceleration(0.0, "sideways")

    def test_round_trip_deterministic_kinds(self):
        rng = np.random.default_rng(1)
        for kind in (
            Action.ACCELERATE,
            Action.DECELERATE,
            Action.HARD_ACCELERATE,
            Action.HARD_DECELERATE,
        ):
            for _ in range(5_000):
                assert classify_acceleration(sample_acceleration(kind, rng)) == kind

    def test_round_trip_maintain(self):
        rng = np.random.default_rng(2)
        hits = sum(
            classify_acceleration(sample_acceleration(Action.MAINTAIN, rng)) == Action.MAINTAIN
            for _ in range(100_000)
        )
        assert hits / 100_000 > 0.9999
