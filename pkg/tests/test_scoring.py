from __future__ import annotations

import numpy as np
import pytest

from qdreplay.policy import LinearSoftmaxPolicy
from qdreplay.scoring import (
    Q_MIN,
    QualityWeights,
    composite_quality,
    normalize_uncertainty,
    predictive_uncertainty,
    rtg_quantile,
    rtg_quantiles,
    stage_coverage,
)
from qdreplay.windows import Episode, ReplayBuffer, Transition


def test_quality_weights_must_sum_to_one():
    QualityWeights(0.4, 0.3, 0.3)
    with pytest.raises(ValueError, match="sum to 1"):
        QualityWeights(0.5, 0.3, 0.3)
    with pytest.raises(ValueError, match=">= 0"):
        QualityWeights(1.2, -0.1, -0.1)


def test_quantile_mid_rank_example():
    assert rtg_quantile([1, 2, 3, 4], 2) == pytest.approx(0.625)


def test_quantile_pure_ties_give_half():
    for i in range(4):
        assert rtg_quantile([7, 7, 7, 7], i) == pytest.approx(0.5)


def test_quantile_two_point_pool():
    assert rtg_quantile([0, 100], 1) == pytest.approx(0.75)


def test_quantile_invariant_to_monotone_transform():
    rng = np.random.default_rng(0)
    returns = rng.standard_normal(25)
    base = rtg_quantiles(returns)
    for transform in (lambda g: 3 * g + 5, np.exp, lambda g: g ** 3):
        np.testing.assert_allclose(rtg_quantiles(transform(returns)), base)


def test_quantile_mean_is_half_without_ties():
    rng = np.random.default_rng(1)
    for n in (3, 10, 37):
        returns = rng.permutation(n).astype(float)
        mean = rtg_quantiles(returns).mean()
        assert abs(mean - 0.5) <= 1 / (2 * n)


def test_uncertainty_zero_for_identical_passes():
    assert predictive_uncertainty([np.array([1.0, 2.0])] * 3) == 0.0


def test_uncertainty_two_pass_example():
    assert predictive_uncertainty([np.array([0.0, 0.0]), np.array([2.0, 0.0])]) == pytest.approx(2.0)


def test_uncertainty_scalar_passes_unbiased_divisor():
    value = predictive_uncertainty([np.array([v]) for v in [0.0, 1.0, 2.0, 3.0]])
    assert value == pytest.approx(5 / 3)


def test_uncertainty_requires_two_passes():
    with pytest.raises(ValueError, match="insufficient stochastic passes"):
        predictive_uncertainty([np.array([1.0])])


def test_uncertainty_invariant_to_pass_order_and_constant_shift():
    rng = np.random.default_rng(3)
    passes = [rng.standard_normal(4) for _ in range(6)]
    base = predictive_uncertainty(passes)
    shuffled = [passes[i] for i in rng.permutation(6)]
    assert predictive_uncertainty(shuffled) == pytest.approx(base, rel=1e-12)
    shifted = [p + np.array([5.0, -2.0, 0.5, 9.0]) for p in passes]
    assert predictive_uncertainty(shifted) == pytest.approx(base, rel=1e-9)


def test_normalize_min_max():
    np.testing.assert_allclose(normalize_uncertainty([0, 5, 10]), [0.0, 0.5, 1.0])


def test_normalize_degenerate_pools():
    np.testing.assert_allclose(normalize_uncertainty([3, 3, 3]), [0.5, 0.5, 0.5])
    np.testing.assert_allclose(normalize_uncertainty([7]), [0.5])


def test_stage_coverage_eight_two_split():
    labels = [0] * 8 + [1] * 2
    scores = stage_coverage(labels, smoothing_alpha=0.0)
    np.testing.assert_allclose(scores[:8], 0.0)
    np.testing.assert_allclose(scores[8:], 0.75)


def test_stage_coverage_single_stage_is_zero():
    np.testing.assert_allclose(stage_coverage([4] * 6), 0.0)


def test_stage_coverage_smoothed_counts():
    labels = [0] * 8 + [1] * 2
    scores = stage_coverage(labels, smoothing_alpha=1.0)
    np.testing.assert_allclose(scores[8:], 1 - 3 / 9)


def test_stage_coverage_monotone_in_count():
    rng = np.random.default_rng(5)
    labels = list(rng.integers(0, 4, size=50))
    scores = stage_coverage(labels)
    counts = {c: labels.count(c) for c in set(labels)}
    per_stage = {c: scores[labels.index(c)] for c in counts}
    for a in counts:
        for b in counts:
            if counts[a] < counts[b]:
                assert per_stage[a] >= per_stage[b]


def _pool_from_rewards(rewards_per_window, stages, gamma=0.9, dim=2):
    """One single-window episode per reward sequence."""
    buf = ReplayBuffer(capacity=1000, gamma=gamma)
    windows = []
    for eid, (rewards, stage) in enumerate(zip(rewards_per_window, stages)):
        trs = [
            Transition(state=np.zeros(dim), action=0, reward=float(r), stage_label=stage,
                       done=(i == len(rewards) - 1))
            for i, r in enumerate(rewards)
        ]
        buf.append_episode(Episode(id=eid, transitions=trs))
        windows.append(buf.materialize(eid, 0, len(rewards)))
    return windows


def _deterministic_policy(dim=2, dropout=0.0):
    return LinearSoftmaxPolicy(state_dim=dim, action_count=3, feature_dim=4,
                               dropout_rate=dropout, seed=0)


def test_composite_reduces_to_quantile_with_alpha_one():
    pool = _pool_from_rewards([[1.0], [2.0]], stages=[0, 0], gamma=1.0)
    report = composite_quality(pool, QualityWeights(1, 0, 0), _deterministic_policy(),
                               passes=2, gamma=1.0, seed=0)
    np.testing.assert_allclose(report.composite, [0.25, 0.75])


def test_composite_floor_when_coverage_only_and_single_stage():
    pool = _pool_from_rewards([[1.0], [2.0], [0.5]], stages=[1, 1, 1], gamma=1.0)
    report = composite_quality(pool, QualityWeights(0, 0, 1), _deterministic_policy(),
                               passes=2, gamma=1.0, seed=0)
    np.testing.assert_allclose(report.composite, Q_MIN)


def test_composite_equal_components_give_half():
    # equal returns -> quantile 0.5; zero dropout -> equal uncertainties -> 0.5;
    # the minority stage label scores coverage 0.5 under a 2:1 split
    pool = _pool_from_rewards([[1.0], [1.0], [1.0]], stages=[0, 0, 1], gamma=1.0)
    report = composite_quality(pool, QualityWeights(1 / 3, 1 / 3, 1 / 3),
                               _deterministic_policy(), passes=3, gamma=1.0, seed=0)
    assert report.coverage[2] == pytest.approx(0.5)
    assert report.composite[2] == pytest.approx(0.5)


def test_composite_is_convex_combination_when_unfloored():
    rng = np.random.default_rng(9)
    pool = _pool_from_rewards(
        [list(rng.random(3)) for _ in range(12)],
        stages=list(rng.integers(0, 3, size=12)),
    )
    report = composite_quality(pool, QualityWeights(0.4, 0.3, 0.3),
                               _deterministic_policy(dropout=0.4), passes=5, gamma=0.9, seed=4)
    components = np.stack([report.rtg_quantile, report.uncertainty_norm, report.coverage])
    unfloored = report.composite > Q_MIN
    assert np.all(report.composite[unfloored] <= components.max(axis=0)[unfloored] + 1e-12)
    assert np.all(report.composite[unfloored] >= components.min(axis=0)[unfloored] - 1e-12)
    assert np.all(report.composite > 0)
    assert np.all(report.composite <= 1)


def test_composite_deterministic_for_seed():
    rng = np.random.default_rng(10)
    pool = _pool_from_rewards(
        [list(rng.random(3)) for _ in range(6)],
        stages=list(rng.integers(0, 2, size=6)),
    )
    policy = _deterministic_policy(dropout=0.5)
    a = composite_quality(pool, QualityWeights(0.4, 0.3, 0.3), policy, passes=4, gamma=0.9, seed=7)
    b = composite_quality(pool, QualityWeights(0.4, 0.3, 0.3), policy, passes=4, gamma=0.9, seed=7)
    np.testing.assert_array_equal(a.composite, b.composite)
    np.testing.assert_array_equal(a.uncertainty_raw, b.uncertainty_raw)


def test_report_csv_columns(tmp_path):
    pool = _pool_from_rewards([[1.0], [2.0]], stages=[0, 1], gamma=1.0)
    report = composite_quality(pool, QualityWeights(0.4, 0.3, 0.3), _deterministic_policy(),
                               passes=2, gamma=1.0, seed=0)
    path = tmp_path / "quality.csv"
    report.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "window_id,rtg_q,u_raw,u_norm,rho,q"
    assert len(lines) == 3
