"""Composite per-window quality scores: return quantile, uncertainty, coverage."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import SequencePolicy
from .windows import TrajectoryWindow, discounted_window_return

# Floor keeping the joint kernel's diagonal strictly positive before
# regularization; only affects tie-breaking among zero-quality windows.
Q_MIN = 1e-6


@dataclass(frozen=True)
class QualityWeights:
    alpha: float
    beta: float
    zeta: float

    def __post_init__(self):
        for name, v in (("alpha", self.alpha), ("beta", self.beta), ("zeta", self.zeta)):
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        if abs(self.alpha + self.beta + self.zeta - 1.0) > 1e-12:
            raise ValueError(
                f"weights must sum to 1, got {self.alpha + self.beta + self.zeta!r}"
            )


@dataclass
class QualityReport:
    rtg_quantile: np.ndarray
    uncertainty_raw: np.ndarray
    uncertainty_norm: np.ndarray
    coverage: np.ndarray
    composite: np.ndarray

    def __len__(self) -> int:
        return len(self.composite)

    def write_csv(self, path: str | Path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["window_id", "rtg_q", "u_raw", "u_norm", "rho", "q"])
            for i in range(len(self)):
                writer.writerow([
                    i,
                    repr(float(self.rtg_quantile[i])),
                    repr(float(self.uncertainty_raw[i])),
                    repr(float(self.uncertainty_norm[i])),
                    repr(float(self.coverage[i])),
                    repr(float(self.composite[i])),
                ])


def rtg_quantile(window_returns: Sequence[float], target_index: int) -> float:
    """Mid-rank empirical quantile of one return within the pool.

    (#strictly below + half the ties) / pool size, so the score is invariant
    to any strictly increasing transform of the returns and ties are scored
    symmetrically.
    """
    returns = np.asarray(window_returns, dtype=float)
    if returns.size == 0:
        raise ValueError("window_returns must be non-empty")
    if not 0 <= target_index < returns.size:
        raise ValueError(f"target_index {target_index} outside pool of {returns.size}")
    g = returns[target_index]
    below = np.count_nonzero(returns < g)
    ties = np.count_nonzero(returns == g)
    return (below + 0.5 * ties) / returns.size


def rtg_quantiles(window_returns: Sequence[float]) -> np.ndarray:
    returns = np.asarray(window_returns, dtype=float)
    return np.array([rtg_quantile(returns, i) for i in range(returns.size)])


def predictive_uncertainty(predictions: Sequence[np.ndarray]) -> float:
    """Trace of the unbiased sample covariance across stochastic-pass means."""
    stack = np.stack([np.asarray(p, dtype=float) for p in predictions])
    if stack.shape[0] < 2:
        raise ValueError("insufficient stochastic passes: need M >= 2")
    centered = stack - stack.mean(axis=0)
    per_dim_var = (centered ** 2).sum(axis=0) / (stack.shape[0] - 1)
    return float(per_dim_var.sum())


def normalize_uncertainty(raw: Sequence[float]) -> np.ndarray:
    """Pool-wise min-max normalization; degenerate all-equal pools map to 0.5."""
    values = np.asarray(raw, dtype=float)
    if values.size == 0:
        raise ValueError("raw uncertainties must be non-empty")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ValueError("raw uncertainties must be finite and non-negative")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def stage_coverage(stage_labels: Sequence[int], smoothing_alpha: float = 0.0) -> np.ndarray:
    """Inverse-frequency rarity score: 1 - freq(label) / max freq.

    Counts get add-alpha smoothing so extremely rare outliers are not
    overemphasized; the most frequent stage scores exactly 0 when alpha is 0.
    """
    labels = [int(x) for x in stage_labels]
    if any(x < 0 for x in labels):
        raise ValueError("stage labels must be non-negative")
    if smoothing_alpha < 0:
        raise ValueError("smoothing_alpha must be >= 0")
    counts = Counter(labels)
    freq = {c: n + smoothing_alpha for c, n in counts.items()}
    top = max(freq.values())
    return np.array([1.0 - freq[x] / top for x in labels])


def composite_quality(
    pool: Sequence[TrajectoryWindow],
    weights: QualityWeights,
    model: SequencePolicy,
    passes: int,
    gamma: float,
    seed: int,
    smoothing_alpha: float = 0.0,
    stage_labels: Sequence[int] | None = None,
    use_episode_rtg: bool = False,
) -> QualityReport:
    """Score every window in the pool and combine the three components.

    The stochastic passes reuse one dropout mask per pass index across all
    windows, keyed by (seed, m) for m = 1..passes, so reruns with the same
    seed reproduce bit-identically. ``use_episode_rtg`` switches the return
    component from the window-truncated discounted sum to the stored
    episode-level return-to-go at the window start.
    """
    if len(pool) == 0:
        raise ValueError("pool must be non-empty")
    if use_episode_rtg:
        returns = np.array([w.rtg[0] for w in pool])
    else:
        returns = np.array([discounted_window_return(w, gamma) for w in pool])
    rtg_q = rtg_quantiles(returns)

    raw = np.array([
        predictive_uncertainty([model.predict_mean(w, (seed, m)) for m in range(1, passes + 1)])
        for w in pool
    ])
    u_norm = normalize_uncertainty(raw)

    labels = [w.stage_label for w in pool] if stage_labels is None else list(stage_labels)
    if len(labels) != len(pool):
        raise ValueError("stage_labels length must match pool size")
    rho = stage_coverage(labels, smoothing_alpha)

    q = weights.alpha * rtg_q + weights.beta * u_norm + weights.zeta * rho
    q = np.maximum(q, Q_MIN)
    return QualityReport(
        rtg_quantile=rtg_q,
        uncertainty_raw=raw,
        uncertainty_norm=u_norm,
        coverage=rho,
        composite=q,
    )
