"""Quality-diversity joint kernel and k-DPP subset selection.

The greedy MAP path serves production-size pools; the exhaustive optimizer,
exact subset probabilities, and exact sampler are verification machinery
shipped behind size guards.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import SimilarityMatrix

DEFAULT_LAMBDA = 1e-3
# Residual variance below this counts as numerically spanned: greedy stops early.
EPS_PD = 1e-10
# Cholesky pivot threshold below which a submatrix counts as singular.
CHOL_EPS = 1e-12
EXHAUSTIVE_GUARD = 10 ** 6
EIG_RANK_TOL = 1e-10


@dataclass
class JointKernel:
    values: np.ndarray
    lam: float
    quality: np.ndarray

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def write_csv(self, path: str | Path, header_comment: str | None = None) -> None:
        """Row-major dump preceded by a one-line (N, lambda) header."""
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh)
            writer.writerow([self.size, repr(float(self.lam))])
            for row in self.values:
                writer.writerow([repr(float(x)) for x in row])


@dataclass
class SelectionResult:
    indices: list[int]
    gains: list[float]
    logdet: float

    def to_json(self, extra: dict | None = None) -> str:
        payload = dict(extra) if extra else {}
        payload.update({
            "indices": self.indices,
            "gains": self.gains,
            "logdet": self.logdet,
        })
        return json.dumps(payload)


def build_joint_kernel(
    similarity: SimilarityMatrix | np.ndarray,
    quality: Sequence[float],
    lam: float = DEFAULT_LAMBDA,
) -> JointKernel:
    """L_ij = sqrt(q_i) * S_ij * sqrt(q_j), plus lam on the diagonal.

    Each entry's association strength is the similarity modulated by the
    geometric mean of the two windows' qualities, so low-quality items lose
    influence on the whole diversity structure.
    """
    s = similarity.values if isinstance(similarity, SimilarityMatrix) else np.asarray(similarity, dtype=float)
    q = np.asarray(quality, dtype=float)
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"similarity must be square, got {s.shape}")
    if q.shape[0] != s.shape[0]:
        raise ValueError(f"quality length {q.shape[0]} != similarity size {s.shape[0]}")
    if np.any(q <= 0):
        raise ValueError("quality scores must be strictly positive (floor upstream)")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    root = np.sqrt(q)
    values = (root[:, None] * s) * root[None, :]
    values[np.diag_indices_from(values)] += lam
    return JointKernel(values=values, lam=float(lam), quality=q.copy())


def _kernel_values(kernel: JointKernel | np.ndarray) -> np.ndarray:
    if isinstance(kernel, JointKernel):
        return kernel.values
    return np.asarray(kernel, dtype=float)


def log_det(kernel: JointKernel | np.ndarray, subset: Sequence[int]) -> float:
    """log det of the principal submatrix via Cholesky.

    Returns 0 for the empty subset and -inf when a pivot falls at or below
    the singularity threshold.
    """
    values = _kernel_values(kernel)
    idx = list(subset)
    if len(idx) == 0:
        return 0.0
    if len(set(idx)) != len(idx) or min(idx) < 0 or max(idx) >= values.shape[0]:
        raise ValueError(f"invalid subset {idx} for kernel of size {values.shape[0]}")
    a = values[np.ix_(idx, idx)].astype(float, copy=True)
    m = len(idx)
    acc = 0.0
    for j in range(m):
        pivot = a[j, j]
        if pivot <= CHOL_EPS:
            return -math.inf
        acc += math.log(pivot)
        root = math.sqrt(pivot)
        a[j, j:] /= root
        if j + 1 < m:
            a[j + 1:, j + 1:] -= np.outer(a[j, j + 1:], a[j, j + 1:])
    return acc


def greedy_map(kernel: JointKernel | np.ndarray, k: int) -> SelectionResult:
    """Greedy MAP subset of size k by largest marginal log-det gain.

    Each step picks the candidate with the largest residual variance
    (the Schur complement of the current selection, log of which is the
    marginal gain) and downdates the full residual kernel, so a step costs
    O(N^2) and a full run O(k N^2). Ties break to the lowest index. When
    every remaining residual is at most EPS_PD the selection stops early
    and fewer than k indices are returned.
    """
    values = _kernel_values(kernel)
    n = values.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    residual = values.astype(float, copy=True)
    alive = np.ones(n, dtype=bool)
    indices: list[int] = []
    gains: list[float] = []
    for _ in range(k):
        diag = np.where(alive, np.diagonal(residual), -np.inf)
        j = int(np.argmax(diag))
        if diag[j] <= EPS_PD:
            break
        gains.append(float(np.log(diag[j])))
        col = residual[:, j].copy()
        residual -= np.outer(col, col) / diag[j]
        alive[j] = False
        indices.append(j)
    return SelectionResult(indices=indices, gains=gains, logdet=float(sum(gains)))


def exhaustive_map(kernel: JointKernel | np.ndarray, k: int) -> SelectionResult:
    """Exact argmax of log det over all size-k subsets (verification oracle).

    Guarded to C(N, k) <= 10^6 combinations; ties go to the lexicographically
    smallest index set because enumeration is in lexicographic order.
    """
    values = _kernel_values(kernel)
    n = values.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if math.comb(n, k) > EXHAUSTIVE_GUARD:
        raise ValueError(
            f"C({n},{k}) exceeds the enumeration guard ({EXHAUSTIVE_GUARD}); use greedy_map"
        )
    best_subset: tuple[int, ...] | None = None
    best = -math.inf
    for subset in itertools.combinations(range(n), k):
        ld = log_det(values, subset)
        if ld > best:
            best = ld
            best_subset = subset
    assert best_subset is not None
    return SelectionResult(indices=list(best_subset), gains=[], logdet=float(best))


def _psd_eigenvalues(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    eigvals, eigvecs = np.linalg.eigh((values + values.T) / 2.0)
    return np.maximum(eigvals, 0.0), eigvecs


def elementary_symmetric(eigvals: np.ndarray, k: int) -> np.ndarray:
    """e_0..e_k of the eigenvalues by the standard DP recurrence."""
    return _esp_table(np.asarray(eigvals, dtype=float), k)[:, len(eigvals)]


def kdpp_subset_probability(kernel: JointKernel | np.ndarray, subset: Sequence[int]) -> float:
    """Exact probability of one size-k subset: det(L_Y) / e_k(eigenvalues)."""
    values = _kernel_values(kernel)
    n = values.shape[0]
    if n > 20:
        raise ValueError(f"subset probabilities are verification-scale only (N <= 20, got {n})")
    idx = list(subset)
    if len(set(idx)) != len(idx) or not idx or min(idx) < 0 or max(idx) >= n:
        raise ValueError(f"invalid subset {idx}")
    eigvals, _ = _psd_eigenvalues(values)
    normalizer = elementary_symmetric(eigvals, len(idx))[len(idx)]
    det = float(np.linalg.det(values[np.ix_(idx, idx)]))
    return max(det, 0.0) / normalizer


def kdpp_sample(kernel: JointKernel | np.ndarray, k: int, seed) -> list[int]:
    """Exact size-k DPP draw (verification-scale, N <= 64).

    Eigenvectors are first subsampled with the elementary-symmetric-polynomial
    recursion, then items are drawn by sequential orthogonal projection, so
    the output distribution matches kdpp_subset_probability.
    """
    values = _kernel_values(kernel)
    n = values.shape[0]
    if n > 64:
        raise ValueError(f"exact sampling is verification-scale only (N <= 64, got {n})")
    eigvals, eigvecs = _psd_eigenvalues(values)
    rank = int(np.count_nonzero(eigvals > EIG_RANK_TOL))
    if not 1 <= k <= rank:
        raise ValueError(f"k={k} exceeds numerical rank {rank}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    table = _esp_table(eigvals, k)
    chosen_vectors = _sample_eigenvector_subset(eigvals, k, table, rng)
    return _sample_from_projection(eigvecs[:, chosen_vectors], rng)


def _esp_table(eigvals: np.ndarray, k: int) -> np.ndarray:
    n = len(eigvals)
    table = np.zeros((k + 1, n + 1))
    table[0, :] = 1.0
    for j in range(1, k + 1):
        for m in range(1, n + 1):
            table[j, m] = table[j, m - 1] + eigvals[m - 1] * table[j - 1, m - 1]
    return table


def _sample_eigenvector_subset(
    eigvals: np.ndarray, k: int, table: np.ndarray, rng: np.random.Generator
) -> list[int]:
    chosen = []
    j = k
    for m in range(len(eigvals), 0, -1):
        if j == 0:
            break
        if table[j, m] <= 0.0:
            continue
        p_include = eigvals[m - 1] * table[j - 1, m - 1] / table[j, m]
        if rng.random() < p_include:
            chosen.append(m - 1)
            j -= 1
    if j != 0:
        raise RuntimeError("eigenvector subsampling failed to reach size k")
    return chosen


def _sample_from_projection(v: np.ndarray, rng: np.random.Generator) -> list[int]:
    """Draw |columns(v)| items from the projection DPP spanned by v."""
    v = v.copy()
    picked: list[int] = []
    while v.shape[1] > 0:
        weights = np.sum(v ** 2, axis=1)
        probs = weights / weights.sum()
        item = int(rng.choice(len(probs), p=probs))
        picked.append(item)
        # Condition on the pick: remove the component along e_item, drop a column.
        col = int(np.argmax(np.abs(v[item, :])))
        pivot = v[:, col].copy()
        v = v - np.outer(pivot, v[item, :] / v[item, col])
        v = np.delete(v, col, axis=1)
        if v.shape[1] > 0:
            q, _ = np.linalg.qr(v)
            v = q
    return sorted(picked)
