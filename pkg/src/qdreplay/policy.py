"""Pluggable sequence-policy interface and a toy linear-softmax instantiation."""

from __future__ import annotations

import json
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .windows import TrajectoryWindow

PARAMS_FORMAT_VERSION = 1


@runtime_checkable
class SequencePolicy(Protocol):
    """What the selection pipeline needs from a policy model.

    ``encode`` must be deterministic; ``predict_mean`` must be deterministic
    per (window, pass_seed) but may vary across pass seeds.
    """

    def encode(self, window: TrajectoryWindow) -> np.ndarray: ...

    def predict_mean(self, window: TrajectoryWindow, pass_seed) -> np.ndarray: ...

    def action_log_prob(self, window: TrajectoryWindow, step: int) -> float: ...

    def weighted_update(
        self, batch: Sequence[TrajectoryWindow], weights: Sequence[float], learning_rate: float
    ) -> float: ...


class LinearSoftmaxPolicy:
    """Linear-softmax sequence model over per-step (state, rtg) features.

    A fixed seeded projection maps each step's concatenated (state, rtg)
    vector to ``feature_dim`` latent features; a trainable matrix maps
    features to action logits. The window embedding is the mean of the
    projected step features (dropout disabled), so embeddings do not drift
    as the logit weights train.
    """

    def __init__(
        self,
        state_dim: int,
        action_count: int,
        feature_dim: int = 16,
        dropout_rate: float = 0.1,
        seed: int | np.random.SeedSequence = 0,
        projection: np.ndarray | None = None,
    ):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        if action_count < 2:
            raise ValueError("need at least two discrete actions")
        self.state_dim = int(state_dim)
        self.action_count = int(action_count)
        self.dropout_rate = float(dropout_rate)
        in_dim = self.state_dim + 1  # state features plus the step's return-to-go
        rng = np.random.default_rng(seed)
        if projection is None:
            self.projection = rng.standard_normal((feature_dim, in_dim)) / np.sqrt(in_dim)
        else:
            self.projection = np.asarray(projection, dtype=float)
            if self.projection.shape[1] != in_dim:
                raise ValueError(
                    f"projection expects {self.projection.shape[1]} inputs, windows provide {in_dim}"
                )
        self.feature_dim = self.projection.shape[0]
        self.weights = 0.1 * rng.standard_normal((self.feature_dim, self.action_count))

    # ---------------------------------------------------------------- features

    def _step_inputs(self, window: TrajectoryWindow) -> np.ndarray:
        if window.states.shape[1] != self.state_dim:
            raise ValueError(
                f"state dim mismatch: policy expects {self.state_dim}, window has {window.states.shape[1]}"
            )
        return np.hstack([window.states, window.rtg[:, None]])  # (H, d_s + 1)

    def _step_features(self, window: TrajectoryWindow) -> np.ndarray:
        return self._step_inputs(window) @ self.projection.T  # (H, feature_dim)

    def encode(self, window: TrajectoryWindow) -> np.ndarray:
        """Deterministic window embedding: mean of projected step features."""
        return self._step_features(window).mean(axis=0)

    def state_features(self, state: np.ndarray, rtg: float) -> np.ndarray:
        x = np.concatenate([np.asarray(state, dtype=float), [float(rtg)]])
        return self.projection @ x

    # ---------------------------------------------------------------- stochastic pass

    def _dropout_mask(self, pass_seed) -> np.ndarray:
        rng = np.random.default_rng(pass_seed)
        keep = 1.0 - self.dropout_rate
        return (rng.random(self.feature_dim) < keep).astype(float) / keep

    def predict_mean(self, window: TrajectoryWindow, pass_seed) -> np.ndarray:
        """Mean action-logit vector over the window under one dropout mask.

        The mask is a seeded Bernoulli(1 - dropout_rate) draw over latent
        features with inverted scaling, shared across the window's steps.
        """
        feats = self._step_features(window)
        if self.dropout_rate > 0.0:
            feats = feats * self._dropout_mask(pass_seed)
        logits = feats @ self.weights  # (H, A)
        return logits.mean(axis=0)

    # ---------------------------------------------------------------- likelihoods

    def action_log_probs(self, window: TrajectoryWindow, step: int) -> np.ndarray:
        """Log-softmax over actions at one window step (deterministic pass)."""
        if not 0 <= step < window.horizon:
            raise ValueError(f"step {step} outside window of horizon {window.horizon}")
        logits = self._step_features(window)[step] @ self.weights
        return logits - _logsumexp(logits)

    def action_log_prob(self, window: TrajectoryWindow, step: int) -> float:
        return float(self.action_log_probs(window, step)[int(window.actions[step])])

    def act(self, state: np.ndarray, rtg: float, rng: np.random.Generator | None = None,
            greedy: bool = False) -> int:
        logits = self.weights.T @ self.state_features(state, rtg)
        if greedy or rng is None:
            return int(np.argmax(logits))
        probs = np.exp(logits - _logsumexp(logits))
        return int(rng.choice(self.action_count, p=probs / probs.sum()))

    # ---------------------------------------------------------------- training

    def _batch_terms(self, batch: Sequence[TrajectoryWindow], weights: Sequence[float]):
        feats, targets, step_w = [], [], []
        for window, w in zip(batch, weights, strict=True):
            f = self._step_features(window)
            feats.append(f)
            targets.append(np.asarray(window.actions, dtype=int))
            step_w.append(np.full(window.horizon, float(w)))
        return np.vstack(feats), np.concatenate(targets), np.concatenate(step_w)

    def batch_loss(self, batch: Sequence[TrajectoryWindow], weights: Sequence[float]) -> float:
        """Weighted negative log-likelihood of the taken actions."""
        if len(batch) == 0:
            return 0.0
        feats, targets, step_w = self._batch_terms(batch, weights)
        logits = feats @ self.weights
        logz = _logsumexp_rows(logits)
        nll = logz - logits[np.arange(len(targets)), targets]
        return float(np.dot(step_w, nll))

    def weighted_update(
        self, batch: Sequence[TrajectoryWindow], weights: Sequence[float], learning_rate: float
    ) -> float:
        """One gradient-descent step on the weighted NLL; returns pre-step loss."""
        if len(batch) == 0:
            return 0.0
        w = np.asarray(list(weights), dtype=float)
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be positive and finite")
        feats, targets, step_w = self._batch_terms(batch, w)
        logits = feats @ self.weights
        logz = _logsumexp_rows(logits)
        loss = float(np.dot(step_w, logz - logits[np.arange(len(targets)), targets]))
        probs = np.exp(logits - logz[:, None])
        probs[np.arange(len(targets)), targets] -= 1.0
        grad = feats.T @ (probs * step_w[:, None])
        if not np.all(np.isfinite(grad)):
            raise ValueError("non-finite gradient in weighted_update")
        self.weights = self.weights - learning_rate * grad
        return loss

    # ---------------------------------------------------------------- serialization

    def get_params(self) -> np.ndarray:
        return self.weights.ravel().copy()

    def set_params(self, flat: np.ndarray) -> None:
        self.weights = np.asarray(flat, dtype=float).reshape(self.weights.shape).copy()

    def to_json(self) -> str:
        payload = {
            "format_version": PARAMS_FORMAT_VERSION,
            "state_dim": self.state_dim,
            "action_count": self.action_count,
            "feature_dim": self.feature_dim,
            "dropout_rate": self.dropout_rate,
            "projection": self.projection.ravel().tolist(),
            "weights": self.weights.ravel().tolist(),
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "LinearSoftmaxPolicy":
        payload = json.loads(text)
        version = payload.get("format_version")
        if version != PARAMS_FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format version {version}")
        policy = cls(
            state_dim=payload["state_dim"],
            action_count=payload["action_count"],
            feature_dim=payload["feature_dim"],
            dropout_rate=payload["dropout_rate"],
            projection=np.asarray(payload["projection"]).reshape(
                payload["feature_dim"], payload["state_dim"] + 1
            ),
        )
        policy.set_params(np.asarray(payload["weights"]))
        return policy


def _logsumexp(x: np.ndarray) -> float:
    m = np.max(x)
    return float(m + np.log(np.sum(np.exp(x - m))))


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))).ravel()
