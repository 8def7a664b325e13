"""Synthetic staged-chain benchmark: orchestrator loop, variants, metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .geometry import encode_pool, median_bandwidth, rbf_similarity
from .kernels import DEFAULT_LAMBDA, build_joint_kernel, greedy_map, log_det
from .policy import LinearSoftmaxPolicy
from .replay import WeightMode, mixed_sample, normalize_weights
from .scoring import QualityWeights, composite_quality
from .windows import Episode, ReplayBuffer, Transition

DIVERSITY_EPS = 1e-6


class Variant(Enum):
    FULL = "FULL"
    QUALITY_ONLY = "QUALITY_ONLY"
    DIVERSITY_ONLY = "DIVERSITY_ONLY"
    UNIFORM = "UNIFORM"


@dataclass
class StepOutcome:
    obs: np.ndarray
    reward: float
    done: bool
    stage: int       # ground-truth stage before the step
    success: bool


class StageChainEnv:
    """Sparse-reward chain of sub-task stages with skewed stage lengths.

    Each stage has one correct action; a correct executed action advances
    progress, anything else stalls. Actions slip to a uniform random action
    with probability ``noise``. Reward is 0 per step and 1 on completing the
    final stage; episodes cap at ``t_max`` steps. The final stage is kept
    deliberately short so it is rare in collected data.
    """

    def __init__(
        self,
        num_stages: int = 4,
        steps_per_stage: Sequence[int] = (12, 12, 12, 4),
        action_count: int = 6,
        noise: float = 0.1,
        t_max: int = 60,
    ):
        if len(steps_per_stage) != num_stages:
            raise ValueError("steps_per_stage must list one length per stage")
        if any(s < 1 for s in steps_per_stage):
            raise ValueError("stage lengths must be >= 1")
        if action_count < 2:
            raise ValueError("need at least two actions")
        if not 0.0 <= noise < 1.0:
            raise ValueError("noise must be in [0, 1)")
        self.num_stages = int(num_stages)
        self.steps_per_stage = tuple(int(s) for s in steps_per_stage)
        self.action_count = int(action_count)
        self.noise = float(noise)
        self.t_max = int(t_max)
        self._stage = 0
        self._progress = 0
        self._t = 0

    @property
    def state_dim(self) -> int:
        return 2 * self.num_stages

    def correct_action(self, stage: int) -> int:
        return stage % self.action_count

    def observation(self) -> np.ndarray:
        # One-hot stage plus progress gated per stage; keeping the continuous
        # coordinate factored by stage lets a linear policy fit each stage
        # independently. All-zero marks the terminal (post-success) state.
        obs = np.zeros(self.state_dim)
        if self._stage < self.num_stages:
            obs[self._stage] = 1.0
            obs[self.num_stages + self._stage] = self._progress / self.steps_per_stage[self._stage]
        return obs

    def reset(self) -> np.ndarray:
        self._stage = 0
        self._progress = 0
        self._t = 0
        return self.observation()

    def step(self, action: int, rng: np.random.Generator) -> StepOutcome:
        if self._t >= self.t_max or self._stage >= self.num_stages:
            raise RuntimeError("step() called on a finished episode")
        stage_before = self._stage
        executed = int(action)
        if self.noise > 0.0 and rng.random() < self.noise:
            executed = int(rng.integers(self.action_count))
        if executed == self.correct_action(self._stage):
            self._progress += 1
            if self._progress >= self.steps_per_stage[self._stage]:
                self._stage += 1
                self._progress = 0
        self._t += 1
        success = self._stage >= self.num_stages
        done = success or self._t >= self.t_max
        reward = 1.0 if success else 0.0
        return StepOutcome(self.observation(), reward, done, stage_before, success)


class RandomPolicy:
    """Uniform-random actor satisfying the act() protocol used by rollouts."""

    def __init__(self, action_count: int):
        self.action_count = int(action_count)

    def act(self, state, rtg, rng=None, greedy: bool = False) -> int:
        if rng is None:
            raise ValueError("RandomPolicy needs an explicit rng")
        return int(rng.integers(self.action_count))


class ScriptedDemonstrator:
    """Noisy expert: correct action with probability 1 - epsilon, else random.

    Stand-in for pre-collected logs so sparse-reward learning has successful
    trajectories to condition on; identical across ablation variants.
    """

    def __init__(self, env: StageChainEnv, epsilon: float):
        self.env = env
        self.epsilon = float(epsilon)

    def act(self, state, rtg, rng=None, greedy: bool = False) -> int:
        if rng is not None and rng.random() < self.epsilon:
            return int(rng.integers(self.env.action_count))
        stage = int(np.argmax(state[: self.env.num_stages]))
        if state[: self.env.num_stages].max() == 0.0:
            stage = self.env.num_stages - 1
        return self.env.correct_action(stage)


def rollout(env: StageChainEnv, actor, rng: np.random.Generator,
            rtg_target: float = 1.0, greedy: bool = False):
    """Run one episode; returns (transitions, success)."""
    obs = env.reset()
    rtg_hint = rtg_target
    transitions: list[Transition] = []
    success = False
    while True:
        action = actor.act(obs, rtg_hint, rng=rng, greedy=greedy)
        outcome = env.step(action, rng)
        transitions.append(Transition(
            state=obs,
            action=action,
            reward=outcome.reward,
            stage_label=outcome.stage,
            done=outcome.done,
        ))
        rtg_hint = max(rtg_hint - outcome.reward, 0.0)
        obs = outcome.obs
        success = success or outcome.success
        if outcome.done:
            return transitions, success


def evaluate_policy(policy, env: StageChainEnv, episodes: int, seed) -> float:
    """Fraction of greedy-action rollouts that reach task success."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    wins = 0
    for _ in range(episodes):
        _, success = rollout(env, policy, rng, greedy=True)
        wins += int(success)
    return wins / episodes


def diversity_metric(similarity_subset: np.ndarray) -> float:
    """Per-item geometric-mean volume of the selected similarity submatrix.

    det(S_Y + eps*I)^(1/|Y|): 1 for mutually orthogonal selections, toward 0
    as the selection accumulates duplicates.
    """
    s = np.asarray(similarity_subset, dtype=float)
    m = s.shape[0]
    if m == 0:
        raise ValueError("selection must be non-empty")
    ld = log_det(s + DIVERSITY_EPS * np.eye(m), list(range(m)))
    if ld == -math.inf:
        return 0.0
    return float(math.exp(ld / m))


def redundancy_metric(embeddings: np.ndarray, tau: float) -> float:
    """Fraction of selected windows whose nearest selected neighbor is within tau."""
    z = np.asarray(embeddings, dtype=float)
    if z.shape[0] < 2:
        return 0.0
    diff = z[:, None, :] - z[None, :, :]
    d = np.sqrt(np.sum(diff ** 2, axis=2))
    np.fill_diagonal(d, np.inf)
    return float(np.mean(d.min(axis=1) <= tau))


def redundancy_threshold(pool_embeddings: np.ndarray) -> float:
    """Default near-neighbor threshold: a tenth of the pool's median distance."""
    return 0.1 * median_bandwidth(pool_embeddings)


@dataclass
class LoopConfig:
    """Knobs of the selection-and-replay loop plus the synthetic environment.

    Defaults keep the subset ratio and mix ratio inside the regime where
    selection behavior is stable (subset_size/pool_size around 0.15, eta 0.7)
    and refresh selection every 500 gradient steps.
    """

    horizon: int = 8
    pool_size: int = 40
    subset_size: int = 6
    refresh_period: int = 500
    eta: float = 0.7
    batch_size: int = 32
    alpha: float = 0.4
    beta: float = 0.3
    zeta: float = 0.3
    sigma: float | None = None           # None = median-of-pairwise-distances
    lam: float = DEFAULT_LAMBDA
    passes: int = 5
    gamma: float = 1.0
    episodes: int = 300
    warmup_episodes: int = 60
    demo_epsilon: float = 0.2
    pretrain_steps: int = 800
    updates_per_episode: int = 4
    eval_every: int = 50
    eval_episodes: int = 200
    learning_rate: float = 1e-3
    feature_dim: int = 16
    dropout_rate: float = 0.2
    capacity: int = 100_000
    weight_mode: WeightMode = WeightMode.MEAN_ONE
    smoothing_alpha: float = 1.0
    rtg_target: float = 1.0
    num_stages: int = 4
    steps_per_stage: tuple = (12, 12, 12, 4)
    action_count: int = 6
    slip: float = 0.1
    t_max: int = 60

    def validate(self) -> None:
        if self.horizon < 1 or self.pool_size < 1 or self.batch_size < 1:
            raise ValueError("horizon, pool_size and batch_size must be >= 1")
        if not 1 <= self.subset_size <= self.pool_size:
            raise ValueError("subset_size must be in [1, pool_size]")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if self.passes < 2:
            raise ValueError("passes must be >= 2")
        if self.episodes < 1 or self.updates_per_episode < 1:
            raise ValueError("episodes and updates_per_episode must be >= 1")
        if self.eval_every < 1 or self.eval_episodes < 1:
            raise ValueError("eval_every and eval_episodes must be >= 1")
        QualityWeights(self.alpha, self.beta, self.zeta)

    def quality_weights(self) -> QualityWeights:
        return QualityWeights(self.alpha, self.beta, self.zeta)

    def make_env(self) -> StageChainEnv:
        return StageChainEnv(
            num_stages=self.num_stages,
            steps_per_stage=self.steps_per_stage,
            action_count=self.action_count,
            noise=self.slip,
            t_max=self.t_max,
        )


@dataclass
class RunMetrics:
    gradient_steps: int
    episodes_used: int
    success_rate: float
    diversity: float
    redundancy: float


@dataclass
class RunResult:
    variant: Variant
    seed: int
    metrics: list[RunMetrics]
    selection_events: list[dict]
    selected_stage_counts: Counter = field(default_factory=Counter)

    def final_success(self) -> float:
        return self.metrics[-1].success_rate if self.metrics else 0.0

    def mean_diversity(self) -> float:
        return float(np.mean([m.diversity for m in self.metrics])) if self.metrics else 0.0

    def mean_redundancy(self) -> float:
        return float(np.mean([m.redundancy for m in self.metrics])) if self.metrics else 0.0

    def stage_frequency(self, stage: int) -> float:
        total = sum(self.selected_stage_counts.values())
        if total == 0:
            return 0.0
        return self.selected_stage_counts.get(stage, 0) / total


class _WindowIndex:
    """Deterministic global ordering over all valid (episode, start) windows."""

    def __init__(self, buffer: ReplayBuffer, horizon: int):
        self.buffer = buffer
        self.horizon = horizon
        self.pairs: list[tuple[int, int]] = []
        self.position: dict[tuple[int, int], int] = {}
        self._signature: tuple[int, int] | None = None
        self.sync()

    def sync(self) -> None:
        episodes = self.buffer.episodes
        signature = (episodes[0].id, episodes[-1].id) if episodes else None
        if signature == self._signature:
            return
        self.pairs = self.buffer.valid_windows(self.horizon)
        self.position = {pair: i for i, pair in enumerate(self.pairs)}
        self._signature = signature

    def __len__(self) -> int:
        return len(self.pairs)


def run_loop(
    config: LoopConfig,
    variant: Variant,
    seed: int,
    metrics_callback: Callable[[RunMetrics], None] | None = None,
    audit_callback: Callable[[dict], None] | None = None,
) -> RunResult:
    """Collect / refresh-select / mixed-replay / update until the episode budget ends.

    FULL selects via greedy MAP on the quality-diversity kernel;
    QUALITY_ONLY takes the top-q windows without a kernel; DIVERSITY_ONLY
    gives every window equal quality before the kernel; UNIFORM performs no
    selection, so every batch is a plain uniform replay with unit weights.
    Selection refreshes when no selection exists yet or at gradient steps
    divisible by the refresh period. Fully deterministic per (config, seed).
    """
    config.validate()
    ss = np.random.SeedSequence(seed)
    (policy_ss, warmup_ss, pretrain_ss, collect_ss, pool_ss, score_ss,
     replay_ss, eval_ss, pseudo_ss) = ss.spawn(9)

    env = config.make_env()
    eval_env = config.make_env()
    policy = LinearSoftmaxPolicy(
        state_dim=env.state_dim,
        action_count=env.action_count,
        feature_dim=config.feature_dim,
        dropout_rate=config.dropout_rate,
        seed=policy_ss,
    )
    buffer = ReplayBuffer(capacity=config.capacity, gamma=config.gamma)

    warmup_rng = np.random.default_rng(warmup_ss)
    demonstrator = ScriptedDemonstrator(env, config.demo_epsilon)
    for _ in range(config.warmup_episodes):
        transitions, _ = rollout(env, demonstrator, warmup_rng, config.rtg_target)
        buffer.append_episode(Episode(id=buffer.new_episode_id(), transitions=transitions))

    # Pretraining pass on the warm-start logs, identical for every variant, so
    # online collection starts from a competent policy instead of cloning noise.
    pretrain_rng = np.random.default_rng(pretrain_ss)
    warm_pairs = buffer.valid_windows(config.horizon) if len(buffer) else []
    if warm_pairs:
        unit = np.ones(config.batch_size)
        for _ in range(config.pretrain_steps):
            picks = pretrain_rng.integers(0, len(warm_pairs), size=config.batch_size)
            windows = [buffer.materialize(*warm_pairs[i], config.horizon) for i in picks]
            policy.weighted_update(windows, unit, config.learning_rate)

    collect_rng = np.random.default_rng(collect_ss)
    pool_rng = np.random.default_rng(pool_ss)
    score_rng = np.random.default_rng(score_ss)
    replay_rng = np.random.default_rng(replay_ss)
    pseudo_rng = np.random.default_rng(pseudo_ss)

    index = _WindowIndex(buffer, config.horizon)
    result = RunResult(variant=variant, seed=seed, metrics=[], selection_events=[])
    state: dict = {"pool": None, "embeddings": None, "similarity": None, "selection": None}
    grad_step = 0

    def refresh() -> None:
        pool = buffer.sample_candidate_pool(config.pool_size, config.horizon, pool_rng)
        embeddings = encode_pool(pool, policy)
        sigma = config.sigma if config.sigma is not None else median_bandwidth(embeddings)
        similarity = rbf_similarity(embeddings, sigma)
        if variant is Variant.DIVERSITY_ONLY:
            quality = np.ones(len(pool))
        else:
            quality = composite_quality(
                pool,
                config.quality_weights(),
                policy,
                passes=config.passes,
                gamma=config.gamma,
                seed=int(score_rng.integers(2 ** 31)),
                smoothing_alpha=config.smoothing_alpha,
            ).composite
        kernel = build_joint_kernel(similarity, quality, config.lam)
        k_eff = min(config.subset_size, len(pool))
        if variant is Variant.QUALITY_ONLY:
            order = np.argsort(-quality, kind="stable")
            chosen = [int(i) for i in order[:k_eff]]
            logdet = log_det(kernel, chosen)
        else:
            selection = greedy_map(kernel, k_eff)
            chosen = selection.indices
            logdet = selection.logdet
        state["pool"] = pool
        state["embeddings"] = embeddings
        state["similarity"] = similarity
        state["selection"] = chosen
        index.sync()
        global_ids = [index.position[(pool[i].episode_id, pool[i].start)] for i in chosen]
        event = {"step": grad_step, "Y": global_ids, "logdet": float(logdet)}
        result.selection_events.append(event)
        if audit_callback:
            audit_callback(event)
        for i in chosen:
            result.selected_stage_counts[pool[i].stage_label] += 1

    def selection_global_ids() -> list[int]:
        pool = state["pool"]
        return [
            index.position[pair]
            for pair in ((pool[i].episode_id, pool[i].start) for i in state["selection"])
            if pair in index.position
        ]

    for ep in range(config.episodes):
        transitions, _ = rollout(env, policy, collect_rng, config.rtg_target)
        buffer.append_episode(Episode(id=buffer.new_episode_id(), transitions=transitions))
        index.sync()

        for _ in range(config.updates_per_episode):
            if variant is not Variant.UNIFORM and (
                state["selection"] is None or grad_step % config.refresh_period == 0
            ):
                refresh()
            if variant is Variant.UNIFORM:
                batch = mixed_sample([], len(index), config.batch_size, 0.0, replay_rng)
            else:
                y_ids = selection_global_ids()
                if not y_ids:  # selection fully evicted: rebuild off-cadence
                    refresh()
                    y_ids = selection_global_ids()
                batch = mixed_sample(y_ids, len(index), config.batch_size, config.eta, replay_rng)
            batch = normalize_weights(batch, config.weight_mode)
            windows = [
                buffer.materialize(*index.pairs[idx], config.horizon)
                for idx, _ in batch.entries
            ]
            policy.weighted_update(windows, batch.weights, config.learning_rate)
            grad_step += 1

        if (ep + 1) % config.eval_every == 0:
            success = evaluate_policy(
                policy, eval_env, config.eval_episodes, np.random.default_rng(eval_ss.spawn(1)[0])
            )
            diversity, redundancy = _selection_quality_metrics(
                config, variant, state, buffer, policy, pseudo_rng, result
            )
            point = RunMetrics(
                gradient_steps=grad_step,
                episodes_used=ep + 1,
                success_rate=success,
                diversity=diversity,
                redundancy=redundancy,
            )
            result.metrics.append(point)
            if metrics_callback:
                metrics_callback(point)

    return result


def _selection_quality_metrics(config, variant, state, buffer, policy, pseudo_rng, result):
    """Diversity and redundancy of the active selection.

    UNIFORM has no active selection, so its metrics (and stage counts) come
    from a seeded uniform pseudo-selection of the same size drawn at metric
    time; that is what uniform replay would have put forward.
    """
    if variant is Variant.UNIFORM:
        pool = buffer.sample_candidate_pool(config.pool_size, config.horizon, pseudo_rng)
        embeddings = encode_pool(pool, policy)
        sigma = config.sigma if config.sigma is not None else median_bandwidth(embeddings)
        similarity = rbf_similarity(embeddings, sigma)
        k_eff = min(config.subset_size, len(pool))
        chosen = [int(i) for i in pseudo_rng.choice(len(pool), size=k_eff, replace=False)]
        for i in chosen:
            result.selected_stage_counts[pool[i].stage_label] += 1
    else:
        pool = state["pool"]
        embeddings = state["embeddings"]
        similarity = state["similarity"]
        chosen = state["selection"]
    sub = similarity.values[np.ix_(chosen, chosen)]
    tau = redundancy_threshold(embeddings)
    return diversity_metric(sub), redundancy_metric(embeddings[chosen], tau)


@dataclass
class VariantSummary:
    variant: Variant
    seeds: list[int]
    success: list[float]
    diversity: list[float]
    redundancy: list[float]
    rare_stage_freq: list[float]

    @staticmethod
    def _ci(values: Sequence[float]) -> float:
        arr = np.asarray(values, dtype=float)
        if arr.size < 2:
            return 0.0
        return float(1.96 * arr.std(ddof=1) / math.sqrt(arr.size))

    def row(self) -> dict:
        return {
            "variant": self.variant.value,
            "success_mean": float(np.mean(self.success)),
            "success_ci": self._ci(self.success),
            "redundancy_mean": float(np.mean(self.redundancy)),
            "redundancy_ci": self._ci(self.redundancy),
            "diversity_mean": float(np.mean(self.diversity)),
            "diversity_ci": self._ci(self.diversity),
            "rare_stage_mean": float(np.mean(self.rare_stage_freq)),
            "rare_stage_ci": self._ci(self.rare_stage_freq),
        }


@dataclass
class AblationResult:
    summaries: dict[Variant, VariantSummary]
    runs: list[RunResult]


def run_ablation(
    config: LoopConfig,
    seeds: Sequence[int],
    variants: Sequence[Variant] = tuple(Variant),
    metrics_callback: Callable[[Variant, int, RunMetrics], None] | None = None,
    audit_callback: Callable[[Variant, int, dict], None] | None = None,
) -> AblationResult:
    """Run every variant on every seed; aggregate mean and 1.96*stderr per metric."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("ablation needs at least 2 seeds")
    rare_stage = config.num_stages - 1
    runs: list[RunResult] = []
    summaries: dict[Variant, VariantSummary] = {}
    for variant in variants:
        summary = VariantSummary(variant, seeds, [], [], [], [])
        for seed in seeds:
            result = run_loop(
                config,
                variant,
                seed,
                metrics_callback=(lambda m, v=variant, s=seed: metrics_callback(v, s, m))
                if metrics_callback else None,
                audit_callback=(lambda e, v=variant, s=seed: audit_callback(v, s, e))
                if audit_callback else None,
            )
            runs.append(result)
            summary.success.append(result.final_success())
            summary.diversity.append(result.mean_diversity())
            summary.redundancy.append(result.mean_redundancy())
            summary.rare_stage_freq.append(result.stage_frequency(rare_stage))
        summaries[variant] = summary
    return AblationResult(summaries=summaries, runs=runs)
