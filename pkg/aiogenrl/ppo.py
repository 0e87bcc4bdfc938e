"""Define the PPO trainer and the generalization-loss hook."""
from collections import deque
import csv
from dataclasses import asdict, dataclass, field
import logging
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .const import (
    ADVANTAGE_EPS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CLIP_RANGE,
    DEFAULT_ENT_COEF,
    DEFAULT_GAE_LAMBDA,
    DEFAULT_GAMMA,
    DEFAULT_GEN_COEF,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_GRAD_NORM,
    DEFAULT_N_EPOCHS,
    DEFAULT_N_STEPS,
    DEFAULT_VF_COEF,
    HIDDEN_SIZE,
    NUM_ACTIONS,
    OBS_DIM,
)
from .errors import FrozenPredictorViolation, InvalidConfig, NonFiniteLoss
from .features import WeightSnapshot
from .nn import (
    Activation,
    Adam,
    GradientSet,
    Sequential,
    Tape,
    clip_grad_norm,
    log_softmax,
    mlp,
)
from .predictor import PredictorArtifact, gen_score_with_gradient
from .seeding import SALT_ACTIONS, SALT_INIT, SALT_MINIBATCH, child_rng

_LOGGER = logging.getLogger(__name__)

POLICY_PREFIX = "policy."
VALUE_PREFIX = "value."


class PolicyNet:
    """Softmax policy over the flattened observation; its parameters are theta."""

    def __init__(self, network: Sequential) -> None:
        """Initialize."""
        self.network: Sequential = network

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        obs_dim: int = OBS_DIM,
        hidden_sizes: Sequence[int] = (HIDDEN_SIZE, HIDDEN_SIZE),
        n_actions: int = NUM_ACTIONS,
    ) -> "PolicyNet":
        """Create a tanh policy with a softmax head."""
        sizes = [obs_dim, *hidden_sizes, n_actions]
        activations = [Activation.TANH] * len(hidden_sizes) + [Activation.SOFTMAX]
        return cls(mlp(sizes, activations, rng))

    def probabilities(self, obs: np.ndarray) -> np.ndarray:
        return self.network.forward(obs)

    def log_probabilities(self, obs: np.ndarray) -> np.ndarray:
        return log_softmax(self.network.forward(obs, logits=True))

    def greedy_action(self, obs: np.ndarray) -> int:
        """Return the most probable action for one observation."""
        return int(np.argmax(self.network.forward(np.ravel(obs), logits=True)))

    def weight_matrices(self) -> list[np.ndarray]:
        """Return the weight matrices input-major (in x out), biases excluded."""
        return [layer.W.T for layer in self.network.layers]

    def weight_names(self) -> list[str]:
        """Return the parameter names of the weight matrices."""
        return [f"{index}.W" for index in range(len(self.network.layers))]


class ValueNet:
    """Scalar state-value estimate; its parameters are phi."""

    def __init__(self, network: Sequential) -> None:
        """Initialize."""
        self.network: Sequential = network

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        obs_dim: int = OBS_DIM,
        hidden_sizes: Sequence[int] = (HIDDEN_SIZE, HIDDEN_SIZE),
    ) -> "ValueNet":
        """Create a tanh value network with a linear head."""
        sizes = [obs_dim, *hidden_sizes, 1]
        activations = [Activation.TANH] * len(hidden_sizes) + [Activation.IDENTITY]
        return cls(mlp(sizes, activations, rng))

    def values(self, obs: np.ndarray) -> np.ndarray:
        return self.network.forward(obs).reshape(-1)


@dataclass
class PpoConfig:
    """PPO hyperparameters."""

    gamma: float = DEFAULT_GAMMA
    gae_lambda: float = DEFAULT_GAE_LAMBDA
    clip_range: float = DEFAULT_CLIP_RANGE
    clip_range_vf: Optional[float] = None
    vf_coef: float = DEFAULT_VF_COEF
    ent_coef: float = DEFAULT_ENT_COEF
    gen_coef: float = DEFAULT_GEN_COEF
    learning_rate: float = DEFAULT_LEARNING_RATE
    n_steps: int = DEFAULT_N_STEPS
    batch_size: int = DEFAULT_BATCH_SIZE
    n_epochs: int = DEFAULT_N_EPOCHS
    value_clip: bool = True
    normalize_advantage: bool = True
    max_grad_norm: Optional[float] = DEFAULT_MAX_GRAD_NORM
    hidden_sizes: tuple[int, ...] = (HIDDEN_SIZE, HIDDEN_SIZE)
    seed: int = 0

    def __post_init__(self) -> None:
        self.hidden_sizes = tuple(self.hidden_sizes)
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidConfig(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise InvalidConfig(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.clip_range <= 0.0:
            raise InvalidConfig(f"clip_range must be > 0, got {self.clip_range}")
        if self.clip_range_vf is not None and self.clip_range_vf <= 0.0:
            raise InvalidConfig(f"clip_range_vf must be > 0, got {self.clip_range_vf}")
        if self.gen_coef < 0.0:
            raise InvalidConfig(f"gen_coef must be >= 0, got {self.gen_coef}")
        if self.learning_rate <= 0.0:
            raise InvalidConfig(f"learning_rate must be > 0, got {self.learning_rate}")
        if min(self.n_steps, self.batch_size, self.n_epochs) < 1:
            raise InvalidConfig("n_steps, batch_size and n_epochs must be >= 1")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0.0:
            raise InvalidConfig(f"max_grad_norm must be > 0, got {self.max_grad_norm}")

    @property
    def value_clip_range(self) -> float:
        return self.clip_range if self.clip_range_vf is None else self.clip_range_vf

    def to_dict(self) -> dict:
        data = asdict(self)
        data["hidden_sizes"] = list(self.hidden_sizes)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PpoConfig":
        return cls(**data)


@dataclass
class Minibatch:
    """A slice of rollout data for one gradient step."""

    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    old_values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return self.actions.size


@dataclass
class RolloutBuffer:
    """Transitions of one rollout with their advantages and value targets."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    bootstrap_value: float
    next_observation: np.ndarray
    episode_returns: list[float] = field(default_factory=list)
    running_return: float = 0.0
    deltas: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.actions.size

    def minibatch(self, indices: np.ndarray) -> Minibatch:
        """Return the transitions at ``indices``.

        :raises InvalidConfig: If advantages were not computed yet
        """
        if self.advantages is None:
            raise InvalidConfig(
                "Advantages must be computed before sampling minibatches"
            )
        return Minibatch(
            self.observations[indices],
            self.actions[indices],
            self.log_probs[indices],
            self.values[indices],
            self.advantages[indices],
            self.returns[indices],
        )


def collect_rollout(
    policy: PolicyNet,
    value: ValueNet,
    env,
    n_steps: int,
    rng: np.random.Generator,
    obs: Optional[np.ndarray] = None,
    running_return: float = 0.0,
) -> RolloutBuffer:
    """Run ``n_steps`` transitions, resetting ``env`` whenever an episode ends.

    :param obs: Observation to continue from; ``env`` is reset when omitted
    :param running_return: Return accumulated so far in the ongoing episode
    :rtype: :class:`RolloutBuffer`
    """
    if obs is None:
        obs = env.reset()
        running_return = 0.0
    observations, actions, rewards, dones, log_probs, values = [], [], [], [], [], []
    episode_returns = []
    for _ in range(n_steps):
        flat = np.ravel(obs).astype(np.float64)
        log_p = policy.log_probabilities(flat)
        action = int(rng.choice(log_p.size, p=np.exp(log_p)))
        outcome = env.step(action)
        observations.append(flat)
        actions.append(action)
        rewards.append(outcome.reward)
        dones.append(outcome.done)
        log_probs.append(log_p[action])
        values.append(value.values(flat)[0])
        running_return += outcome.reward
        if outcome.done:
            episode_returns.append(running_return)
            running_return = 0.0
            obs = env.reset()
        else:
            obs = outcome.obs
    next_flat = np.ravel(obs).astype(np.float64)
    bootstrap = 0.0 if dones[-1] else float(value.values(next_flat)[0])
    _LOGGER.debug(
        "Collected %s steps, %s episodes finished", n_steps, len(episode_returns)
    )
    return RolloutBuffer(
        observations=np.vstack(observations),
        actions=np.array(actions, dtype=np.int64),
        rewards=np.array(rewards, dtype=np.float64),
        dones=np.array(dones, dtype=bool),
        log_probs=np.array(log_probs, dtype=np.float64),
        values=np.array(values, dtype=np.float64),
        bootstrap_value=bootstrap,
        next_observation=obs,
        episode_returns=episode_returns,
        running_return=running_return,
    )


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    bootstrap_value: float,
    gamma: float,
    gae_lambda: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return TD residuals, advantages and value targets.

    A done flag at ``t`` zeroes both the bootstrap from ``t + 1`` and the
    advantage carried back across the boundary.
    """
    n = rewards.size
    deltas = np.zeros(n)
    advantages = np.zeros(n)
    carry = 0.0
    for t in range(n - 1, -1, -1):
        next_value = bootstrap_value if t == n - 1 else values[t + 1]
        live = 0.0 if dones[t] else 1.0
        deltas[t] = rewards[t] + gamma * next_value * live - values[t]
        carry = deltas[t] + gamma * gae_lambda * live * carry
        advantages[t] = carry
    return deltas, advantages, advantages + values


def compute_gae(
    buffer: RolloutBuffer,
    gamma: float,
    gae_lambda: float,
    bootstrap_value: Optional[float] = None,
) -> RolloutBuffer:
    """Fill in the residuals, advantages and targets of ``buffer``."""
    bootstrap = buffer.bootstrap_value if bootstrap_value is None else bootstrap_value
    buffer.deltas, buffer.advantages, buffer.returns = gae(
        buffer.rewards, buffer.values, buffer.dones, bootstrap, gamma, gae_lambda
    )
    return buffer


def clipped_surrogate(
    ratio: np.ndarray, advantages: np.ndarray, clip_range: float
) -> np.ndarray:
    """Return the per-sample clipped surrogate objective."""
    clipped = np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range)
    return np.minimum(ratio * advantages, clipped * advantages)


def policy_entropy(log_probs: np.ndarray) -> np.ndarray:
    """Return the entropy of each row of log-probabilities."""
    return -np.sum(np.exp(log_probs) * log_probs, axis=-1)


class GenLossHook:
    """Scores the current policy with a frozen dense predictor."""

    def __init__(self, artifact: PredictorArtifact) -> None:
        """Initialize.

        :raises MaskMismatch: If the mask does not fit the predictor
        """
        artifact.check_mask()
        self.artifact: PredictorArtifact = artifact
        self.fingerprint: str = artifact.fingerprint()

    def score_with_gradient(self, policy: PolicyNet) -> tuple[float, GradientSet]:
        """Return G and dG with respect to the policy weight matrices (in x out)."""
        snapshot = WeightSnapshot.from_policy(policy)
        return gen_score_with_gradient(self.artifact, snapshot)

    def verify_frozen(self) -> None:
        """Check that the predictor parameters never changed.

        :raises FrozenPredictorViolation: If they did
        """
        current = self.artifact.fingerprint()
        if current != self.fingerprint:
            raise FrozenPredictorViolation(
                f"Predictor fingerprint changed from {self.fingerprint} to {current}"
            )


@dataclass
class PpoLoss:
    """Loss value, its components and gradients over theta and phi."""

    total: float
    clip: float
    vf: float
    ent: float
    gen: float
    grads: GradientSet
    gen_score: Optional[float] = None


def ppo_loss(
    policy: PolicyNet,
    value: ValueNet,
    batch: Minibatch,
    cfg: PpoConfig,
    hook: Optional[GenLossHook] = None,
) -> PpoLoss:
    """Compute the PPO loss with the optional generalization term and its gradients.

    Gradients are keyed ``policy.<name>`` and ``value.<name>``.

    :raises InvalidConfig: If the minibatch is empty
    :raises MaskMismatch: If the hook's mask does not fit its predictor
    :raises NonFiniteLoss: If the loss is not finite
    :rtype: :class:`PpoLoss`
    """
    n = len(batch)
    if n == 0:
        raise InvalidConfig("Minibatch is empty")
    advantages = batch.advantages
    if cfg.normalize_advantage and n > 1:
        centred = advantages - advantages.mean()
        advantages = centred / (advantages.std() + ADVANTAGE_EPS)
    rows = np.arange(n)

    policy_tape = Tape()
    logits = policy.network.forward(batch.observations, policy_tape, logits=True)
    log_p = log_softmax(logits)
    p = np.exp(log_p)
    ratio = np.exp(log_p[rows, batch.actions] - batch.old_log_probs)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range) * advantages
    clip_loss = -float(np.mean(np.minimum(unclipped, clipped)))
    grad_log_pa = -(advantages * ratio * (unclipped <= clipped)) / n
    one_hot = np.zeros_like(p)
    one_hot[rows, batch.actions] = 1.0
    grad_logits = grad_log_pa[:, None] * (one_hot - p)

    entropy = -np.sum(p * log_p, axis=1)
    ent_loss = -float(np.mean(entropy))
    grad_logits += cfg.ent_coef * p * (log_p + entropy[:, None]) / n

    value_tape = Tape()
    v = value.network.forward(batch.observations, value_tape).reshape(-1)
    error = v - batch.returns
    if cfg.value_clip:
        eps_vf = cfg.value_clip_range
        shift = v - batch.old_values
        clipped_v = batch.old_values + np.clip(shift, -eps_vf, eps_vf)
        clipped_error = clipped_v - batch.returns
        squared = error * error
        clipped_squared = clipped_error * clipped_error
        use_unclipped = squared >= clipped_squared
        vf_loss = float(np.mean(np.where(use_unclipped, squared, clipped_squared)))
        inside = np.abs(shift) <= eps_vf
        grad_v = np.where(use_unclipped, 2.0 * error, 2.0 * clipped_error * inside) / n
    else:
        vf_loss = float(np.mean(error * error))
        grad_v = 2.0 * error / n

    policy_grads = policy.network.backward(policy_tape, grad_logits)
    value_grads = value.network.backward(value_tape, (cfg.vf_coef * grad_v)[:, None])

    total = clip_loss + cfg.vf_coef * vf_loss + cfg.ent_coef * ent_loss
    gen_loss = 0.0
    gen_score = None
    if hook is not None and cfg.gen_coef != 0.0:
        gen_score, weight_grads = hook.score_with_gradient(policy)
        gen_loss = -gen_score
        total += cfg.gen_coef * gen_loss
        for index, name in enumerate(policy.weight_names()):
            grad_w = weight_grads.params[f"L{index + 1}"].T
            current = policy_grads.params[name]
            policy_grads.params[name] = current - cfg.gen_coef * grad_w

    if not np.isfinite(total):
        raise NonFiniteLoss(
            f"PPO loss is {total} (clip={clip_loss}, vf={vf_loss}, "
            f"ent={ent_loss}, gen={gen_loss})"
        )
    grads = GradientSet(
        {
            **{POLICY_PREFIX + k: g for k, g in policy_grads.params.items()},
            **{VALUE_PREFIX + k: g for k, g in value_grads.params.items()},
        }
    )
    return PpoLoss(total, clip_loss, vf_loss, ent_loss, gen_loss, grads, gen_score)


@dataclass
class CheckpointRow:
    """One row of the training log."""

    step: int
    train_mean_reward: Optional[float]
    zeta_eval: Optional[float]
    clip: float
    vf: float
    ent: float
    gen: float


CHECKPOINT_FIELDS: list[str] = [
    "step",
    "train_mean_reward",
    "zeta_eval",
    "clip",
    "vf",
    "ent",
    "gen",
]


def write_checkpoint_csv(path: Union[str, Path], rows: Sequence[CheckpointRow]) -> None:
    """Write the training log; missing values are left empty."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CHECKPOINT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in asdict(row).items()})


@dataclass
class TrainingResult:
    """Trained networks, the log, and policy snapshots at evaluation steps."""

    policy: PolicyNet
    value: ValueNet
    log: list[CheckpointRow]
    snapshots: dict[int, WeightSnapshot]

    @property
    def evaluations(self) -> list[tuple[int, float]]:
        """Return ``(step, zeta)`` for every evaluated checkpoint."""
        return [
            (row.step, row.zeta_eval) for row in self.log if row.zeta_eval is not None
        ]


Evaluator = Callable[[PolicyNet], float]


class PpoTrainer:
    """Owns one agent's networks, optimizer and random streams."""

    def __init__(
        self,
        env,
        cfg: PpoConfig,
        hook: Optional[GenLossHook] = None,
        obs_dim: int = OBS_DIM,
        n_actions: int = NUM_ACTIONS,
    ) -> None:
        """Initialize.

        :param env: Environment with ``reset()`` and ``step(action)``
        :param cfg: Hyperparameters; ``cfg.seed`` seeds every stream
        :type cfg: :class:`PpoConfig`
        :param hook: Frozen predictor for the generalization term
        :type hook: :class:`GenLossHook`, optional
        """
        self.env = env
        self.cfg: PpoConfig = cfg
        self.hook: Optional[GenLossHook] = hook
        self.policy: PolicyNet = PolicyNet.create(
            child_rng(cfg.seed, SALT_INIT, 0), obs_dim, cfg.hidden_sizes, n_actions
        )
        self.value: ValueNet = ValueNet.create(
            child_rng(cfg.seed, SALT_INIT, 1), obs_dim, cfg.hidden_sizes
        )
        policy_params = self.policy.network.parameters()
        value_params = self.value.network.parameters()
        params = {
            **{POLICY_PREFIX + k: v for k, v in policy_params.items()},
            **{VALUE_PREFIX + k: v for k, v in value_params.items()},
        }
        self.optimizer: Adam = Adam(params, cfg.learning_rate)
        self._action_rng = child_rng(cfg.seed, SALT_ACTIONS)
        self._batch_rng = child_rng(cfg.seed, SALT_MINIBATCH)
        self._obs: Optional[np.ndarray] = None
        self._running_return: float = 0.0
        self._episode_returns: deque = deque(maxlen=100)
        self.num_timesteps: int = 0
        self.n_updates: int = 0

    def update(self, buffer: RolloutBuffer) -> PpoLoss:
        """Run the epochs of minibatch updates on ``buffer``.

        :return: Loss components averaged over the minibatches
        :raises FrozenPredictorViolation: If the predictor changed
        """
        n = len(buffer)
        sums = np.zeros(4)
        count = 0
        last = None
        for _ in range(self.cfg.n_epochs):
            order = self._batch_rng.permutation(n)
            for start in range(0, n, self.cfg.batch_size):
                batch = buffer.minibatch(order[start : start + self.cfg.batch_size])
                last = ppo_loss(self.policy, self.value, batch, self.cfg, self.hook)
                if self.cfg.max_grad_norm is not None:
                    clip_grad_norm(last.grads, self.cfg.max_grad_norm)
                self.optimizer.step(last.grads.params)
                sums += (last.clip, last.vf, last.ent, last.gen)
                count += 1
        self.n_updates += 1
        if self.hook is not None:
            self.hook.verify_frozen()
        clip, vf, ent, gen = sums / count
        cfg = self.cfg
        total = clip + cfg.vf_coef * vf + cfg.ent_coef * ent + cfg.gen_coef * gen
        return PpoLoss(total, clip, vf, ent, gen, last.grads, last.gen_score)

    def _mean_reward(self) -> Optional[float]:
        if not self._episode_returns:
            return None
        return float(np.mean(self._episode_returns))

    def train(
        self,
        total_steps: int,
        eval_every: Optional[int] = None,
        evaluator: Optional[Evaluator] = None,
    ) -> TrainingResult:
        """Alternate rollouts and updates until ``total_steps`` transitions.

        With an evaluator, the policy is scored before training and again
        whenever a multiple of ``eval_every`` is passed.

        :raises InvalidConfig: If ``total_steps`` is below one rollout
        :rtype: :class:`TrainingResult`
        """
        if total_steps < self.cfg.n_steps:
            raise InvalidConfig(
                f"total_steps {total_steps} is below n_steps {self.cfg.n_steps}"
            )
        scheduled = evaluator is not None and eval_every is not None
        if scheduled and eval_every < 1:
            raise InvalidConfig(f"eval_every must be >= 1, got {eval_every}")
        log: list[CheckpointRow] = []
        snapshots: dict[int, WeightSnapshot] = {}

        def checkpoint(losses: Optional[PpoLoss], evaluate: bool) -> None:
            step = self.num_timesteps
            zeta = None
            if evaluate:
                zeta = float(evaluator(self.policy))
                snapshots[step] = WeightSnapshot.from_policy(self.policy, step=step)
                _LOGGER.debug("Step %s: zeta=%.4f", step, zeta)
            components = (0.0, 0.0, 0.0, 0.0)
            if losses is not None:
                components = (losses.clip, losses.vf, losses.ent, losses.gen)
            log.append(CheckpointRow(step, self._mean_reward(), zeta, *components))

        if scheduled:
            checkpoint(None, True)
        next_eval = eval_every if scheduled else None
        while self.num_timesteps < total_steps:
            n = min(self.cfg.n_steps, total_steps - self.num_timesteps)
            buffer = collect_rollout(
                self.policy,
                self.value,
                self.env,
                n,
                self._action_rng,
                self._obs,
                self._running_return,
            )
            self._obs = buffer.next_observation
            self._running_return = buffer.running_return
            self._episode_returns.extend(buffer.episode_returns)
            compute_gae(buffer, self.cfg.gamma, self.cfg.gae_lambda)
            losses = self.update(buffer)
            self.num_timesteps += n
            evaluate = scheduled and self.num_timesteps >= next_eval
            if evaluate:
                while next_eval <= self.num_timesteps:
                    next_eval += eval_every
            checkpoint(losses, evaluate)
        _LOGGER.debug(
            "Trained %s steps in %s updates", self.num_timesteps, self.n_updates
        )
        return TrainingResult(self.policy, self.value, log, snapshots)
