"""Forge a labelled population of trained agents."""
import asyncio
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import hashlib
import json
import logging
from pathlib import Path
import time
from typing import Optional, Sequence, Union

import numpy as np

from .const import (
    DEFAULT_EVAL_SEED_BASE,
    DEFAULT_N_AGENTS,
    DEFAULT_N_EVAL_ENVS,
    DEFAULT_STEPS_PER_AGENT,
    DEFAULT_TRAIN_SEED_BASE,
    MANIFEST_FILE,
    MANIFEST_FORMAT_VERSION,
    WEIGHTS_DIR,
)
from .env import (
    GridSpec,
    NoiseConfig,
    NoisyGridWorld,
    derive_specs,
    generate,
    layout_period,
)
from .errors import (
    EmptyEvalSet,
    HashMismatch,
    InvalidConfig,
    ManifestError,
    MissingWeights,
    SeedCollision,
)
from .features import WeightSnapshot, encode_matrices, load_snapshot
from .ppo import PolicyNet, PpoConfig, PpoTrainer
from .seeding import mix_seed

_LOGGER = logging.getLogger(__name__)


def ranges_overlap(first: range, second: range, period: Optional[int] = None) -> bool:
    """Return whether two seed ranges share a seed.

    With a ``period``, seeds that agree modulo the period count as shared,
    since they select the same layout.
    """
    if not first or not second:
        return False
    if period is None:
        return max(first.start, second.start) < min(first.stop, second.stop)
    if len(first) >= period or len(second) >= period:
        return True
    residues = {seed % period for seed in first}
    return any(seed % period in residues for seed in second)


@dataclass
class ForgeConfig:
    """Population size, training budget and the seed pools of a forge run."""

    n_agents: int = DEFAULT_N_AGENTS
    steps_per_agent: int = DEFAULT_STEPS_PER_AGENT
    step_tiers: Optional[tuple[int, ...]] = None
    grid: GridSpec = field(default_factory=GridSpec)
    train_seed_base: int = DEFAULT_TRAIN_SEED_BASE
    n_eval_envs: int = DEFAULT_N_EVAL_ENVS
    eval_seed_base: int = DEFAULT_EVAL_SEED_BASE
    episodes_per_env: int = 1
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    workers: int = 1

    def __post_init__(self) -> None:
        if self.step_tiers is not None:
            self.step_tiers = tuple(self.step_tiers)
        if self.n_agents < 1:
            raise InvalidConfig(f"n_agents must be >= 1, got {self.n_agents}")
        if self.n_eval_envs < 1:
            raise InvalidConfig(f"n_eval_envs must be >= 1, got {self.n_eval_envs}")
        if self.episodes_per_env < 1:
            raise InvalidConfig(
                f"episodes_per_env must be >= 1, got {self.episodes_per_env}"
            )
        if self.workers < 1:
            raise InvalidConfig(f"workers must be >= 1, got {self.workers}")
        budgets = self.step_tiers or (self.steps_per_agent,)
        if min(budgets) < self.ppo.n_steps:
            raise InvalidConfig(
                "Every step budget must reach one rollout of "
                f"{self.ppo.n_steps} steps"
            )
        if ranges_overlap(self.train_seeds, self.eval_seeds, layout_period(self.grid)):
            raise SeedCollision(
                f"Training seeds {self.train_seeds} share layouts with "
                f"evaluation seeds {self.eval_seeds}"
            )

    @property
    def train_seeds(self) -> range:
        return range(self.train_seed_base, self.train_seed_base + self.n_agents)

    @property
    def eval_seeds(self) -> range:
        return range(self.eval_seed_base, self.eval_seed_base + self.n_eval_envs)

    def steps_for(self, index: int) -> int:
        """Return the training budget of agent ``index``."""
        if self.step_tiers:
            return self.step_tiers[index % len(self.step_tiers)]
        return self.steps_per_agent

    def eval_specs(self) -> list[GridSpec]:
        return derive_specs(self.grid, self.eval_seed_base, self.n_eval_envs)

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "steps_per_agent": self.steps_per_agent,
            "step_tiers": None if self.step_tiers is None else list(self.step_tiers),
            "grid": self.grid.to_dict(),
            "train_seed_base": self.train_seed_base,
            "n_eval_envs": self.n_eval_envs,
            "eval_seed_base": self.eval_seed_base,
            "episodes_per_env": self.episodes_per_env,
            "noise": self.noise.to_dict(),
            "ppo": self.ppo.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ForgeConfig":
        data = dict(data)
        if "grid" in data:
            data["grid"] = GridSpec.from_dict(data["grid"])
        if "noise" in data:
            data["noise"] = NoiseConfig.from_dict(data["noise"])
        if "ppo" in data:
            data["ppo"] = PpoConfig.from_dict(data["ppo"])
        return cls(**data)


@dataclass
class AgentRecord:
    """Provenance and label of one forged agent."""

    agent_id: str
    index: int
    train_seed: int
    init_seed: int
    steps: int
    weights_path: Optional[str]
    weights_sha256: Optional[str]
    zeta: Optional[float]
    eval_seed_start: int
    eval_seed_count: int
    wall_clock: float
    config_hash: str
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def config_hash(cfg: PpoConfig, grid: GridSpec, steps: int) -> str:
    """Hash what determines an agent's training apart from its seeds."""
    payload = json.dumps(
        {"ppo": cfg.to_dict(), "grid": grid.to_dict(), "steps": steps}, sort_keys=True
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class DatasetManifest:
    """A forge config with the records of every agent it produced."""

    config: ForgeConfig
    records: list[AgentRecord]
    format_version: int = MANIFEST_FORMAT_VERSION
    root: Optional[Path] = field(default=None, compare=False)

    @property
    def ok_records(self) -> list[AgentRecord]:
        return [r for r in self.records if r.ok]

    def labels(self) -> np.ndarray:
        return np.array([r.zeta for r in self.ok_records])

    def snapshots(self) -> list[WeightSnapshot]:
        """Load the weights of every successful agent."""
        return [load_snapshot(self._weights(r), r.agent_id) for r in self.ok_records]

    def _weights(self, record: AgentRecord) -> Path:
        return (self.root or Path(".")) / record.weights_path

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "config": self.config.to_dict(),
            "records": [asdict(r) for r in self.records],
        }

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        path.write_text(text, encoding="utf-8")
        self.root = path.parent

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        """Read a manifest; weight paths resolve against its directory.

        :raises ManifestError: If the file is not a valid manifest
        """
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            manifest = cls(
                ForgeConfig.from_dict(data["config"]),
                [AgentRecord(**r) for r in data["records"]],
                data["format_version"],
                path.parent,
            )
        except (KeyError, TypeError, ValueError) as err:
            raise ManifestError(f"Invalid manifest {path}: {err}") from err
        if manifest.format_version != MANIFEST_FORMAT_VERSION:
            raise ManifestError(
                f"Manifest version {manifest.format_version} is not supported"
            )
        ids = [r.agent_id for r in manifest.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("Agent ids are not unique")
        return manifest

    def verify(self) -> None:
        """Re-check every weight file and label.

        :raises MissingWeights: If a weight file is gone
        :raises HashMismatch: If a weight file changed
        :raises ManifestError: If a record breaks an invariant
        """
        for record in self.ok_records:
            path = self._weights(record)
            name = record.agent_id
            if not path.is_file():
                raise MissingWeights(f"{name}: {path} does not exist")
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            if digest != record.weights_sha256:
                raise HashMismatch(
                    f"{name}: {path} has hash {digest}, "
                    f"expected {record.weights_sha256}"
                )
            load_snapshot(path, name)
            if not 0.0 <= record.zeta <= 1.0:
                raise ManifestError(f"{name}: zeta {record.zeta} outside [0, 1]")
            if record.train_seed != self.config.train_seed_base + record.index:
                raise ManifestError(f"{name}: train seed is not derived from the base")
        _LOGGER.info("Verified %s agents", len(self.ok_records))


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    return DatasetManifest.load(path)


def verify_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Load and verify a manifest."""
    manifest = DatasetManifest.load(path)
    manifest.verify()
    return manifest


def run_greedy_episode(policy: PolicyNet, env) -> float:
    """Return the return of one greedy episode."""
    obs = env.reset()
    total = 0.0
    done = False
    while not done:
        obs, reward, done = env.step(policy.greedy_action(obs))
        total += reward
    return total


def evaluate_returns(
    policy: PolicyNet,
    eval_specs: Sequence[GridSpec],
    noise: NoiseConfig,
    episodes_per_env: int = 1,
) -> list[float]:
    """Return the greedy episode returns on noisy never-seen worlds."""
    returns = []
    for spec in eval_specs:
        env = NoisyGridWorld(generate(spec), noise)
        returns.extend(run_greedy_episode(policy, env) for _ in range(episodes_per_env))
    return returns


def zeta_from_returns(returns: Sequence[float]) -> float:
    """Return the mean return.

    :raises EmptyEvalSet: If ``returns`` is empty
    """
    if len(returns) == 0:
        raise EmptyEvalSet("No evaluation returns")
    return float(np.mean(returns))


def compute_zeta(
    policy: PolicyNet,
    eval_specs: Sequence[GridSpec],
    noise: NoiseConfig,
    episodes_per_env: int = 1,
) -> float:
    """Return the generalization score of ``policy``.

    :raises EmptyEvalSet: If ``eval_specs`` is empty
    :rtype: ``float``
    """
    if not eval_specs:
        raise EmptyEvalSet("No evaluation environments")
    returns = evaluate_returns(policy, eval_specs, noise, episodes_per_env)
    return zeta_from_returns(returns)


def forge_agent(
    config: ForgeConfig, index: int, out_dir: Union[str, Path]
) -> AgentRecord:
    """Train, save and score agent ``index``; failures are recorded, not raised."""
    start = time.perf_counter()
    agent_id = f"agent-{index:04d}"
    train_seed = config.train_seed_base + index
    init_seed = mix_seed(config.train_seed_base, index)
    steps = config.steps_for(index)
    ppo = replace(config.ppo, seed=init_seed)
    weights_path = f"{WEIGHTS_DIR}/{agent_id}.rlwb"
    record = AgentRecord(
        agent_id=agent_id,
        index=index,
        train_seed=train_seed,
        init_seed=init_seed,
        steps=steps,
        weights_path=None,
        weights_sha256=None,
        zeta=None,
        eval_seed_start=config.eval_seed_base,
        eval_seed_count=config.n_eval_envs,
        wall_clock=0.0,
        config_hash=config_hash(ppo, config.grid, steps),
    )
    try:
        world = generate(config.grid.with_seed(train_seed))
        result = PpoTrainer(world, ppo).train(steps)
        payload = encode_matrices(result.policy.weight_matrices())
        (Path(out_dir) / weights_path).write_bytes(payload)
        record.weights_path = weights_path
        record.weights_sha256 = hashlib.sha256(payload).hexdigest()
        record.zeta = compute_zeta(
            result.policy,
            config.eval_specs(),
            config.noise,
            config.episodes_per_env,
        )
    except Exception as err:  # pylint: disable=broad-except
        record.error = f"{type(err).__name__}: {err}"
        _LOGGER.error("Forging %s failed: %s", agent_id, record.error)
    record.wall_clock = time.perf_counter() - start
    if record.ok:
        _LOGGER.info("Forged %s (steps=%s, zeta=%.3f)", agent_id, steps, record.zeta)
    return record


def make_executor(workers: int) -> Executor:
    """Return a process pool, or a single thread when ``workers`` is 1."""
    if workers > 1:
        return ProcessPoolExecutor(max_workers=workers)
    return ThreadPoolExecutor(max_workers=1)


async def async_forge(
    config: ForgeConfig, out_dir: Union[str, Path]
) -> DatasetManifest:
    """Forge every agent in a worker pool and write the manifest.

    :param config: Forge run
    :type config: :class:`ForgeConfig`
    :param out_dir: Directory receiving the weights and the manifest
    :rtype: :class:`DatasetManifest`
    """
    out_dir = Path(out_dir)
    (out_dir / WEIGHTS_DIR).mkdir(parents=True, exist_ok=True)
    _LOGGER.info(
        "Forging %s agents with %s workers into %s",
        config.n_agents,
        config.workers,
        out_dir,
    )
    loop = asyncio.get_running_loop()
    executor = make_executor(config.workers)
    try:
        records = await asyncio.gather(
            *(
                loop.run_in_executor(executor, forge_agent, config, index, out_dir)
                for index in range(config.n_agents)
            )
        )
    finally:
        executor.shutdown(wait=True)
    manifest = DatasetManifest(config, sorted(records, key=lambda r: r.index))
    manifest.save(out_dir / MANIFEST_FILE)
    failed = len(manifest.records) - len(manifest.ok_records)
    if failed:
        _LOGGER.warning("%s of %s agents failed", failed, config.n_agents)
    _LOGGER.info("Forge finished: %s agents", len(manifest.ok_records))
    return manifest


def forge(config: ForgeConfig, out_dir: Union[str, Path]) -> DatasetManifest:
    """Run :func:`async_forge` to completion."""
    return asyncio.run(async_forge(config, out_dir))
