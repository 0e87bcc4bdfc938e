"""Compare standard and upgraded PPO on paired seeds and emit the report."""
import asyncio
import csv
from dataclasses import dataclass, field, replace
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib
from matplotlib.figure import Figure
import numpy as np
from scipy.stats import binomtest

from .const import (
    ARM_COLORS,
    ARM_STANDARD,
    ARM_UPGRADED,
    ARMS,
    DEFAULT_COMPARE_AGENTS,
    DEFAULT_COMPARE_EVAL_SEED_BASE,
    DEFAULT_COMPARE_STEPS,
    DEFAULT_COMPARE_TRAIN_SEED_BASE,
    DEFAULT_EVAL_EVERY,
    DEFAULT_GEN_COEF,
    DEFAULT_N_EVAL_ENVS,
    SVG_AXES_RECT,
    SVG_HASH_SALT,
    SVG_SIZE_INCHES,
)
from .env import (
    GridSpec,
    NoiseConfig,
    derive_specs,
    generate,
    layout_period,
    shared_layout_period,
)
from .errors import EmptyInput, InvalidConfig, SeedCollision
from .forge import ForgeConfig, compute_zeta, make_executor, ranges_overlap
from .ppo import CheckpointRow, GenLossHook, PpoConfig, PpoTrainer, write_checkpoint_csv
from .predictor import PredictorArtifact
from .seeding import mix_seed

_LOGGER = logging.getLogger(__name__)


@dataclass
class CompareConfig:
    """Paired comparison of the two training arms."""

    n_agents: int = DEFAULT_COMPARE_AGENTS
    total_steps: int = DEFAULT_COMPARE_STEPS
    eval_every: int = DEFAULT_EVAL_EVERY
    n_eval_envs: int = DEFAULT_N_EVAL_ENVS
    train_seed_base: int = DEFAULT_COMPARE_TRAIN_SEED_BASE
    eval_seed_base: int = DEFAULT_COMPARE_EVAL_SEED_BASE
    gen_coef: float = DEFAULT_GEN_COEF
    predictor_path: Optional[str] = None
    episodes_per_env: int = 1
    grid: GridSpec = field(default_factory=GridSpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n_agents < 1:
            raise InvalidConfig(f"n_agents must be >= 1, got {self.n_agents}")
        if self.n_eval_envs < 1:
            raise InvalidConfig(f"n_eval_envs must be >= 1, got {self.n_eval_envs}")
        if self.eval_every < 1:
            raise InvalidConfig(f"eval_every must be >= 1, got {self.eval_every}")
        if self.total_steps < self.ppo.n_steps:
            raise InvalidConfig(
                f"total_steps must reach one rollout of {self.ppo.n_steps} steps"
            )
        if self.gen_coef < 0.0:
            raise InvalidConfig(f"gen_coef must be >= 0, got {self.gen_coef}")
        if self.workers < 1:
            raise InvalidConfig(f"workers must be >= 1, got {self.workers}")
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

    def eval_specs(self) -> list[GridSpec]:
        return derive_specs(self.grid, self.eval_seed_base, self.n_eval_envs)

    def check_seed_hygiene(self, forge: ForgeConfig) -> None:
        """Check that the comparison and forge seed pools are pairwise disjoint.

        Seeds that select the same layout count as shared.

        :raises SeedCollision: If two pools share a seed or a layout
        """
        pools = {
            "forge training": (forge.train_seeds, forge.grid),
            "forge evaluation": (forge.eval_seeds, forge.grid),
            "comparison training": (self.train_seeds, self.grid),
            "comparison evaluation": (self.eval_seeds, self.grid),
        }
        names = list(pools)
        for i, first in enumerate(names):
            for second in names[i + 1 :]:
                (seeds_a, grid_a), (seeds_b, grid_b) = pools[first], pools[second]
                period = shared_layout_period(grid_a, grid_b)
                if ranges_overlap(seeds_a, seeds_b, period):
                    raise SeedCollision(f"The {first} and {second} seed pools overlap")

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "total_steps": self.total_steps,
            "eval_every": self.eval_every,
            "n_eval_envs": self.n_eval_envs,
            "train_seed_base": self.train_seed_base,
            "eval_seed_base": self.eval_seed_base,
            "gen_coef": self.gen_coef,
            "predictor_path": self.predictor_path,
            "episodes_per_env": self.episodes_per_env,
            "grid": self.grid.to_dict(),
            "noise": self.noise.to_dict(),
            "ppo": self.ppo.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CompareConfig":
        data = dict(data)
        if "grid" in data:
            data["grid"] = GridSpec.from_dict(data["grid"])
        if "noise" in data:
            data["noise"] = NoiseConfig.from_dict(data["noise"])
        if "ppo" in data:
            data["ppo"] = PpoConfig.from_dict(data["ppo"])
        return cls(**data)


@dataclass
class AgentCurve:
    """The evaluation curve and training log of one agent in one arm."""

    arm: str
    index: int
    train_seed: int
    init_seed: int
    log: list[CheckpointRow]

    @property
    def agent_id(self) -> str:
        return f"{self.arm}-agent-{self.index:04d}"

    @property
    def points(self) -> list[tuple[int, float]]:
        return [
            (row.step, row.zeta_eval) for row in self.log if row.zeta_eval is not None
        ]


@dataclass(frozen=True)
class CurvePoint:
    """Mean generalization score of one arm at one checkpoint."""

    step: int
    arm: str
    mean_zeta: float
    stderr: float
    n: int

    @property
    def degenerate(self) -> bool:
        """Return whether the standard error is 0 only because n is 1."""
        return self.n == 1


@dataclass(frozen=True)
class SignTest:
    """Paired sign test of upgraded over standard at the final checkpoint."""

    wins: int
    losses: int
    ties: int
    p_value: float
    step: int


@dataclass
class ComparisonResult:
    points: list[CurvePoint]
    curves: list[AgentCurve]
    sign_test: Optional[SignTest]


def train_arm_agent(
    config: CompareConfig,
    arm: str,
    index: int,
    artifact: Optional[PredictorArtifact] = None,
) -> AgentCurve:
    """Train agent ``index`` of ``arm``; both arms share its seeds."""
    train_seed = config.train_seed_base + index
    init_seed = mix_seed(config.train_seed_base, index)
    upgraded = arm == ARM_UPGRADED
    gen_coef = config.gen_coef if upgraded else 0.0
    ppo = replace(config.ppo, seed=init_seed, gen_coef=gen_coef)
    hook = GenLossHook(artifact) if upgraded and artifact is not None else None
    if upgraded and hook is None and ppo.gen_coef != 0.0:
        raise InvalidConfig("The upgraded arm needs a predictor artifact")
    eval_specs = config.eval_specs()

    def evaluator(policy) -> float:
        return compute_zeta(policy, eval_specs, config.noise, config.episodes_per_env)

    trainer = PpoTrainer(generate(config.grid.with_seed(train_seed)), ppo, hook)
    result = trainer.train(config.total_steps, config.eval_every, evaluator)
    curve = AgentCurve(arm, index, train_seed, init_seed, result.log)
    _LOGGER.info("Trained %s (final zeta=%.3f)", curve.agent_id, curve.points[-1][1])
    return curve


def _stderr(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(values.size))


def aggregate_curves(curves: Sequence[AgentCurve]) -> list[CurvePoint]:
    """Average the per-agent curves of each arm checkpoint by checkpoint.

    :raises InvalidConfig: If agents of one arm were evaluated at different steps
    """
    points = []
    for arm in ARMS:
        members = [c.points for c in curves if c.arm == arm]
        if not members:
            continue
        steps = [step for step, _ in members[0]]
        if any([step for step, _ in m] != steps for m in members):
            raise InvalidConfig(
                f"Agents of the {arm} arm were evaluated at different steps"
            )
        if len(members) == 1:
            _LOGGER.warning(
                "Standard error of the %s arm is 0 with a single agent", arm
            )
        for position, step in enumerate(steps):
            values = np.array([m[position][1] for m in members])
            mean = float(values.mean())
            points.append(CurvePoint(step, arm, mean, _stderr(values), values.size))
    return points


def sign_test(curves: Sequence[AgentCurve]) -> Optional[SignTest]:
    """Compare paired final scores; ``None`` when an arm is missing."""
    final = {(c.arm, c.index): c.points[-1] for c in curves}
    pairs = sorted(
        i for arm, i in final if arm == ARM_STANDARD and (ARM_UPGRADED, i) in final
    )
    if not pairs:
        return None
    diffs = np.array(
        [final[(ARM_UPGRADED, i)][1] - final[(ARM_STANDARD, i)][1] for i in pairs]
    )
    wins = int(np.sum(diffs > 0))
    losses = int(np.sum(diffs < 0))
    p_value = 1.0
    if wins + losses:
        p_value = float(
            binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue
        )
    step = final[(ARM_STANDARD, pairs[0])][0]
    return SignTest(wins, losses, int(np.sum(diffs == 0)), p_value, step)


async def async_compare(
    config: CompareConfig, artifact: Optional[PredictorArtifact] = None
) -> ComparisonResult:
    """Train both arms in a worker pool and aggregate their curves.

    :param config: Comparison run
    :type config: :class:`CompareConfig`
    :param artifact: Frozen predictor, else loaded from ``config.predictor_path``
    :type artifact: :class:`PredictorArtifact`, optional
    :rtype: :class:`ComparisonResult`
    """
    if artifact is None and config.predictor_path is not None:
        artifact = PredictorArtifact.load(config.predictor_path)
    _LOGGER.info(
        "Comparing %s agents per arm over %s steps",
        config.n_agents,
        config.total_steps,
    )
    loop = asyncio.get_running_loop()
    executor = make_executor(config.workers)
    try:
        curves = await asyncio.gather(
            *(
                loop.run_in_executor(
                    executor, train_arm_agent, config, arm, index, artifact
                )
                for arm in ARMS
                for index in range(config.n_agents)
            )
        )
    finally:
        executor.shutdown(wait=True)
    curves = sorted(curves, key=lambda c: (ARMS.index(c.arm), c.index))
    result = ComparisonResult(aggregate_curves(curves), curves, sign_test(curves))
    if result.sign_test is not None:
        _LOGGER.info(
            "Upgraded won %s, lost %s, tied %s (p=%.4f)",
            result.sign_test.wins,
            result.sign_test.losses,
            result.sign_test.ties,
            result.sign_test.p_value,
        )
    return result


def compare(
    config: CompareConfig, artifact: Optional[PredictorArtifact] = None
) -> ComparisonResult:
    """Run :func:`async_compare` to completion."""
    return asyncio.run(async_compare(config, artifact))


def write_curves_csv(path: Union[str, Path], points: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(
            f, fieldnames=["step", "arm", "mean_zeta", "stderr", "n", "note"]
        )
        writer.writeheader()
        for point in points:
            writer.writerow(
                {
                    "step": point.step,
                    "arm": point.arm,
                    "mean_zeta": repr(point.mean_zeta),
                    "stderr": repr(point.stderr),
                    "n": point.n,
                    "note": "single agent, stderr 0" if point.degenerate else "",
                }
            )


def write_sign_test_csv(path: Union[str, Path], result: SignTest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(
            f, fieldnames=["step", "wins", "losses", "ties", "p_value"]
        )
        writer.writeheader()
        writer.writerow(
            {
                "step": result.step,
                "wins": result.wins,
                "losses": result.losses,
                "ties": result.ties,
                "p_value": repr(result.p_value),
            }
        )


def write_curves_svg(path: Union[str, Path], points: Sequence[CurvePoint]) -> None:
    """Draw one line per arm with a translucent standard-error band.

    The y axis is fixed to [0, 1] and the axes rectangle is fixed, so one
    unit of zeta spans the same number of points in every chart.
    """
    fig = Figure(figsize=SVG_SIZE_INCHES)
    ax = fig.add_axes(SVG_AXES_RECT)
    steps = sorted({p.step for p in points})
    for arm in ARMS:
        series = sorted((p for p in points if p.arm == arm), key=lambda p: p.step)
        if not series:
            continue
        x = np.array([p.step for p in series], dtype=np.float64)
        mean = np.array([p.mean_zeta for p in series])
        stderr = np.array([p.stderr for p in series])
        color = ARM_COLORS[arm]
        ax.fill_between(
            x,
            mean - stderr,
            mean + stderr,
            color=color,
            alpha=0.25,
            linewidth=0,
            gid=f"band-{arm}",
        )
        ax.plot(x, mean, color=color, linewidth=1.5, label=arm, gid=f"curve-{arm}")
    low, high = steps[0], steps[-1]
    ax.set_xlim(low, high if high > low else low + 1)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("training steps")
    ax.set_ylabel("mean generalization score")
    ax.legend(loc="upper left")
    with matplotlib.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})


def emit_report(
    points: Sequence[CurvePoint],
    out_dir: Union[str, Path],
    curves: Sequence[AgentCurve] = (),
    sign: Optional[SignTest] = None,
) -> None:
    """Write ``curves.csv``, ``curves.svg``, ``per_agent/*.csv`` and ``sign_test.csv``.

    :raises EmptyInput: If ``points`` is empty
    """
    if not points:
        raise EmptyInput("No curve points to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_curves_csv(out_dir / "curves.csv", points)
    write_curves_svg(out_dir / "curves.svg", points)
    if curves:
        per_agent = out_dir / "per_agent"
        per_agent.mkdir(exist_ok=True)
        for curve in curves:
            write_checkpoint_csv(per_agent / f"{curve.agent_id}.csv", curve.log)
    if sign is not None:
        write_sign_test_csv(out_dir / "sign_test.csv", sign)
    _LOGGER.info("Wrote report to %s", out_dir)
