"""Command line entry point wiring the pipeline together."""
import argparse
from dataclasses import dataclass, field, replace
import json
import logging
import os
from pathlib import Path
import sys
from typing import Any, Optional, Sequence

from .const import (
    CONFIG_ECHO_FILE,
    DEFAULT_SELECTION_THRESHOLD,
    MANIFEST_FILE,
    WORKERS_ENV_VAR,
)
from .env import GridSpec, NoiseConfig, generate
from .errors import GenRLError, InvalidConfig, ManifestError, UsageError
from .features import (
    build_weight_image,
    encode_matrices,
    feature_matrix,
    select_features,
    write_correlation_csv,
    write_feature_csv,
)
from .forge import DatasetManifest, ForgeConfig, compute_zeta, forge, verify_manifest
from .harness import CompareConfig, compare, emit_report
from .ppo import GenLossHook, PpoConfig, PpoTrainer, write_checkpoint_csv
from .predictor import (
    PredictorArtifact,
    PredictorHyper,
    PredictorKind,
    evaluate_predictor,
    split_indices,
    train_cnn,
    train_dnn,
)

_LOGGER = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """Every knob of the pipeline in one JSON document.

    Top-level ``grid``, ``noise`` and ``ppo`` sections are defaults for the
    ``forge`` and ``compare`` sections, which may override them.
    """

    seed: int = 0
    grid: GridSpec = field(default_factory=GridSpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    forge: ForgeConfig = field(default_factory=ForgeConfig)
    selection_threshold: float = DEFAULT_SELECTION_THRESHOLD
    predictor: PredictorHyper = field(default_factory=PredictorHyper)
    compare: CompareConfig = field(default_factory=CompareConfig)

    def __post_init__(self) -> None:
        if self.selection_threshold < 0.0:
            raise InvalidConfig(
                f"selection_threshold must be >= 0, got {self.selection_threshold}"
            )
        self.compare.check_seed_hygiene(self.forge)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Return a copy whose noise and predictor streams derive from ``seed``."""
        noise = replace(self.noise, seed=seed)
        return replace(
            self,
            seed=seed,
            noise=noise,
            ppo=replace(self.ppo, seed=seed),
            forge=replace(self.forge, noise=replace(self.forge.noise, seed=seed)),
            predictor=replace(self.predictor, seed=seed),
            compare=replace(self.compare, noise=replace(self.compare.noise, seed=seed)),
        )

    def with_workers(self, workers: int) -> "PipelineConfig":
        return replace(
            self,
            forge=replace(self.forge, workers=workers),
            compare=replace(self.compare, workers=workers),
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "grid": self.grid.to_dict(),
            "noise": self.noise.to_dict(),
            "ppo": self.ppo.to_dict(),
            "forge": self.forge.to_dict(),
            "selection_threshold": self.selection_threshold,
            "predictor": self.predictor.to_dict(),
            "compare": self.compare.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        grid = GridSpec.from_dict(data.get("grid", {}))
        noise = NoiseConfig.from_dict(data.get("noise", {}))
        ppo = PpoConfig.from_dict(data.get("ppo", {}))
        shared = {
            "grid": grid.to_dict(),
            "noise": noise.to_dict(),
            "ppo": ppo.to_dict(),
        }
        threshold = data.get("selection_threshold", DEFAULT_SELECTION_THRESHOLD)
        return cls(
            seed=data.get("seed", 0),
            grid=grid,
            noise=noise,
            ppo=ppo,
            forge=ForgeConfig.from_dict({**shared, **data.get("forge", {})}),
            selection_threshold=threshold,
            predictor=PredictorHyper.from_dict(data.get("predictor", {})),
            compare=CompareConfig.from_dict({**shared, **data.get("compare", {})}),
        )

    @classmethod
    def load(cls, path: Optional[str]) -> "PipelineConfig":
        """Read a config file; no path gives the defaults.

        :raises InvalidConfig: If the file is not valid JSON or has unknown keys
        """
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls.from_dict(data)
        except (OSError, TypeError, ValueError) as err:
            raise InvalidConfig(f"Cannot read config {path}: {err}") from err


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="aiogenrl",
        description="Predict and improve agent generalization from policy weights.",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log at debug level"
    )
    parser.add_argument("--seed", type=int, default=None, help="global base seed")
    parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help=f"worker processes (env: {WORKERS_ENV_VAR})",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    cmd = sub.add_parser("forge", help="train and label an agent population")
    cmd.add_argument("--config", required=True)
    cmd.add_argument("--out", required=True)

    cmd = sub.add_parser(
        "features", help="extract weight statistics and their correlations"
    )
    cmd.add_argument("--manifest", required=True)
    cmd.add_argument("--out", required=True)
    cmd.add_argument("--threshold", type=float, default=None)

    cmd = sub.add_parser("predict-train", help="train a generalization predictor")
    cmd.add_argument("--manifest", required=True)
    cmd.add_argument("--out", required=True)
    cmd.add_argument(
        "--kind",
        choices=[k.value for k in PredictorKind],
        default=PredictorKind.DNN.value,
    )
    cmd.add_argument("--threshold", type=float, default=None)
    cmd.add_argument("--config", default=None)

    cmd = sub.add_parser("predict-eval", help="evaluate a predictor against labels")
    cmd.add_argument("--manifest", required=True)
    cmd.add_argument("--predictor", required=True)
    cmd.add_argument("--out", required=True)
    cmd.add_argument("--split", choices=["test", "all"], default="test")

    cmd = sub.add_parser(
        "agent-train", help="train one agent, optionally with the generalization loss"
    )
    cmd.add_argument("--config", required=True)
    cmd.add_argument("--out", required=True)
    cmd.add_argument("--predictor", default=None)
    cmd.add_argument("--steps", type=int, default=None)
    cmd.add_argument("--env-seed", type=int, default=None)

    cmd = sub.add_parser("compare", help="compare standard and upgraded PPO")
    cmd.add_argument("--config", required=True)
    cmd.add_argument("--predictor", required=True)
    cmd.add_argument("--out", required=True)

    cmd = sub.add_parser("verify", help="re-check a forged dataset")
    cmd.add_argument("--manifest", required=True)
    return parser


def resolve_workers(flag: Optional[int]) -> Optional[int]:
    """Return the worker count from the flag, else the environment."""
    if flag is not None:
        value = flag
    else:
        raw = os.environ.get(WORKERS_ENV_VAR)
        if raw is None:
            return None
        try:
            value = int(raw)
        except ValueError as err:
            raise UsageError(
                f"{WORKERS_ENV_VAR} must be an integer, got {raw!r}"
            ) from err
    if value < 1:
        raise UsageError(f"Worker count must be >= 1, got {value}")
    return value


def _effective_config(args: argparse.Namespace, path: Optional[str]) -> PipelineConfig:
    config = PipelineConfig.load(path)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    workers = resolve_workers(args.workers)
    if workers is not None:
        config = config.with_workers(workers)
    return config


def _echo(
    out_dir: Path,
    args: argparse.Namespace,
    config: Optional[dict] = None,
    **extra: Any,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": args.command,
        "seed": args.seed,
        "arguments": vars(args),
        "config": config,
        **extra,
    }
    text = json.dumps(payload, indent=2, sort_keys=True, default=str)
    (out_dir / CONFIG_ECHO_FILE).write_text(text, encoding="utf-8")


def cmd_forge(args: argparse.Namespace) -> int:
    config = _effective_config(args, args.config)
    out_dir = Path(args.out)
    _echo(out_dir, args, config.to_dict())
    manifest = forge(config.forge, out_dir)
    ok, total = len(manifest.ok_records), len(manifest.records)
    print(f"Forged {ok}/{total} agents into {out_dir / MANIFEST_FILE}")
    return 0


def _dataset(manifest_path: str):
    manifest = DatasetManifest.load(manifest_path)
    if not manifest.ok_records:
        raise ManifestError(f"{manifest_path} holds no successfully forged agents")
    snapshots = manifest.snapshots()
    return manifest, snapshots, manifest.labels()


def cmd_features(args: argparse.Namespace) -> int:
    threshold = args.threshold
    if threshold is None:
        threshold = DEFAULT_SELECTION_THRESHOLD
    manifest, snapshots, labels = _dataset(args.manifest)
    features = feature_matrix(snapshots)
    out_dir = Path(args.out)
    _echo(out_dir, args, manifest.config.to_dict(), threshold=threshold)
    ids = [s.agent_id for s in snapshots]
    write_feature_csv(out_dir / "features.csv", ids, features, labels)
    mask = select_features(features, labels, threshold)
    write_correlation_csv(out_dir / "correlations.csv", mask)
    text = json.dumps(mask.to_dict(), indent=2)
    (out_dir / "mask.json").write_text(text, encoding="utf-8")
    print(f"Selected {mask.count} features: {', '.join(mask.selected_names())}")
    return 0


def cmd_predict_train(args: argparse.Namespace) -> int:
    config = _effective_config(args, args.config)
    threshold = args.threshold
    if threshold is None:
        threshold = config.selection_threshold
    manifest, snapshots, labels = _dataset(args.manifest)
    ids = [s.agent_id for s in snapshots]
    shapes = snapshots[0].shapes if snapshots else None
    hyper = config.predictor
    if args.kind == PredictorKind.DNN.value:
        features = feature_matrix(snapshots)
        train, _ = split_indices(len(snapshots), hyper.test_fraction, hyper.seed)
        mask = select_features(features[train], labels[train], threshold)
        artifact = train_dnn(features, labels, mask, hyper, ids, shapes)
    else:
        images = [build_weight_image(s) for s in snapshots]
        artifact = train_cnn(images, labels, hyper, ids, shapes)
    artifact.metadata["manifest"] = str(Path(args.manifest).resolve())
    out_dir = Path(args.out)
    artifact.save(out_dir)
    _echo(out_dir, args, config.to_dict(), threshold=threshold)
    held_out = artifact.metadata["test_pearson"]
    print(f"Trained {args.kind} predictor: held-out pearson {held_out}")
    return 0


def cmd_predict_eval(args: argparse.Namespace) -> int:
    artifact = PredictorArtifact.load(args.predictor)
    _, snapshots, labels = _dataset(args.manifest)
    if args.split == "test":
        test_ids = set(artifact.metadata.get("test_ids", []))
        if not test_ids:
            raise UsageError(
                "The predictor records no held-out agents; use --split all"
            )
        keep = [i for i, s in enumerate(snapshots) if s.agent_id in test_ids]
        snapshots = [snapshots[i] for i in keep]
        labels = labels[keep]
    report = evaluate_predictor(artifact, snapshots, labels)
    out_dir = Path(args.out)
    _echo(out_dir, args, None, predictor_fingerprint=artifact.fingerprint())
    report.write_csv(out_dir / "predictions.csv")
    text = json.dumps(report.to_dict(), indent=2)
    (out_dir / "report.json").write_text(text, encoding="utf-8")
    print(
        f"pearson={report.pearson:.4f} ({report.grade}) "
        f"mse={report.mse:.6f} r2={report.r2:.4f}"
    )
    return 0


def cmd_agent_train(args: argparse.Namespace) -> int:
    config = _effective_config(args, args.config)
    compare_cfg = config.compare
    spec = config.grid
    if args.env_seed is not None:
        spec = spec.with_seed(args.env_seed)
    steps = compare_cfg.total_steps if args.steps is None else args.steps
    hook = None
    ppo = config.ppo
    if args.predictor is not None:
        hook = GenLossHook(PredictorArtifact.load(args.predictor))
    else:
        ppo = replace(ppo, gen_coef=0.0)
    eval_specs = compare_cfg.eval_specs()

    def evaluator(policy) -> float:
        return compute_zeta(
            policy, eval_specs, compare_cfg.noise, compare_cfg.episodes_per_env
        )

    trainer = PpoTrainer(generate(spec), ppo, hook)
    result = trainer.train(steps, compare_cfg.eval_every, evaluator)
    out_dir = Path(args.out)
    _echo(out_dir, args, config.to_dict())
    write_checkpoint_csv(out_dir / "checkpoints.csv", result.log)
    weights = encode_matrices(result.policy.weight_matrices())
    (out_dir / "policy.rlwb").write_bytes(weights)
    print(f"Final zeta {result.evaluations[-1][1]:.4f} after {steps} steps")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    config = _effective_config(args, args.config)
    compare_cfg = replace(config.compare, predictor_path=args.predictor)
    compare_cfg.check_seed_hygiene(config.forge)
    result = compare(compare_cfg)
    out_dir = Path(args.out)
    _echo(out_dir, args, {**config.to_dict(), "compare": compare_cfg.to_dict()})
    emit_report(result.points, out_dir, result.curves, result.sign_test)
    last_step = result.points[-1].step
    final = {p.arm: p.mean_zeta for p in result.points if p.step == last_step}
    summary = ", ".join(f"{arm}={value:.4f}" for arm, value in sorted(final.items()))
    print(f"Final mean zeta: {summary}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    manifest = verify_manifest(args.manifest)
    print(f"{len(manifest.ok_records)} agents verified")
    return 0


COMMANDS = {
    "forge": cmd_forge,
    "features": cmd_features,
    "predict-train": cmd_predict_train,
    "predict-eval": cmd_predict_eval,
    "agent-train": cmd_agent_train,
    "compare": cmd_compare,
    "verify": cmd_verify,
}


def run_subcommand(argv: Sequence[str]) -> int:
    """Run one subcommand and return its exit code.

    :return: 0 on success, 1 on a domain or data error, 2 on a usage error
    :rtype: ``int``
    """
    try:
        args = build_parser().parse_args(list(argv))
    except UsageError as err:
        print(err, file=sys.stderr)
        return 2
    except SystemExit as err:
        return 0 if err.code in (0, None) else 2
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        _LOGGER.error("%s", err)
        return 2
    except (GenRLError, OSError, ValueError) as err:
        _LOGGER.error("%s failed: %s", args.command, err)
        return 1


def main() -> None:
    sys.exit(run_subcommand(sys.argv[1:]))
