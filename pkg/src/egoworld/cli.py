"""Command-line entry point: dataset collection, representation training,
representation evaluation, policy training, and policy evaluation as
subcommands over one JSON config document.

Exit codes are a stable contract for scripting: 0 success, 1 usage or config
error, 2 I/O or file-format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import gridworld as gw
from .errors import ConfigError, EgoworldError, FormatError, NumericalError
from .evaluation import (dump_permutation_recon, eval_alignment, pca_projection,
                         write_pca_csv)
from .imitation import (ImitationEnv, PolicyNet, PPOConfig, RewardConfig,
                        UniformRandomPolicy, eval_policy, train_policy)
from .losses import LossConfig
from .model import FPV, TPV, DualAE
from .trajectory import Manifest, collect_dataset, load_manifest, load_split, read_trajectory
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3


@dataclass
class RunConfig:
    """Parsed config document; unknown keys anywhere are rejected."""

    seed: int = 0
    workspace: Path = Path(".")
    env: gw.EnvConfig = field(default_factory=gw.EnvConfig)
    data_trajectories: int = 8
    data_test_fraction: float = 0.2
    data_output_dir: str = "dataset"
    train: TrainConfig = field(default_factory=TrainConfig)
    repr_output_dir: str = "repr"
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    policy_output_dir: str = "policy"

    def resolve(self, path_str: str) -> Path:
        p = Path(path_str)
        return p if p.is_absolute() else self.workspace / p


def _take(doc: dict, where: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {where!r} must be an object")
    return dict(doc)


def _reject_unknown(leftover: dict, where: str) -> None:
    if leftover:
        raise ConfigError(f"unknown config key(s) in {where}: {sorted(leftover)}")


def _pop_fields(doc: dict, defaults, where: str):
    """Overlay doc onto a dataclass instance, strictly."""
    kwargs = {}
    names = {f for f in defaults.__dataclass_fields__}
    for key in list(doc):
        if key in names:
            kwargs[key] = doc.pop(key)
    _reject_unknown(doc, where)
    if "channels" in kwargs:
        kwargs["channels"] = tuple(kwargs["channels"])
    return replace(defaults, **kwargs)


def parse_run_config(doc: dict, config_dir: Path) -> RunConfig:
    doc = _take(doc, "top level")
    cfg = RunConfig()
    cfg.seed = int(doc.pop("seed", cfg.seed))
    workspace = doc.pop("workspace", None)
    cfg.workspace = (config_dir / workspace).resolve() if workspace else config_dir

    env_doc = _take(doc.pop("env", {}), "env")
    cfg.env = _pop_fields(env_doc, gw.EnvConfig(), "env").validate()

    data_doc = _take(doc.pop("data", {}), "data")
    cfg.data_trajectories = int(data_doc.pop("trajectories", cfg.data_trajectories))
    cfg.data_test_fraction = float(data_doc.pop("test_fraction", cfg.data_test_fraction))
    cfg.data_output_dir = str(data_doc.pop("output_dir", cfg.data_output_dir))
    _reject_unknown(data_doc, "data")

    repr_doc = _take(doc.pop("repr", {}), "repr")
    loss_doc = _take(repr_doc.pop("loss", {}), "repr.loss")
    loss = _pop_fields(loss_doc, LossConfig(), "repr.loss").validate()
    cfg.repr_output_dir = str(repr_doc.pop("output_dir", cfg.repr_output_dir))
    train_cfg = _pop_fields(repr_doc, TrainConfig(loss=loss, seed=cfg.seed), "repr")
    cfg.train = replace(train_cfg, loss=loss)

    policy_doc = _take(doc.pop("policy", {}), "policy")
    reward_doc = _take(policy_doc.pop("reward", {}), "policy.reward")
    cfg.reward = _pop_fields(reward_doc, RewardConfig(), "policy.reward").validate()
    ppo_doc = _take(policy_doc.pop("ppo", {}), "policy.ppo")
    cfg.ppo = _pop_fields(ppo_doc, PPOConfig(), "policy.ppo").validate()
    cfg.policy_output_dir = str(policy_doc.pop("output_dir", cfg.policy_output_dir))
    _reject_unknown(policy_doc, "policy")

    _reject_unknown(doc, "top level")
    return cfg


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig(workspace=Path.cwd())
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from None
    return parse_run_config(doc, p.parent.resolve())


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="egoworld",
                     description="dual auto-encoder third-person imitation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="collect a synthetic multi-view dataset")
    p.add_argument("--config")
    p.add_argument("--out", help="dataset directory (default from config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--overwrite", action="store_true",
                   help="allow writing into a non-empty directory")

    p = sub.add_parser("train-repr", help="train the representation model")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True, help="dataset directory or manifest path")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--dim-v", type=int)
    p.add_argument("--dim-h", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--variant", choices=["dual", "shared"])
    p.add_argument("--fpv-only", action="store_true")
    p.add_argument("--vmatch", action="store_true")

    p = sub.add_parser("eval-repr", help="alignment error, projections, swap dumps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--out")

    p = sub.add_parser("train-policy", help="imitation policy learning")
    p.add_argument("--config")
    p.add_argument("--repr", required=True, dest="repr_ckpt")
    p.add_argument("--dataset", required=True)
    p.add_argument("--demo-id", required=True,
                   help="test-split index or trajectory file name")
    p.add_argument("--mode", choices=["fpil", "tpil"], required=True)
    p.add_argument("--demo-view", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("eval-policy", help="success rate over evaluation episodes")
    p.add_argument("--config")
    p.add_argument("--repr", required=True, dest="repr_ckpt")
    p.add_argument("--policy")
    p.add_argument("--random-policy", action="store_true")
    p.add_argument("--dataset", required=True)
    p.add_argument("--demo-id", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    return parser


def _load_manifest_arg(dataset: str) -> Manifest:
    path = Path(dataset)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FormatError(f"dataset manifest not found: {path}")
    return load_manifest(path)


def _resolve_demo(manifest: Manifest, demo_id: str):
    """Demo must come from the held-out split; training-split demos are a
    protocol violation and are refused."""
    by_name = {name: i for i, name in enumerate(manifest.test)}
    if demo_id in by_name:
        idx = by_name[demo_id]
    else:
        if demo_id in manifest.train:
            raise ConfigError(f"demo {demo_id!r} is in the training split; "
                              "policies may only imitate held-out demonstrations")
        try:
            idx = int(demo_id)
        except ValueError:
            raise ConfigError(f"unknown demo id {demo_id!r}") from None
        if not 0 <= idx < len(manifest.test):
            raise ConfigError(f"demo index {idx} outside the test split "
                              f"(0..{len(manifest.test) - 1})")
    return read_trajectory(manifest.test_paths()[idx]), idx


def cmd_collect(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out) if args.out else cfg.resolve(cfg.data_output_dir)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise ConfigError(f"output directory {out} is not empty; pass --overwrite")
    manifest = collect_dataset(out, cfg.data_trajectories, cfg.env, seed=cfg.seed,
                               test_fraction=cfg.data_test_fraction)
    print(f"dataset={out} trajectories={cfg.data_trajectories} "
          f"train={len(manifest.train)} test={len(manifest.test)}")
    return EXIT_OK


def cmd_train_repr(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _load_manifest_arg(args.dataset)
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.dim_v is not None:
        train_cfg = replace(train_cfg, dim_v=args.dim_v)
    if args.dim_h is not None:
        train_cfg = replace(train_cfg, dim_h=args.dim_h)
    if args.steps is not None:
        train_cfg = replace(train_cfg, steps=args.steps)
    if args.variant == "shared":
        train_cfg = replace(train_cfg, shared_encoder=True, dim_v=0)
    if args.fpv_only:
        train_cfg = replace(train_cfg, fpv_only=True, shared_encoder=True, dim_v=0)
    if args.vmatch:
        train_cfg = replace(train_cfg, use_vmatch=True)
    out = Path(args.out) if args.out else cfg.resolve(cfg.repr_output_dir)
    result = train(manifest, train_cfg, out_dir=out)
    best = "n/a" if result.best_alignment is None else f"{result.best_alignment:.6g}"
    print(f"checkpoint={result.best_path} best_alignment={best}")
    return EXIT_OK


def cmd_eval_repr(args) -> int:
    manifest = _load_manifest_arg(args.dataset)
    model, _ = DualAE.load(args.checkpoint)
    trajectories = load_split(manifest, args.split)
    if not trajectories:
        raise ConfigError(f"split {args.split!r} is empty")
    report = eval_alignment(model, trajectories, split=args.split,
                            model_id=str(args.checkpoint))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "alignment.csv")
    rows, rank = pca_projection(model, trajectories)
    write_pca_csv(rows, rank, out / "pca.csv")
    if model.config.dim_v > 0:
        dump_permutation_recon(model, trajectories[0], out / "recon_dumps")
    print(f"alignment_error={report.mean:.10g}")
    return EXIT_OK


def cmd_train_policy(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _load_manifest_arg(args.dataset)
    model, _ = DualAE.load(args.repr_ckpt)
    demo, demo_idx = _resolve_demo(manifest, args.demo_id)
    reward = replace(cfg.reward, demo_branch=FPV if args.mode == "fpil" else TPV)
    if args.threshold is not None:
        reward = replace(reward, threshold=args.threshold)
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out) if args.out else cfg.resolve(cfg.policy_output_dir)
    result = train_policy(model, demo, reward.validate(), cfg.ppo, manifest.env,
                          seed=seed, demo_view=args.demo_view, out_dir=out)
    print(f"policy={out / 'policy.egw'} mode={args.mode} demo={demo_idx} "
          f"best_update={result.best_update}")
    return EXIT_OK


def cmd_eval_policy(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _load_manifest_arg(args.dataset)
    model, _ = DualAE.load(args.repr_ckpt)
    demo, _ = _resolve_demo(manifest, args.demo_id)
    seed = args.seed if args.seed is not None else cfg.seed
    target = (int(demo.states[0][3]), int(demo.states[0][4]))
    env = ImitationEnv(manifest.env, target,
                       np.random.default_rng(np.random.SeedSequence([seed, 0xe7a1])))
    if args.random_policy:
        policy = UniformRandomPolicy()
        report = eval_policy(env, policy, model, episodes=args.episodes, greedy=False,
                             rng=np.random.default_rng(np.random.SeedSequence([seed, 0xba5e])))
    else:
        if not args.policy:
            raise ConfigError("need --policy unless --random-policy is set")
        policy, _ = PolicyNet.load(args.policy)
        report = eval_policy(env, policy, model, episodes=args.episodes)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "episodes.csv")
    print(f"success_rate={report.success_rate:.10g} reward_mean={report.reward_mean:.10g} "
          f"reward_std={report.reward_std:.10g}")
    return EXIT_OK


_COMMANDS = {
    "collect": cmd_collect,
    "train-repr": cmd_train_repr,
    "eval-repr": cmd_eval_repr,
    "train-policy": cmd_train_policy,
    "eval-policy": cmd_eval_policy,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EgoworldError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
