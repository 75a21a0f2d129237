"""Command line entry point: ``modgnn {gen-data,train,eval,matrix,inspect}``.

Exit codes: 0 success, 1 configuration error, 2 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evalkit, flocksim, trainer
from .config import RunConfig, load_config
from .flocksim import ConfigError
from .model import VARIANTS, load_model

log = logging.getLogger("modgnn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class RuntimeFailure(RuntimeError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _write_meta(path: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = {"format_version": 1, "run_config": cfg.resolved()}
    if extra:
        doc.update(extra)
    Path(str(path) + ".meta.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def checkpoint_path(cfg: RunConfig, variant: str, K: int) -> Path:
    return cfg.path("checkpoints") / f"{variant}_K{K}.json"


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    env = cfg.env_config()
    out = Path(args.out) if args.out else cfg.path("dataset")
    out.parent.mkdir(parents=True, exist_ok=True)
    episodes = flocksim.generate_dataset(env, cfg.flocking_gains(), cfg.train.n_episodes)
    size = flocksim.write_dataset(out, episodes, env, cfg.flocking_gains(), {"run_config": cfg.resolved()})
    frames = sum(len(ep) for ep in episodes)
    print(f"wrote {out}: {len(episodes)} episodes, {frames} frames, {size} bytes")
    return EXIT_OK


def _load_frames(cfg: RunConfig):
    path = cfg.path("dataset")
    if not path.exists():
        raise RuntimeFailure(f"dataset {path} does not exist; run gen-data first")
    header, episodes = flocksim.read_dataset(path)
    return header, trainer.frames_from_episodes(episodes)


def cmd_train(args) -> int:
    cfg = _config(args)
    variant = args.variant or "modgnn_mlp"
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    K = cfg.model.K if args.K is None else args.K
    header, frames = _load_frames(cfg)
    tcfg = cfg.train_config(variant, K, n_agents=header["env"]["n_agents"])
    try:
        report, model = trainer.train(frames, tcfg)
    except trainer.DivergenceError as exc:
        raise RuntimeFailure(str(exc)) from exc
    ckpt = Path(args.out) if args.out else checkpoint_path(cfg, variant, K)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    report.checkpoint = ckpt.name
    trainer.save_trained(ckpt, model, tcfg, report)
    reports = cfg.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    stem = f"{variant}_K{K}"
    trainer.write_report(reports / f"{stem}.report.json", report, cfg.resolved())
    trainer.write_loss_csv(reports / f"{stem}.loss.csv", report)
    final_val = report.val_loss[-1] if report.val_loss else float("nan")
    print(
        f"trained {stem}: {len(report.train_loss)} epochs, final val {final_val:.6g}, "
        f"batches {report.schedule_digest[:16]}, {report.wall_time:.1f}s -> {ckpt}"
    )
    if trainer.smoothed_divergence(report.train_loss):
        log.warning("smoothed training loss rose more than 10%% for %s", stem)
    return EXIT_OK


def _policy(cfg: RunConfig, variant: str, K: int):
    if variant == "expert":
        return evalkit.ExpertPolicy(cfg.flocking_gains(), K, cfg.env.max_speed)
    path = checkpoint_path(cfg, variant, K)
    if not path.exists():
        raise evalkit.MissingCheckpointError(f"missing checkpoint {path}")
    model, header = load_model(path)
    policy = evalkit.ModelPolicy(model, cfg.eval.mode)
    policy.val_loss = header.get("final_val_loss")
    return policy


def cmd_eval(args) -> int:
    cfg = _config(args)
    variant = args.variant or "modgnn_mlp"
    K = cfg.model.K if args.K is None else args.K
    policy = _policy(cfg, variant, K)
    row = evalkit.rollout(policy, cfg.env_config(), cfg.flocking_gains(), cfg.eval.episodes, cfg.eval_seed)
    val_loss = getattr(policy, "val_loss", None)  # the expert has none
    if val_loss is not None and row.error < val_loss:
        # compounding errors should make closed loop no better than open loop
        log.warning("rollout error %.4g is below validation loss %.4g", row.error, val_loss)
    out = Path(args.out) if args.out else cfg.path("reports") / f"eval_{variant}_K{K}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    evalkit.write_metrics_csv(out, [row])
    _write_meta(out, cfg)
    print(f"{variant} K={K} N={row.N}: error {row.error:.6g} -> {out}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg = _config(args)
    m = cfg.matrix
    missing = []
    policies = {}
    for v in m.variants:
        for k in m.K:
            try:
                policies[(v, k)] = _policy(cfg, v, k)
            except evalkit.MissingCheckpointError:
                missing.append(str(checkpoint_path(cfg, v, k)))
    if missing:
        raise evalkit.MissingCheckpointError("missing checkpoints: " + ", ".join(missing))
    rows = evalkit.experiment_matrix(
        policies, m.variants, m.K, m.N, cfg.env_config(), cfg.flocking_gains(),
        cfg.eval.episodes, cfg.eval_seed, jobs=args.jobs,
    )
    out = Path(args.out) if args.out else cfg.path("reports") / "matrix.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    evalkit.write_metrics_csv(out, rows)
    _write_meta(out, cfg)
    print(f"wrote {len(rows)} rows -> {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise RuntimeFailure(f"{path} does not exist")
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError:
        # JSON-lines dataset: the header is the first line
        with open(path) as fh:
            header = json.loads(fh.readline())
    params = header.pop("params", None)
    if params is not None:
        header["n_parameters"] = sum(len(p["values"]) for p in params)
    print(json.dumps(header, indent=1, sort_keys=True))
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def config_defaults_text() -> str:
    lines = ["config keys and defaults:"]
    for section, values in RunConfig().resolved().items():
        if section == "format_version":
            continue
        if not isinstance(values, dict):
            lines.append(f"  {section} = {json.dumps(values)}")
            continue
        for key, value in values.items():
            lines.append(f"  {section}.{key} = {json.dumps(value)}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config (flat dotted keys); defaults apply when omitted")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--out", help="output path, overrides the config")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (matrix rollouts)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="modgnn",
        description=__doc__,
        epilog=config_defaults_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate an expert flocking dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one (variant, K) model")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--K", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="closed-loop rollout metrics for one model")
    p.add_argument("--variant", choices=VARIANTS + ("expert",))
    p.add_argument("--K", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", parents=[common], help="variants x K x N generalization matrix")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("inspect", help="print the header of a dataset, checkpoint or report")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect, verbose=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, evalkit.MissingCheckpointError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
