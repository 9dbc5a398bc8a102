"""Command-line interface: ``dom2 {gen-data, augment, train, eval, plot}``.

Exit codes: 0 success, 1 runtime failure (e.g. divergence), 2 usage or
invalid configuration, 3 I/O error, 4 schema/format error. Failures print a
single JSON line ``{"error": ..., "message": ..., "exit_code": ...}`` on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .exceptions import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DivergenceError,
    DomainError,
    SchemaError,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_IO, EXIT_SCHEMA = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # never print usage text / exit from argparse
        raise UsageError(f"{self.prog}: {message}")


def _existing_file(flag: str, path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{flag}: no such file: {path}")
    return p


def _build_parser() -> _Parser:
    parser = _Parser(prog="dom2", description="Diffusion offline multi-agent RL toolkit")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="roll out scripted policies into a dataset file")
    g.add_argument("--env", required=True)
    g.add_argument("--quality", required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    a = sub.add_parser("augment", help="replicate high-return trajectories")
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--thresholds", required=True, help="comma-separated list or 'auto'")
    a.add_argument("--return-kind", default="joint", choices=["joint", "per-agent-mean"])
    a.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train DOM2 or a baseline")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--data", required=True)
    t.add_argument("--algo", choices=["dom2", "ma_cql", "diff_bc"])
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", required=True, help="environment id, optionally with a shift suffix")
    e.add_argument("--k", type=int, default=1)
    e.add_argument("--groups", type=int, default=10)
    e.add_argument("--episodes", type=int, help="with --k 1: number of episodes (overrides --groups)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="plot reports or metrics streams to SVG")
    p.add_argument("--in", dest="inp", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return parser


# commands -------------------------------------------------------------------

def _cmd_gen_data(args) -> dict:
    from .datasets import QUALITIES, generate_dataset, write_dataset
    from .envs import parse_env_id

    parse_env_id(args.env)
    if args.quality not in QUALITIES:
        raise ConfigurationError(f"--quality must be one of {QUALITIES}")
    if args.episodes <= 0:
        raise ConfigurationError("--episodes must be positive")
    ds = generate_dataset(args.env, args.quality, args.episodes, args.seed)
    write_dataset(ds, args.out)
    return {"out": args.out, "trajectories": len(ds)}


def _cmd_augment(args) -> dict:
    from .datasets import augment, auto_thresholds, parse_thresholds, read_dataset, write_dataset

    thresholds = parse_thresholds(args.thresholds)
    ds = read_dataset(_existing_file("--in", args.inp))
    if thresholds == "auto":
        thresholds = auto_thresholds(ds, args.return_kind)
    out = augment(ds, thresholds, args.return_kind)
    write_dataset(out, args.out)
    return {"out": args.out, "trajectories": len(out), "thresholds": list(thresholds)}


def _load_config(args):
    from .training import TrainConfig

    d = {}
    if args.config:
        text = _existing_file("--config", args.config).read_text(encoding="utf-8")
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"--config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise SchemaError("--config must hold a JSON object")
    if args.algo is not None:
        d["algo"] = args.algo
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _cmd_train(args) -> dict:
    from .datasets import read_dataset
    from .training import train

    config = _load_config(args)
    data = _existing_file("--data", args.data)
    resume = _existing_file("--resume", args.resume) if args.resume else None
    dataset = read_dataset(data)
    ckpt, metrics = train(config, dataset, args.out_dir, resume_from=resume)
    return {"out_dir": args.out_dir, "step": ckpt.step, "metrics_records": len(metrics)}


def _cmd_eval(args) -> dict:
    from .envs import make_env
    from .evaluation import k_eval
    from .training import LearnedPolicy, load_checkpoint

    if args.k < 1:
        raise ConfigurationError("--k must be >= 1")
    groups = args.groups
    if args.episodes is not None:
        if args.k != 1:
            raise ConfigurationError("--episodes applies to --k 1 only; use --groups with --k > 1")
        groups = args.episodes
    if groups < 0:
        raise ConfigurationError("--groups/--episodes must be non-negative")
    env = make_env(args.env)
    ckpt = load_checkpoint(_existing_file("--checkpoint", args.checkpoint))
    if ckpt.dims["obs_dim"] != env.obs_dim or ckpt.dims["n_agents"] != env.n_agents:
        raise ContractError(
            f"checkpoint (n_agents={ckpt.dims['n_agents']}, obs_dim={ckpt.dims['obs_dim']}) does not fit {args.env}"
        )
    policy = LearnedPolicy.from_checkpoint(ckpt)
    report = k_eval(policy, env, groups, args.k, args.seed, label=ckpt.config["algo"])
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    return {"out": args.out, "mean": report.mean, "std": report.std, "K": report.K}


def _read_plot_input(path: Path):
    from .evaluation import EvalReport

    text = path.read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = None
    if isinstance(obj, dict) and "env_id" in obj:
        return [EvalReport.from_dict(obj)]
    records = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            raise SchemaError(f"{path}:{n}: not JSON") from None
        if not isinstance(rec, dict) or "step" not in rec:
            raise SchemaError(f"{path}:{n}: neither an evaluation report nor a metrics record")
        rec.setdefault("label", path.parent.name or path.stem)
        records.append(rec)
    return records


def _cmd_plot(args) -> dict:
    from .evaluation import EvalReport, emit_plots

    paths = [_existing_file("--in", p) for p in args.inp]
    items = [item for p in paths for item in _read_plot_input(p)]
    kinds = {isinstance(i, EvalReport) for i in items}
    if len(kinds) > 1:
        raise SchemaError("--in mixes evaluation reports and metrics streams")
    summary = emit_plots(items, args.out)
    return {"out": args.out, "kind": summary.kind, "n_bars": summary.n_bars, "n_lines": summary.n_lines}


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "plot": _cmd_plot,
}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}, sort_keys=True), file=sys.stderr)
    return code


def run(argv=None) -> int:
    """Execute one command; returns the process exit code."""
    try:
        args = _build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        result = _COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (SchemaError, CheckpointError) as exc:
        return _fail("schema", exc, EXIT_SCHEMA)
    except (ConfigurationError, ContractError, DomainError) as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)
    except DivergenceError as exc:
        return _fail("divergence", exc, EXIT_RUNTIME)
    print(json.dumps({"command": args.command, **result}, sort_keys=True))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
