"""Command line: ``jfdal {gen-data,train,eval,study,sweep-alpha}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Log verbosity comes from ``JFDAL_LOG`` (DEBUG, INFO, WARNING, ...; default INFO).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .embedder import load_checkpoint, save_checkpoint
from .eval import evaluate
from .study import (
    REGIMES,
    ConfigError,
    Experiment,
    ExperimentConfig,
    dump_config,
    format_study,
    format_sweep,
    load_config,
    run_study,
    run_sweep,
    sweep_to_dict,
    write_report,
)
from .synthdata import GenSpec, generate, load_dataset, save_dataset
from .trainer import TrainingDiverged, pretrain_vis, train_ft, train_jfdal, train_jt

log = logging.getLogger("jfdal")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
LOG_ENV = "JFDAL_LOG"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _load_spec(path) -> GenSpec:
    cfg_path = Path(path)
    if not cfg_path.exists():
        raise ConfigError(f"spec file {cfg_path} does not exist")
    try:
        raw = yaml.safe_load(cfg_path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{cfg_path}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{cfg_path}: top level must be a mapping")
    # accept either a bare GenSpec mapping or a full experiment config
    if "data" in raw or "train" in raw:
        return ExperimentConfig.from_dict(raw).data
    try:
        return GenSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cfg_path}: {exc}") from exc


def _load_data(data_dir, cfg: ExperimentConfig | None = None):
    if data_dir is None:
        if cfg is None:
            raise UsageError("--data is required")
        return generate(cfg.data)
    d = Path(data_dir)
    if not d.is_dir():
        raise UsageError(f"data directory {d} does not exist; run gen-data first")
    return load_dataset(d)


def cmd_gen_data(args) -> int:
    spec = _load_spec(args.spec)
    data = generate(spec)
    try:
        paths = save_dataset(data, args.out)
    except OSError as exc:
        raise RuntimeError(f"cannot write to {args.out}: {exc}") from exc
    for name, p in paths.items():
        print(f"wrote {p}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    seed = args.seed if args.seed is not None else cfg.train[args.regime].seed
    tcfg = replace(cfg.train[args.regime], seed=seed)
    data = _load_data(args.data, cfg)
    out = Path(args.out) / f"seed_{seed}" / args.regime
    guidance = None
    if args.regime in ("ft", "jfdal"):
        gpath = Path(args.guidance) if args.guidance else Path(args.out) / f"seed_{seed}" / "vis-only" / "guidance.npz"
        if not gpath.exists():
            raise UsageError(
                f"guidance checkpoint {gpath} not found; run `jfdal train --regime vis-only --seed {seed} "
                f"--out {args.out} ...` first (or pass --guidance)"
            )
        guidance, _ = load_checkpoint(gpath)
        if guidance.config.input_dim != data.hfr_train.obs.shape[1]:
            raise UsageError("guidance checkpoint input_dim does not match the data")
    if args.regime == "jfdal" and tcfg.alpha == 1.0:
        print("note: alpha = 1.0 reduces JFDAL to fine-tuning (FT) on the HFR data", file=sys.stderr)

    if args.regime == "vis-only":
        res = pretrain_vis(data.large_vis, tcfg)
    elif args.regime == "jt":
        res = train_jt(data.large_vis, data.hfr_train, tcfg)
    elif args.regime == "ft":
        res = train_ft(data.hfr_train, guidance, tcfg)
    else:
        res = train_jfdal(data.hfr_train, data.large_vis, guidance, tcfg)

    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.npz", res.params, {"regime": args.regime, "seed": seed,
                                                          "train_config": tcfg.to_dict()})
    if args.regime == "vis-only":
        save_checkpoint(out / "guidance.npz", res.guidance, {"regime": args.regime, "seed": seed})
    res.log.write(out / "trainlog.jsonl")
    print(f"wrote {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    params, extra = load_checkpoint(ckpt)
    data = _load_data(args.data, cfg)
    if params.config.input_dim != data.hfr_test.obs.shape[1]:
        raise UsageError(
            f"checkpoint input_dim {params.config.input_dim} does not match data dimension {data.hfr_test.obs.shape[1]}"
        )
    ev = cfg.eval
    rep = evaluate(params, data, ev.fars, ev.folds, ev.bin_width)
    rep.meta = {"checkpoint": str(ckpt), **{k: v for k, v in extra.items() if k in ("regime", "seed")}}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(rep, out)
    for k, v in rep.metrics().items():
        print(f"{k}: {v:.6f}")
    return EXIT_OK


def _experiment(args) -> tuple[ExperimentConfig, Experiment, Path]:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir or "runs")
    out.mkdir(parents=True, exist_ok=True)
    data = _load_data(getattr(args, "data", None), cfg)
    (out / "config.yaml").write_text(dump_config(cfg))
    return cfg, Experiment(cfg, data, out), out


def cmd_study(args) -> int:
    cfg, exp, out = _experiment(args)
    res = run_study(exp)
    text = format_study(res)
    (out / "study.txt").write_text(text)
    (out / "study.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True, default=float))
    print(text, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, exp, out = _experiment(args)
    rows = run_sweep(exp)
    text = format_sweep(rows, cfg.eval.fars[0])
    (out / "sweep.txt").write_text(text)
    (out / "sweep.json").write_text(json.dumps(sweep_to_dict(rows), indent=2, sort_keys=True))
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jfdal", description="Desk-scale JFDAL experiments on synthetic two-domain data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the four data splits")
    g.add_argument("--spec", required=True, help="YAML file with GenSpec fields (or an experiment config)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one regime for one seed")
    t.add_argument("--regime", required=True, choices=REGIMES)
    t.add_argument("--config", help="experiment config (YAML); defaults when omitted")
    t.add_argument("--data", required=True, help="directory written by gen-data")
    t.add_argument("--out", required=True, help="run directory; outputs go to <out>/seed_<s>/<regime>/")
    t.add_argument("--seed", type=int, help="override the configured training seed")
    t.add_argument("--guidance", help="guidance checkpoint for ft/jfdal (default: the vis-only run under --out)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report path (JSON); histogram tables are written beside it")
    e.add_argument("--config", help="experiment config for FAR levels and folds")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("study", help="all four regimes x seeds, with ANOVA and Tukey-Kramer")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (default: out_dir from the config)")
    s.add_argument("--data", help="use saved data instead of generating from the config")
    s.set_defaults(func=cmd_study)

    w = sub.add_parser("sweep-alpha", help="JFDAL over the alpha grid x seeds")
    w.add_argument("--config", required=True)
    w.add_argument("--out", help="output directory (default: out_dir from the config)")
    w.add_argument("--data", help="use saved data instead of generating from the config")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"jfdal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"jfdal: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"jfdal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
