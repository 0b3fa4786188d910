"""``anyxr`` command line: synth, train, generate, evaluate.

Every command writes the resolved configuration (seed included) next to
its outputs as ``config.ini``. Exit codes: 0 success, 2 usage or config
error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import STAGES, Config, parse_config
from .errors import (CheckpointError, ConfigError, ContractError, DataError, NumericError,
                     PreconditionError, UndefinedMetricError)
from .settings import GenerationSetting

log = logging.getLogger("anyxr")

WORKERS_ENV = "ANYXR_WORKERS"
CONFIG_NAME = "config.ini"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {n}")
    return n


def resolve_config(config_path, run_dir: Path | None, seed: int | None) -> Config:
    """Explicit file, else the run directory's echoed config, else defaults; ``--seed`` wins."""
    if config_path is not None:
        cfg = parse_config(config_path)
    elif run_dir is not None and (run_dir / CONFIG_NAME).exists():
        cfg = parse_config(run_dir / CONFIG_NAME)
    else:
        cfg = Config()
    if seed is not None:
        cfg.set("run", "seed", seed)
    return cfg


def echo_config(cfg: Config, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir / CONFIG_NAME)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    from .synth import gen_dataset

    out = Path(args.out)
    cfg = resolve_config(args.config, None, args.seed)
    data = cfg["data"]
    if args.prevalence is not None:
        data["prevalence"] = args.prevalence
    if args.unmentioned is not None:
        data["unmentioned"] = args.unmentioned
    if args.size is not None:
        data["image_size"] = args.size
    try:
        rows = gen_dataset(args.n, cfg["run"]["seed"], data["prevalence"], out, data["image_size"],
                           data["unmentioned"], workers=worker_count())
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    echo_config(cfg, out)
    log.info("wrote %d triplets to %s", len(rows), out)


def cmd_train(args) -> None:
    from .ingest import load_dataset
    from .joint import checkpoint_path, train_stage

    if args.stage not in STAGES:
        raise ConfigError(f"unknown stage {args.stage!r}; valid stages: {', '.join(STAGES)}")
    run = Path(args.out)
    cfg = resolve_config(args.config, run, args.seed)
    train = load_dataset(args.data, cfg["data"]["image_size"], split="train")
    if len(train) == 0:
        raise DataError(f"{args.data} has no training split")
    echo_config(cfg, run)
    report = lambda e, loss: log.info("%s epoch %d loss %.5f", args.stage, e, loss)
    if args.stage == "oracle":
        from .oracle import OracleClassifier, oracle_training_set

        opt = cfg.stage("oracle")
        est = OracleClassifier(lr=opt["lr"], weight_decay=opt["weight_decay"], epochs=opt["epochs"],
                               batch_size=opt["batch_size"], seed=cfg["run"]["seed"])
        est.fit(*oracle_training_set(train.frontal, train.lateral, train.factors))
        path = checkpoint_path(run, "oracle")
        path.parent.mkdir(parents=True, exist_ok=True)
        est.save(path)
    else:
        path = train_stage(args.stage, cfg, train, run, on_epoch=report)
    log.info("wrote %s", path)


def write_generated(out: Path, setting: GenerationSetting, sample, sources, seed: int) -> None:
    """PNG (8-bit, for viewing) plus float32 ``.npy`` sidecars; reports as text;
    ``meta.csv`` carries the source factors, ``generation.csv`` the provenance."""
    from .synth import save_png, write_meta

    n = len(sources)
    ids = [f"g{i:05d}" for i in range(n)]
    for m in setting.targets:
        if m == "T":
            (out / "reports").mkdir(parents=True, exist_ok=True)
            for sid, text in zip(ids, sample.outputs["T"]):
                (out / "reports" / f"{sid}.txt").write_text(text + "\n", encoding="utf-8")
            continue
        view = "frontal" if m == "F" else "lateral"
        (out / view).mkdir(parents=True, exist_ok=True)
        for sid, img in zip(ids, sample.outputs[m]):
            save_png(out / view / f"{sid}.png", img, bits=8)
            np.save(out / view / f"{sid}.npy", np.asarray(img[0], dtype=np.float32))
    write_meta(out / "meta.csv", [{"id": sid, "split": "gen", "factors": f}
                                  for sid, f in zip(ids, sources.factors)])
    with open(out / "generation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "setting", "source_id", "seed"])
        for sid, src in zip(ids, sources.ids):
            w.writerow([sid, str(setting), src, seed])


def cmd_generate(args) -> None:
    from .ingest import load_dataset
    from .joint import generate, load_run, schedule_from

    setting = GenerationSetting.from_lists(args.sources, args.targets)
    run = Path(args.run)
    cfg = resolve_config(None, run, None)
    if args.seed is not None:
        gen_seed = args.seed
    else:
        gen_seed = cfg["run"]["seed"]
    n = args.n if args.n is not None else cfg["generate"]["n"]
    if n < 1:
        raise ConfigError("--n must be >= 1")
    test = load_dataset(args.data, cfg["data"]["image_size"], split="test")
    if len(test) == 0:
        raise DataError(f"{args.data} has no test split to draw source prompts from")
    sources = test.subset(np.arange(min(n, len(test))))
    bundle, vocab = load_run(run, cfg)
    sample = generate(bundle, vocab, setting, sources, schedule_from(cfg), gen_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_generated(out, setting, sample, sources, gen_seed)
    cfg.set("run", "seed", gen_seed)
    cfg.set("generate", "n", len(sources))
    echo_config(cfg, out)
    log.info("wrote %d samples for %s to %s", len(sources), setting, out)


def cmd_evaluate(args) -> None:
    from .metrics import METRIC_GROUPS, MetricsReport, evaluate_generation

    groups = [g.strip().lower() for g in args.metrics.split(",") if g.strip()]
    if not groups:
        raise ConfigError("--metrics needs at least one group")
    for g in groups:
        if g not in METRIC_GROUPS:
            raise ConfigError(f"unknown metric group {g!r}; choose from {', '.join(sorted(METRIC_GROUPS))}")
    cfg = resolve_config(args.config, Path(args.run) if args.run else None, None)
    size = cfg["data"]["image_size"]
    oracle = encoders = None
    if args.oracle:
        from .oracle import OracleClassifier

        oracle = OracleClassifier.load(args.oracle)
    if args.run:
        from .joint import load_run
        from .prompt_encoders import image_features

        bundle, _ = load_run(Path(args.run), cfg)
        if "bridging" in bundle._trained:
            encoders = lambda x: image_features(bundle.prompt.image, x).astype(np.float64)
    report = MetricsReport()
    for gen_dir in args.gen:
        part = evaluate_generation(args.real, gen_dir, None, oracle, encoders, groups, size)
        report.rows.extend(part.select(groups).rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    echo_config(cfg, out.parent)
    log.info("wrote %d metric rows to %s", len(report.rows), out)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anyxr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic triplet dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--prevalence", type=float)
    s.add_argument("--unmentioned", type=float)
    s.add_argument("--size", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one stage into a run directory")
    t.add_argument("--stage", required=True, help=", ".join(STAGES))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample a generation setting from a trained run")
    g.add_argument("--from", dest="sources", required=True, help="source modalities, e.g. T or F,L")
    g.add_argument("--to", dest="targets", required=True, help="target modalities, e.g. F or F,L")
    g.add_argument("--run", required=True)
    g.add_argument("--data", required=True, help="dataset whose test split supplies the prompts")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score generated directories against the real test split")
    e.add_argument("--real", required=True)
    e.add_argument("--gen", required=True, nargs="+")
    e.add_argument("--metrics", default="fid,bleu,auroc,f1", help="comma list of fid, bleu, auroc, f1")
    e.add_argument("--oracle", help="oracle checkpoint (oracle FID, AUROC, image F1)")
    e.add_argument("--run", help="run directory; its prompt image encoder gives generic FID")
    e.add_argument("--config")
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (ConfigError, PreconditionError, ContractError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataError, CheckpointError, UndefinedMetricError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
