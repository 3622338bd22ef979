"""
Curriculum Approximate Unlearning

Command-line harness for the whole pipeline:
1. synth:   generate a synthetic Markov session corpus
2. prep:    load, filter and split sessions, select the unlearning set D_f
3. train:   train the GRU recommender (theta_rec)
4. unlearn: run the configured unlearning mode (theta_app)
5. eval:    score a checkpoint (Recall, NDCG, Hit_u, U_beta)
6. ablate:  run CAU, its ablations, Retrain and Original side by side

Usage:
    python cau.py synth --out runs/demo --seed 7
    python cau.py prep --config experiment.json
    python cau.py train --config experiment.json
    python cau.py unlearn --config experiment.json
    python cau.py eval --config experiment.json
    python cau.py ablate --config experiment.json --threads 4

Each stage writes its outputs and a <stage>.manifest.json into the run
directory (config out_dir, or --out). A stage refuses to run on upstream
outputs built with a different dataset, model or training config. Set
CAU_LOG=debug for per-batch logs.

Exit codes:
    0 success, 1 other failure, 2 usage / invalid config,
    3 missing or stale upstream stage, 4 divergence guard abort
"""

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import repeat
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd
from pydantic import ValidationError

from cau_utils import (
    EXIT_DEPENDENCY,
    EXIT_DIVERGENCE,
    EXIT_FAILURE,
    EXIT_OK,
    EXIT_USAGE,
    CauError,
    DependencyError,
    DivergenceError,
    StageTimer,
    StalenessError,
    UsageError,
    ensure_dir,
    setup_logging,
)
from checkpoint_cache import load_checkpoint, save_checkpoint
from curriculum import write_difficulty_dump
from experiment_config import CorpusFormat, ExperimentConfig, SynthSpec, load_config
from gru_model import HyperParams, ParamVector, init_params
from rec_metrics import MetricsReport, popularity_recall_at_k, report, write_metrics_csv, write_metrics_json
from run_manifest import output_path, require_stage, write_manifest
from session_data import (
    SplitCorpus,
    load_interactions,
    preprocess,
    read_corpus,
    read_unlearn_set,
    select_unlearn,
    split,
    write_corpus,
    write_unlearn_set,
)
from synth_corpus import generate, write_synth
from train_recommender import train
from unlearn_engine import Mode, run_mode

logger = logging.getLogger("cau")

STAGE_KEYS = {
    "prep": ("dataset",),
    "train": ("dataset", "model", "train_epochs"),
    "unlearn": ("dataset", "model", "train_epochs", "unlearn"),
    "eval": ("dataset", "model", "train_epochs", "unlearn", "eval"),
    "ablate": ("dataset", "model", "train_epochs", "unlearn", "eval", "ablation"),
}


# wall-clock columns of ablation.csv, left out of its manifest digest
TIMING_COLUMNS = ("seconds", "speedup_vs_retrain")


def stage_config(config: ExperimentConfig, stage: str) -> Dict:
    """The part of the config a stage depends on (never threads or out_dir)."""
    data = config.model_dump(mode="json")
    return {key: data[key] for key in STAGE_KEYS[stage]}


def resolve_config(args) -> ExperimentConfig:
    if args.config is None:
        raise UsageError(f"'{args.command}' needs --config")
    if not Path(args.config).exists():
        raise UsageError(f"Config file {args.config} does not exist")
    return load_config(args.config).with_overrides(seed=args.seed, threads=args.threads, out_dir=args.out)


def write_timings(path, timings: Dict[str, float]) -> None:
    with open(path, "w") as f:
        json.dump(timings, f, indent=2, sort_keys=True)


def load_prepared(out_dir, expected: Optional[Dict] = None) -> Tuple[SplitCorpus, list]:
    """Train/valid/test corpora and D_f from a verified prep stage whose dataset section matches `expected`."""
    manifest = require_stage(out_dir, "prep", expected)
    corpora = {name: read_corpus(output_path(out_dir, manifest, name)) for name in ("train", "valid", "test")}
    samples = read_unlearn_set(output_path(out_dir, manifest, "unlearn"), corpora["train"])
    split_corpus = SplitCorpus(train=corpora["train"], valid=corpora["valid"], test=corpora["test"],
                               seed=manifest["config"]["dataset"]["split_seed"])
    return split_corpus, samples


def load_model(out_dir, manifest: Dict, config: ExperimentConfig) -> Tuple[ParamVector, HyperParams]:
    """
    Load a stage's checkpoint and make sure it was built with config.model.

    Raises:
        StalenessError: If the checkpoint's hyperparameters differ from config.model
    """
    params, hp = load_checkpoint(output_path(out_dir, manifest, "model"))
    if hp != config.model:
        changed = sorted(k for k, v in config.model.model_dump().items() if hp.model_dump()[k] != v)
        raise StalenessError(
            f"Checkpoint of stage '{manifest['stage']}' was trained with different model settings "
            f"({', '.join(changed)}); rerun 'train' with this config"
        )
    return params, hp


def cmd_synth(args) -> None:
    if args.config is not None:
        config = resolve_config(args)
        if config.dataset.synth is None:
            raise UsageError("The config has no dataset.synth section")
        spec, out_dir = config.dataset.synth, config.out_dir
    else:
        spec = SynthSpec() if args.seed is None else SynthSpec(seed=args.seed)
        out_dir = args.out or "runs"

    with StageTimer("synthetic corpus generation", logger):
        path = write_synth(spec, out_dir)
    write_manifest(out_dir, "synth", {"synth": spec.model_dump(mode="json")}, outputs={"corpus": path})
    print(f"Wrote {path}")


def cmd_prep(args) -> None:
    config = resolve_config(args)
    dataset = config.dataset
    out_dir = ensure_dir(config.out_dir)

    with StageTimer("preprocessing", logger) as timer:
        inputs = {}
        if dataset.synth is not None:
            raw = generate(dataset.synth)
        else:
            path = Path(dataset.path)
            if not path.exists():
                raise DependencyError(f"Dataset file {path} does not exist")
            inputs["dataset"] = path
            if dataset.format is CorpusFormat.CORPUS:
                raw = read_corpus(path)
            else:
                raw = load_interactions(path, dataset.format.value)

        corpus = preprocess(raw, dataset.min_count)
        parts = split(corpus, dataset.split_seed)
        samples = []
        if dataset.unlearn_ratio > 0:
            samples = select_unlearn(parts.train, dataset.unlearn_ratio, dataset.split_seed, dataset.max_per_session)

        outputs = {}
        for name, part in (("train", parts.train), ("valid", parts.valid), ("test", parts.test)):
            outputs[name] = out_dir / f"{name}.txt"
            write_corpus(part, outputs[name])
        outputs["unlearn"] = out_dir / "unlearn.txt"
        write_unlearn_set(samples, outputs["unlearn"])

    write_manifest(out_dir, "prep", stage_config(config, "prep"), outputs=outputs, inputs=inputs)
    write_timings(out_dir / "prep_timings.json", {"seconds": timer.seconds})


def cmd_train(args) -> None:
    config = resolve_config(args)
    out_dir = Path(config.out_dir)
    split_corpus, _ = load_prepared(out_dir, stage_config(config, "train"))
    hp = config.model

    history = []
    with StageTimer("recommender training", logger) as timer:
        params = init_params(hp, split_corpus.train.item_count)
        theta_rec = train(params, split_corpus.train, split_corpus.valid, hp, config.train_epochs, history)

    checkpoint = save_checkpoint(theta_rec, hp, out_dir / "model_rec.bin", extra={"stage": "train"})
    history_path = out_dir / "train_history.csv"
    pd.DataFrame(history, columns=["epoch", "loss", "valid_recall"]).to_csv(
        history_path, index=False, float_format="%.10f", lineterminator="\n"
    )
    outputs = {"model": checkpoint, "sidecar": checkpoint.with_suffix(".json"), "history": history_path}
    write_manifest(out_dir, "train", stage_config(config, "train"), outputs=outputs, upstream=["prep"])
    write_timings(out_dir / "train_timings.json", {"seconds": timer.seconds})


def cmd_unlearn(args) -> None:
    config = resolve_config(args)
    out_dir = Path(config.out_dir)
    expected = stage_config(config, "unlearn")
    split_corpus, samples = load_prepared(out_dir, expected)
    manifest = require_stage(out_dir, "train", expected)
    theta_rec, hp = load_model(out_dir, manifest, config)

    unlearn_config = config.resolved_unlearn()
    artifacts = run_mode(unlearn_config.mode, theta_rec, samples, unlearn_config, hp, split_corpus)

    checkpoint = save_checkpoint(artifacts.params, hp, out_dir / "model_app.bin",
                                 extra={"stage": "unlearn", "mode": artifacts.mode.value})
    outputs = {"model": checkpoint, "sidecar": checkpoint.with_suffix(".json")}
    outputs["alpha_trace"] = out_dir / "alpha_trace.csv"
    artifacts.write_alpha_trace(outputs["alpha_trace"])
    outputs["loss_trace"] = out_dir / "loss_trace.csv"
    artifacts.write_loss_trace(outputs["loss_trace"])
    outputs["difficulty"] = out_dir / "difficulty.csv"
    write_difficulty_dump(artifacts.difficulty_rows, outputs["difficulty"])

    write_manifest(out_dir, "unlearn", stage_config(config, "unlearn"), outputs=outputs, upstream=["train"])
    write_timings(out_dir / "unlearn_timings.json", artifacts.timings)


def cmd_eval(args) -> None:
    config = resolve_config(args)
    out_dir = Path(config.out_dir)
    expected = stage_config(config, "eval")
    split_corpus, samples = load_prepared(out_dir, expected)
    stage = "train" if config.eval.model == "rec" else "unlearn"
    manifest = require_stage(out_dir, stage, expected)
    params, hp = load_model(out_dir, manifest, config)

    with StageTimer("evaluation", logger):
        result = report(params, hp, split_corpus.test, samples, config.eval.beta, config.eval.recall_ks,
                        config.eval.hit_ks, run_id=config.eval.model, exclude_prefix=config.eval.exclude_prefix)
        result.extra["popularity_recall@10"] = popularity_recall_at_k(split_corpus.train, split_corpus.test, 10)

    outputs = {"metrics_csv": out_dir / "metrics.csv", "metrics_json": out_dir / "metrics.json"}
    write_metrics_csv([result], outputs["metrics_csv"])
    write_metrics_json([result], outputs["metrics_json"])
    write_manifest(out_dir, "eval", stage_config(config, "eval"), outputs=outputs, upstream=[stage])
    for row in result.to_rows():
        print(f"{row['metric']}@{row['k']}: {row['value']:.4f}")


@dataclass(frozen=True)
class AblationJob:
    run: str
    mode: str
    setting: str
    variant: Optional[str] = None
    batch_size: Optional[int] = None
    ratio: Optional[float] = None


def ablation_jobs(config: ExperimentConfig) -> List[AblationJob]:
    """One job per (run, setting); settings are the base run plus each sweep value."""
    ablation = config.ablation
    settings = [("base", None, None)]
    settings += [(f"batch={b}", b, None) for b in ablation.batch_sizes]
    settings += [(f"ratio={r:.2f}", None, r) for r in ablation.ratios]

    runs = []
    for mode in ablation.modes:
        if mode is Mode.CAU:
            runs += [(f"cau-{variant}", mode.value, variant) for variant in ablation.cau_variants]
        else:
            runs.append((mode.value, mode.value, None))

    return [
        AblationJob(run=run, mode=mode, setting=setting, variant=variant, batch_size=batch, ratio=ratio)
        for setting, batch, ratio in settings
        for run, mode, variant in runs
    ]


def _report_columns(result: MetricsReport) -> Dict[str, float]:
    columns = {}
    for row in result.to_rows():
        name = "u_beta" if row["metric"] == "u_beta" else f"{row['metric']}@{row['k']}"
        columns[name] = row["value"]
    return columns


def run_ablation_job(job: AblationJob, config_data: Dict, out_dir: str) -> Dict:
    """Run one (mode, setting) pair from the on-disk prep and train outputs; one ablation.csv row."""
    config = ExperimentConfig.model_validate(config_data)
    expected = stage_config(config, "ablate")
    split_corpus, samples = load_prepared(out_dir, expected)
    theta_rec, hp = load_model(out_dir, require_stage(out_dir, "train", expected), config)
    if job.ratio is not None:
        samples = select_unlearn(split_corpus.train, job.ratio, config.dataset.split_seed,
                                 config.dataset.max_per_session)

    curriculum = config.unlearn.curriculum
    updates = {}
    if job.variant is not None:
        kind, strategy = job.variant.split("-")
        updates.update(metric_kind=kind, strategy=strategy)
    if job.batch_size is not None:
        updates["batch_size"] = job.batch_size
    unlearn_config = config.resolved_unlearn().model_copy(update={"curriculum": curriculum.model_copy(update=updates)})

    row = {"run": job.run, "setting": job.setting, "status": "ok"}
    try:
        artifacts = run_mode(job.mode, theta_rec, samples, unlearn_config, hp, split_corpus)
    except DivergenceError as e:
        logger.warning(f"{job.run} ({job.setting}) diverged: {str(e)}")
        row["status"] = "diverged"
        row["seconds"] = math.nan
        return row

    result = report(artifacts.params, hp, split_corpus.test, samples, config.eval.beta, config.eval.recall_ks,
                    config.eval.hit_ks, run_id=job.run, exclude_prefix=config.eval.exclude_prefix)
    row.update(_report_columns(result))
    row["seconds"] = artifacts.timings["seconds"]
    return row


def speedups(table: pd.DataFrame) -> pd.Series:
    """Retrain seconds over each run's seconds, within the same setting."""
    retrain = table[table["run"] == Mode.RETRAIN.value].set_index("setting")["seconds"]
    return table.apply(
        lambda r: retrain.get(r["setting"], math.nan) / r["seconds"] if r["seconds"] > 0 else math.nan, axis=1
    )


def cmd_ablate(args) -> None:
    config = resolve_config(args)
    out_dir = Path(config.out_dir)
    expected = stage_config(config, "ablate")
    _, samples = load_prepared(out_dir, expected)
    load_model(out_dir, require_stage(out_dir, "train", expected), config)
    if not samples:
        raise UsageError("Ablation needs a non-empty unlearning set; set dataset.unlearn_ratio above 0")
    jobs = ablation_jobs(config)
    config_data = config.model_dump(mode="json")
    logger.info(f"Running {len(jobs)} ablation jobs on {config.threads} worker(s)")

    with StageTimer("ablation", logger):
        if config.threads > 1:
            with ProcessPoolExecutor(max_workers=config.threads) as pool:
                results = list(pool.map(run_ablation_job, jobs, repeat(config_data), repeat(str(out_dir))))
        else:
            results = [run_ablation_job(job, config_data, str(out_dir)) for job in jobs]

    table = pd.DataFrame(results)
    table["speedup_vs_retrain"] = speedups(table) if len(table) else []

    outputs = {"ablation": out_dir / "ablation.csv"}
    table.to_csv(outputs["ablation"], index=False, float_format="%.10f", lineterminator="\n")
    write_manifest(out_dir, "ablate", expected, outputs=outputs, upstream=["train"],
                   volatile={"ablation": TIMING_COLUMNS})
    print(table.to_string(index=False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cau", description="Curriculum approximate unlearning for session recommenders")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment config JSON")
    common.add_argument("--seed", type=int, help="Override every seed in the config")
    common.add_argument("--threads", type=int, help="Worker processes for independent runs")
    common.add_argument("--out", help="Run directory (overrides out_dir)")

    commands = parser.add_subparsers(dest="command", required=True)
    for name, handler, help_text in (
        ("synth", cmd_synth, "Generate a synthetic session corpus"),
        ("prep", cmd_prep, "Preprocess, split and select the unlearning set"),
        ("train", cmd_train, "Train the recommender"),
        ("unlearn", cmd_unlearn, "Run the configured unlearning mode"),
        ("eval", cmd_eval, "Evaluate a checkpoint"),
        ("ablate", cmd_ablate, "Compare CAU with its ablations and baselines"),
    ):
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.set_defaults(handler=handler)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.threads is not None and args.threads < 1:
        print("Error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    try:
        setup_logging()
    except ValueError as e:
        print(f"Error: {str(e)}", file=sys.stderr)
        return EXIT_USAGE

    try:
        args.handler(args)
    except (UsageError, ValidationError) as e:
        logger.error(f"Invalid usage: {str(e)}")
        return EXIT_USAGE
    except DependencyError as e:
        logger.error(str(e))
        return EXIT_DEPENDENCY
    except DivergenceError as e:
        logger.error(f"Unlearning aborted: {str(e)}")
        return EXIT_DIVERGENCE
    except CauError as e:
        logger.error(f"Error: {str(e)}")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
