"""Command line for cohort generation, training, evaluation, ablation and reports.

Usage: ``python -m app.main <command> [flags]``. Every command exits 0 only
when all of its artifacts were written; library errors map to the exit codes
defined in :mod:`app.errors`.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pandas as pd

from app.ablation import ablate, permutation_importance
from app.cohort_store import load_cohort, save_cohort
from app.config import Preset, RunConfig, apply_overrides, configure_logging, get_preset, load_run_config, preset_names
from app.errors import ConfigError, PRTMError
from app.fusion import AllocationStrategy
from app.model_store import SEGMENTER, ModelStore
from app.risk_predictor import RiskPredictor, timeline_rows
from app.synthetic_cohort import calibration_summary, generate_cohort
from app.training import FusionRun, MetricTrace, batch_for_patients, evaluate_fusion, patient_history, train_fusion, train_segmenter

logger = logging.getLogger(__name__)


def positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def non_negative_int(value: str) -> int:
    number = int(value)
    if number < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return number


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=non_negative_int, help="seed for cohort generation and training")
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--preset", choices=preset_names(), help="model and training scale (default desk)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--workers", type=positive_int, help="worker processes for ablation")

    parser = argparse.ArgumentParser(prog="prtm", description="Multimodal post-recovery tracking model")
    commands = parser.add_subparsers(dest="command", required=True)

    cohort = commands.add_parser("cohort", parents=[common], help="generate a synthetic cohort")
    cohort.add_argument("--n", type=positive_int, help="clinical patients")
    cohort.add_argument("--cine", type=non_negative_int, help="patients with a cine volume")

    train = commands.add_parser("train", parents=[common], help="train the segmenter or the fusion model")
    train.add_argument("target", choices=["seg", "fuse"])
    train.add_argument("--cohort", help="cohort directory")
    train.add_argument("--model", help="directory holding a trained segmenter (default: --out)")
    train.add_argument("--epochs", type=positive_int)
    train.add_argument("--strategy", help="self or fixed:TEXT,CINE,NUMERIC")
    train.add_argument("--modalities", help="comma-separated subset of text,cine,numeric")

    evaluate = commands.add_parser("eval", parents=[common], help="evaluate a trained fusion model")
    evaluate.add_argument("--cohort", help="cohort directory")
    evaluate.add_argument("--model", help="model directory")

    ablation = commands.add_parser("ablate", parents=[common], help="run the modality and allocation ablation")
    ablation.add_argument("--cohort", help="cohort directory")
    ablation.add_argument("--model", help="directory holding a trained segmenter")
    ablation.add_argument("--epochs", type=positive_int)

    report = commands.add_parser("report", parents=[common], help="risk timeline or modality importance")
    report.add_argument("kind", choices=["timeline", "importance"])
    report.add_argument("--cohort", help="cohort directory")
    report.add_argument("--model", help="model directory")
    report.add_argument("--patient", help="patient id for the timeline")
    report.add_argument("--repeats", type=positive_int, help="permutations per group")
    return parser


def _required(run: RunConfig, name: str, command: str) -> str:
    value = getattr(run, name)
    if not value:
        raise ConfigError(f"'{command}' needs --{name}")
    return value


def _load_segmenter(store: ModelStore, required: bool):
    if store.has(SEGMENTER):
        return store.load_segmenter()
    if required:
        raise ConfigError(f"no trained segmenter in {store.root}; run 'train seg' first")
    return None


def cmd_cohort(args: argparse.Namespace, run: RunConfig, preset: Preset) -> int:
    out = Path(_required(run, "out", "cohort"))
    cohort = generate_cohort(preset.cohort)
    save_cohort(cohort, out)
    print(calibration_summary(cohort).to_string(float_format=lambda v: f"{v:.3f}"))
    return 0


def cmd_train(args: argparse.Namespace, run: RunConfig, preset: Preset) -> int:
    cohort = load_cohort(_required(run, "cohort", "train"))
    out = Path(_required(run, "out", "train"))
    store = ModelStore(out)

    if args.target == "seg":
        result = train_segmenter(cohort, preset.segmenter, preset.train)
        store.save_segmenter(result.segmenter, preset.name)
        result.trace.to_csv(out / "segmentation_trace.csv")
        final = result.trace.final
        print(f"segmentation: test DSC {final.dsc:.4f}, IoU {final.iou:.4f}, pixel accuracy {final.pixel_accuracy:.4f}")
        return 0

    try:
        strategy = AllocationStrategy.parse(run.strategy)
    except ValueError as e:
        raise ConfigError(f"invalid --strategy: {e}") from e
    segmenter = None
    if "cine" in run.modalities:
        source = ModelStore(run.model) if run.model else store
        segmenter = _load_segmenter(source, required=False)
        if segmenter is None:
            logger.info("No trained segmenter found; training one first")
            seg_run = train_segmenter(cohort, preset.segmenter, preset.train)
            segmenter = seg_run.segmenter
            store.save_segmenter(segmenter, preset.name)
            seg_run.trace.to_csv(out / "segmentation_trace.csv")
        elif source is not store:
            store.save_segmenter(segmenter, preset.name)

    result = train_fusion(cohort, preset.train, preset.text, strategy, run.modalities, segmenter)
    store.save_fusion(result.model, result.context, preset.name)
    result.trace.to_csv(out / "fusion_trace.csv")
    selected = result.selected
    print(
        f"fusion [{strategy.label}]: epoch {selected.epoch} weights, "
        f"test loss {selected.test_loss:.4f}, integrated accuracy {selected.acc_integrated:.2f}%"
    )
    return 0


def _load_fusion(run: RunConfig, command: str):
    store = ModelStore(_required(run, "model", command))
    model, context = store.load_fusion()
    segmenter = None
    if "cine" in context.modalities and not context.joint_segmenter:
        segmenter = _load_segmenter(store, required=True)
    return store, model, context, segmenter


def cmd_eval(args: argparse.Namespace, run: RunConfig, preset: Preset) -> int:
    store, model, context, segmenter = _load_fusion(run, "eval")
    cohort = load_cohort(_required(run, "cohort", "eval"))
    batch = batch_for_patients(context, cohort, context.test_ids, segmenter)
    evaluation = evaluate_fusion(model, batch, context.strategy, context.thresholds)

    for head, accuracy in evaluation.accuracy.items():
        print(f"{head:>10s}: {accuracy:6.2f}%")
    print(f"death recall: survivors {evaluation.recall[0]:.2f}%, deaths {evaluation.recall[1]:.2f}%")

    out = Path(run.out) if run.out else store.root
    out.mkdir(parents=True, exist_ok=True)
    path = out / "predictions.jsonl"
    with open(path, "w") as handle:
        for pid, bundle, allocation in zip(batch.patient_ids, evaluation.predictions, evaluation.allocations):
            record = {"patient_id": pid, **bundle.to_dict(), "allocation": dict(zip(("text", "cine", "numeric"), allocation.tolist()))}
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info(f"Predictions written to {path}")
    return 0


def cmd_ablate(args: argparse.Namespace, run: RunConfig, preset: Preset) -> int:
    cohort = load_cohort(_required(run, "cohort", "ablate"))
    out = Path(_required(run, "out", "ablate"))
    segmenter = _load_segmenter(ModelStore(run.model), required=True) if run.model else None
    report = ablate(cohort, preset, run.workers, segmenter, out)
    report.to_json(out / "ablation.json")
    for row in report.rows:
        print(f"{row.label:35s} {row.accuracy:6.2f}%")
    return 0


def cmd_report(args: argparse.Namespace, run: RunConfig, preset: Preset) -> int:
    store, model, context, segmenter = _load_fusion(run, "report")
    cohort = load_cohort(_required(run, "cohort", "report"))
    out = Path(run.out) if run.out else store.root
    out.mkdir(parents=True, exist_ok=True)

    if args.kind == "importance":
        batch = batch_for_patients(context, cohort, context.test_ids, segmenter)
        report = permutation_importance(FusionRun(model, MetricTrace("fusion"), context, batch), repeats=run.repeats)
        report.to_json(out / "importance.json")
        for group, score in report.ranked():
            print(f"{group:22s} {score:.3f}")
        return 0

    if not args.patient:
        raise ConfigError("'report timeline' needs --patient")
    patient = cohort.patient(args.patient)
    history = patient_history(model, context, patient, segmenter)
    predictor = RiskPredictor(model.predictor, context.strategy, context.thresholds)
    points = predictor.risk_timeline(history)
    path = out / f"timeline_{patient.patient_id}.csv"
    pd.DataFrame(timeline_rows(points), columns=["time", "probability", "level"]).to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Risk timeline written to {path}")

    advice = predictor.recommend_follow_up(predictor.predict_bundle(history[-1].features))
    print(predictor.summarize_timeline(points, patient.patient_id))
    print(f"Follow-up in {advice.days} days. {advice.recommendation}")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig, Preset], int]] = {
    "cohort": cmd_cohort,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}

OVERRIDES = ("seed", "preset", "out", "log_level", "workers", "cohort", "model", "n", "cine", "epochs", "strategy", "modalities", "repeats")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging("INFO")
    try:
        run = load_run_config(args.config, {name: getattr(args, name, None) for name in OVERRIDES})
        out = Path(run.out) if run.out else None
        configure_logging(run.log_level, out / "run.log" if out else None)
        preset = apply_overrides(get_preset(run.preset), run)
        logger.info(f"Running '{args.command}' with preset {preset.name}, seed {preset.train.seed}")
        return COMMANDS[args.command](args, run, preset)
    except PRTMError as e:
        logger.error(f"❌ {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"❌ I/O failure: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
