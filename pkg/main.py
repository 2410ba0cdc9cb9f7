#!/usr/bin/env python3
"""
ConvNova command line

Subcommands: pretrain, finetune, eval, bench, rf, synth and rerun. Every
command that writes files also writes ``<out>.manifest.json`` so the run can
be replayed with ``convnova rerun``.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from src.benchmark import bench_throughput, write_bench_csv
from src.checkpoint import RunManifest, load_checkpoint, save_checkpoint
from src.convnova_model import MLM_CLASSES, ConvNova
from src.errors import ConfigError, ConvNovaError
from src.genome_data import (
    FastaRecord,
    LabeledSet,
    NucSeq,
    load_tsv,
    read_fasta,
    synth_from_manifest,
    write_fasta,
    write_tsv,
)
from src.metrics import combine_reports
from src.receptive_field import plan_dilation_for_fraction, receptive_field_analytic, receptive_field_empirical
from src.settings import configure_logging
from src.trainer import TASK_HEADS, evaluate, finetune, pretrain_mlm
from src.utils.config_parser import ConfigParser, RunConfig

logger = logging.getLogger("convnova")


def _out_path(run: RunConfig, default: str) -> str:
    return run.command.get("out") or default


def _start_manifest(command: str, argv: List[str], run: RunConfig) -> RunManifest:
    return RunManifest(command=command, argv=list(argv), config=run.to_dict(), seed=run.command["seed"])


def _finish_manifest(manifest: RunManifest, out: str, outputs: List[str]) -> str:
    for path in outputs:
        manifest.add_output(path)
    manifest.finish()
    path = f"{out}.manifest.json"
    manifest.save(path)
    return path


def load_dataset(path: Optional[str], task: str) -> LabeledSet:
    """Load a TSV dataset, or regenerate a synthetic one from its ``.json`` manifest."""
    if not path:
        raise ConfigError("No dataset given; pass --data or set 'data' in the config")
    if path.endswith(".json"):
        if not os.path.exists(path):
            raise FileNotFoundError(f"Synthetic manifest not found: {path}")
        with open(path, "r", encoding="utf-8") as handle:
            dataset = synth_from_manifest(json.load(handle))
        if not isinstance(dataset, LabeledSet):
            raise ConfigError(f"{path} describes a corpus, not a labeled dataset")
        return dataset
    return load_tsv(path, task=task)


def _target_config(run: RunConfig, dataset: LabeledSet):
    n_classes = run.model.n_classes if "model.n_classes" in run.explicit else dataset.n_classes
    return run.model.with_head(TASK_HEADS[dataset.task], n_classes)


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------


def cmd_pretrain(run: RunConfig, argv: List[str], checkpoint: Optional[str] = None) -> None:
    """Pretrain with masked language modeling; writes checkpoint, loss CSV and manifest."""
    corpus_path = run.command.get("corpus") or run.command.get("data")
    if not corpus_path:
        raise ConfigError("pretrain needs a FASTA corpus; pass --data or set 'corpus' in the config")
    manifest = _start_manifest("pretrain", argv, run)
    manifest.add_input(corpus_path)

    config = run.model
    if "model.n_classes" not in run.explicit:
        config = config.with_head("mlm", MLM_CLASSES)
    print(f"Loading corpus: {corpus_path}")
    records = read_fasta(corpus_path)
    model = ConvNova(config, seed=run.command["seed"])
    print(f"Model: {model.param_count():,} parameters, dilations {model.get_model_info()['dilations']}")

    result = pretrain_mlm(model, records, run.train)
    out = _out_path(run, ConfigParser().generate_output_name(config, "pretrain"))
    save_checkpoint(model.params, model.config, out)
    loss_path = f"{out}.loss.csv"
    with open(loss_path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("epoch,mean_masked_loss\n")
        for epoch, loss in enumerate(result.epoch_losses):
            handle.write(f"{epoch},{loss!r}\n")
    manifest_path = _finish_manifest(manifest, out, [out, loss_path])

    print(f"\nPretraining finished: {result.steps} steps, {result.skipped_batches} skipped batches")
    for epoch, loss in enumerate(result.epoch_losses):
        print(f"Epoch {epoch}: masked loss {loss:.4f}")
    print(f"Checkpoint: {out}")
    print(f"Loss log: {loss_path}")
    print(f"Manifest: {manifest_path}")


def cmd_finetune(run: RunConfig, argv: List[str], checkpoint: Optional[str] = None) -> None:
    """Fine-tune from scratch or from a checkpoint; writes checkpoint, metrics and manifest."""
    data_path = run.command.get("data")
    manifest = _start_manifest("finetune", argv, run)
    dataset = load_dataset(data_path, run.command["task"])
    manifest.add_input(data_path)
    target = _target_config(run, dataset)
    metrics = run.command["metrics"]
    seed = run.command["seed"]

    if checkpoint:
        manifest.add_input(checkpoint)
        params, saved_config = load_checkpoint(checkpoint)
        base = ConvNova(saved_config, params)
        model = base.with_head(target.head, target.n_classes, seed=seed)
        print(f"Warm start from {checkpoint} ({base.param_count():,} parameters)")
    else:
        model = ConvNova(target, seed=seed)

    result = finetune(model, dataset, run.train, metrics=metrics)
    reports = {"warm" if checkpoint else "model": result.report}
    if checkpoint and run.command["compare_scratch"]:
        scratch = ConvNova(model.config, seed=seed)
        reports["scratch"] = finetune(scratch, dataset, run.train, metrics=metrics).report

    out = _out_path(run, ConfigParser().generate_output_name(model.config, "finetune"))
    save_checkpoint(model.params, model.config, out)
    metrics_path = f"{out}.metrics.txt"
    text = combine_reports(reports) if len(reports) > 1 else result.report.to_text()
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    manifest_path = _finish_manifest(manifest, out, [out, metrics_path])

    print(f"\nFine-tuning finished: best epoch {result.best_epoch}")
    print(text, end="")
    print(f"Checkpoint: {out}")
    print(f"Metrics: {metrics_path}")
    print(f"Manifest: {manifest_path}")


def cmd_eval(run: RunConfig, argv: List[str], checkpoint: Optional[str] = None) -> None:
    """Evaluate a checkpoint on a dataset; writes the metric report."""
    if not checkpoint:
        raise ConfigError("eval needs --checkpoint")
    manifest = _start_manifest("eval", argv, run)
    params, config = load_checkpoint(checkpoint)
    dataset = load_dataset(run.command.get("data"), run.command["task"])
    manifest.add_input(checkpoint)
    manifest.add_input(run.command["data"])

    report = evaluate(ConvNova(config, params), dataset, run.command["metrics"])
    out = _out_path(run, f"{checkpoint}.eval.txt")
    with open(out, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(report.to_text())
    _finish_manifest(manifest, out, [out])
    print(report.to_text(), end="")
    print(f"Report: {out}")


def cmd_bench(run: RunConfig, argv: List[str], checkpoint: Optional[str] = None) -> None:
    """Time the forward pass over the configured lengths; writes a CSV."""
    parser = ConfigParser()
    lengths = run.command["lengths"]
    if not parser.validate_lengths(lengths):
        raise ConfigError(f"lengths must be positive and strictly ascending, got {lengths}")
    manifest = _start_manifest("bench", argv, run)
    rows = bench_throughput(run.model, lengths, run.command["repeats"], seed=run.command["seed"],
                            progress=run.train.progress)
    out = _out_path(run, "bench.csv")
    write_bench_csv(rows, out)
    _finish_manifest(manifest, out, [])

    print(f"{'length':>10}  {'median s':>12}  status")
    for row in rows:
        median = f"{row.median_seconds:.6f}" if row.median_seconds is not None else "-"
        print(f"{row.sequence_length:>10}  {median:>12}  {row.status}")
    print(f"CSV: {out}")


def cmd_rf(run: RunConfig, argv: List[str], checkpoint: Optional[str] = None) -> None:
    """Report analytic and empirical receptive fields and the dilation plan (of a checkpoint if given)."""
    config, params = run.model, None
    if checkpoint:
        params, config = load_checkpoint(checkpoint)
        print(f"Receptive field of {checkpoint} (trained parameters)")
    length, fraction = run.command["rf_length"], run.command["fraction"]
    if not ConfigParser().validate_fraction(fraction):
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")

    if config.variant == "unet_downsample":
        print("Analytic receptive field is unsupported for the unet_downsample variant")
    else:
        analytic = receptive_field_analytic(config)
        probe = config if params is not None or config.hidden_dim >= 2 else replace(config, hidden_dim=2)
        empirical = receptive_field_empirical(params, probe, analytic + 2, seed=run.command["seed"])
        print(f"Analytic receptive field: {analytic}")
        print(f"Empirical receptive field: {empirical}")
        print(f"Verdict: {'PASS' if empirical == analytic else 'FAIL'}")

    plan = plan_dilation_for_fraction(length, fraction, config.kernel_size, config.n_gcb,
                                      config.stage_size, config.stem_kernel_size)
    print(f"Planned dilation base for {fraction:.0%} of {length}: {plan.base} "
          f"(receptive field {plan.receptive_field} <= {plan.target:g})"
          + (" [infeasible: base 1 already exceeds the target]" if plan.infeasible else ""))


def cmd_synth(run: RunConfig, argv: List[str], checkpoint: Optional[str] = None) -> None:
    """Generate a synthetic dataset (TSV) or corpus (FASTA) plus its manifest."""
    if "generator" not in run.synth:
        raise ConfigError("synth needs a generator; pass --generator or set 'synth.generator'")
    recipe: Dict[str, Any] = dict(run.synth)
    recipe["seed"] = run.command["seed"]
    generated = synth_from_manifest(recipe)
    if isinstance(generated, NucSeq):
        out = _out_path(run, "corpus.fa")
        write_fasta([FastaRecord("synthetic_corpus", generated)], out)
        summary = f"{len(generated)} bases"
    else:
        out = _out_path(run, f"{recipe['generator']}.tsv")
        write_tsv(generated, out)
        recipe = generated.manifest
        counts = generated.class_counts().tolist()
        summary = f"{len(generated)} examples, class counts {counts}"

    dataset_manifest = f"{out}.json"
    with open(dataset_manifest, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(json.dumps(recipe, indent=2, sort_keys=True) + "\n")
    manifest = _start_manifest("synth", argv, run)
    _finish_manifest(manifest, out, [out, dataset_manifest])
    print(f"Generated {recipe['generator']}: {summary}")
    print(f"Data: {out}")
    print(f"Dataset manifest: {dataset_manifest}")


COMMANDS: Dict[str, Callable[..., None]] = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "rf": cmd_rf,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convnova",
        description="ConvNova: gated dilated convolutions for DNA sequences",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  convnova synth --generator motif --out motif.tsv --seed 1
  convnova finetune --data motif.tsv --config tiny.cfg --out motif.cnvn
  convnova eval --checkpoint motif.cnvn --data motif.tsv --metrics mcc,top1
  convnova rf --config base.cfg
  convnova bench --lengths 4096,8192,16384 --repeats 5
  convnova rerun motif.cnvn.manifest.json
        """
    )
    parser.add_argument('-v', '--verbose', action='count', default=0, help='Debug logging')
    subparsers = parser.add_subparsers(dest='command', required=True)

    for name, handler in COMMANDS.items():
        sub = subparsers.add_parser(name, help=handler.__doc__)
        sub.add_argument('--config', help='Config file (key = value lines)')
        sub.add_argument('--checkpoint', help='Checkpoint to warm-start from, evaluate or measure')
        sub.add_argument('--data', help='FASTA corpus, TSV dataset or synthetic .json manifest')
        sub.add_argument('--out', help='Output path')
        sub.add_argument('--seed', type=int, help='Random seed')
        sub.add_argument('--lengths', help='Comma-separated benchmark lengths')
        sub.add_argument('--repeats', type=int, help='Timed runs per length (>= 5)')
        sub.add_argument('--metrics', help='Comma-separated metrics (mcc,f1,top1,auroc)')
        if name == "synth":
            sub.add_argument('--generator', choices=['motif', 'longrange', 'corpus'], help='Synthetic generator')
        sub.set_defaults(handler=handler)

    rerun = subparsers.add_parser('rerun', help='Re-execute the command recorded in a run manifest')
    rerun.add_argument('manifest', help='Path to <out>.manifest.json')
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {
        "seed": args.seed,
        "data": args.data,
        "out": args.out,
        "lengths": args.lengths,
        "repeats": args.repeats,
        "metrics": args.metrics,
    }
    if getattr(args, "generator", None):
        overrides["synth.generator"] = args.generator
    return overrides


def run_command(argv: List[str]) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    if args.command == "rerun":
        manifest = RunManifest.load(args.manifest)
        changed = manifest.changed_inputs()
        if changed:
            logger.warning("Inputs changed since the recorded run: %s", ", ".join(changed))
        print(f"Re-running: convnova {' '.join(manifest.argv)}")
        run_command(manifest.argv)
        return

    run = ConfigParser().load(args.config, _overrides(args))
    args.handler(run, argv, checkpoint=args.checkpoint)


def main(argv: Optional[List[str]] = None) -> None:
    """Main function for command-line interface."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        run_command(argv)
    except ConvNovaError as e:
        print(f"Error: {e.code}: {' '.join(str(e).split())}", file=sys.stderr)
        sys.exit(1)
    except OSError as e:
        print(f"Error: io: {' '.join(str(e).split())}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
