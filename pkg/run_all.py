"""
PatchRec - Pipeline Orchestrator

Runs the complete lab for one experiment file: data generation, ingestion,
training of every plan, evaluation sweeps and the markdown report.
Usage:
    python run_all.py --config experiments/desk_patchrec_i.json
    python run_all.py --config ... --clean           # Remove the experiment directory first
    python run_all.py --config ... --no-pretrain     # The "without patch pre-training" arm
    python run_all.py --config ... --seeds 0 1 2     # Repeat the pipeline per seed, then aggregate
    python run_all.py --config ... --start-from eval # Skip the earlier stages
"""

import argparse
import shutil
import sys
import time
from pathlib import Path

from patchrec.cli import load_experiment, main as cli_main
from patchrec.utils import PatchRecError

# Pipeline stages in order
STAGES = [
    ("Data", "gen-data"),
    ("Ingestion", "ingest"),
    ("Training", "train"),
    ("Evaluation", "eval"),
    ("Report", "report"),
]


def clean_directory(out_dir: Path):
    """Remove the experiment directory to start fresh."""
    print(f"\nCleaning {out_dir}/ ...")
    if out_dir.exists():
        shutil.rmtree(out_dir)
        print(f"  Removed: {out_dir}/")
    else:
        print(f"  Skipped (not found): {out_dir}/")


def run_stage(name: str, command: str, base_args: list) -> bool:
    """Run a single pipeline stage through the CLI entry point."""
    print(f"\n{'=' * 60}")
    print(f"STAGE: {name}")
    print(f"{'=' * 60}")
    code = cli_main([command] + base_args)
    if code != 0:
        print(f"ERROR: Stage {name} failed with exit code {code}")
        return False
    return True


def stages_for(config, start_from: str = None):
    stages = list(STAGES)
    if config.dataset.synthetic is None:
        stages = [s for s in stages if s[1] != "gen-data"]
    if start_from:
        names = [s[0].lower() for s in stages]
        if start_from in names:
            stages = stages[names.index(start_from):]
            print(f"Starting from stage: {stages[0][0]}")
    return stages


def main():
    parser = argparse.ArgumentParser(description="PatchRec Pipeline Orchestrator")
    parser.add_argument("--config", required=True, help="Experiment JSON file")
    parser.add_argument("--out", help="Override the output directory")
    parser.add_argument("--seeds", type=int, nargs="+", help="Run the pipeline once per seed")
    parser.add_argument("--no-pretrain", action="store_true", help="Drop patch pre-training plans")
    parser.add_argument("--clean", action="store_true", help="Remove the experiment directory before running")
    parser.add_argument("--start-from", type=str, help="Start from a specific stage",
                        choices=[s[0].lower() for s in STAGES])
    args = parser.parse_args()

    print("=" * 60)
    print("PatchRec - Full Pipeline Execution")
    print("=" * 60)
    start_time = time.time()

    seeds = args.seeds or [None]
    for seed in seeds:
        out = args.out
        if seed is not None and len(seeds) > 1:
            try:
                base = load_experiment(args.config, out_dir=args.out)
            except PatchRecError as e:
                print(f"ERROR: {e}")
                sys.exit(2)
            out = str(base.out_dir / f"seed_{seed}")
            print(f"\n>>> Seed {seed} -> {out}")

        try:
            config = load_experiment(args.config, seed=seed, out_dir=out, no_pretrain=args.no_pretrain)
        except PatchRecError as e:
            print(f"ERROR: {e}")
            sys.exit(2)
        if args.clean:
            clean_directory(config.out_dir)

        base_args = ["--config", args.config]
        if seed is not None:
            base_args += ["--seed", str(seed)]
        if out:
            base_args += ["--out", out]
        if args.no_pretrain:
            base_args.append("--no-pretrain")

        for name, command in stages_for(config, args.start_from):
            if not run_stage(name, command, base_args):
                print(f"\n{'=' * 60}")
                print(f"PIPELINE FAILED at stage: {name}")
                print(f"{'=' * 60}")
                sys.exit(1)

    if len(seeds) > 1:
        agg_args = ["--config", args.config] + (["--out", args.out] if args.out else [])
        if not run_stage("Aggregation", "aggregate", agg_args):
            sys.exit(1)

    elapsed = time.time() - start_time
    print(f"\n{'=' * 60}")
    print("PIPELINE COMPLETE!")
    print(f"{'=' * 60}")
    print(f"Total time: {elapsed:.1f} seconds ({elapsed / 60:.1f} minutes)")
    print("\nOutputs (per experiment directory):")
    print("  - data/: catalog.tsv, interactions.tsv, provenance.json, stats.json, vocab.tsv")
    print("  - plans/<plan>/final/: checkpoint manifest + blob, run_record.jsonl, summary.json")
    print("  - eval/*.json, eval/*_cases.csv: EvalReports and per-case rows")
    print("  - eval/sweep.csv, eval/equal_token_pairs.csv: performance-efficiency tables")
    print("  - report.md: run summary")
    if len(seeds) > 1:
        print("  - seed_summary.csv, criteria.json, report.md: medians and checks across seeds (base directory)")


if __name__ == "__main__":
    main()
