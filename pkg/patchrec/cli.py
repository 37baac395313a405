"""
PatchRec CLI - Data generation, ingestion, training, evaluation and reports.

Usage:
    python -m patchrec.cli gen-data --config experiments/desk.json
    python -m patchrec.cli ingest   --config experiments/desk.json
    python -m patchrec.cli train    --config experiments/desk.json [--no-pretrain] [--resume] [--only PLAN]
    python -m patchrec.cli eval     --config experiments/desk.json [--no-pretrain]
    python -m patchrec.cli report   --config experiments/desk.json
    python -m patchrec.cli aggregate --config experiments/desk.json   # after run_all.py --seeds

Every command resolves the experiment file with the command-line overrides
(--seed, --out, --no-pretrain) and prints the resolved config first.

Exit codes: 0 success, 2 configuration error, 1 any other failure.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv

try:
    from patchrec.aggregate import aggregate_seeds
    from patchrec.catalog import FilterConfig, SplitDataset, build_split, dataset_stats, ingest
    from patchrec.checkpoint import load_checkpoint
    from patchrec.context import LabContext
    from patchrec.decoder import DEFAULT_WIDTH
    from patchrec.evaluator import EvalSpec, evaluate, write_report
    from patchrec.layout_types import LayoutMode
    from patchrec.report import PAIR_FIELDS, SWEEP_FIELDS, equal_token_pairs, sweep_row, write_markdown, write_rows
    from patchrec.synthetic import CATALOG_FILE, INTERACTIONS_FILE, SyntheticConfig, generate_synthetic, write_synthetic
    from patchrec.trainer import FINAL_DIR, TrainPlan, TrainStage, run_finetune, run_pretrain
    from patchrec.tokenizer import Vocabulary
    from patchrec.utils import (
        ConfigError, LayoutError, PatchRecError, VocabMismatchError, read_json, require_fields, setup_logger, write_json,
    )
except ImportError:
    from aggregate import aggregate_seeds
    from catalog import FilterConfig, SplitDataset, build_split, dataset_stats, ingest
    from checkpoint import load_checkpoint
    from context import LabContext
    from decoder import DEFAULT_WIDTH
    from evaluator import EvalSpec, evaluate, write_report
    from layout_types import LayoutMode
    from report import PAIR_FIELDS, SWEEP_FIELDS, equal_token_pairs, sweep_row, write_markdown, write_rows
    from synthetic import CATALOG_FILE, INTERACTIONS_FILE, SyntheticConfig, generate_synthetic, write_synthetic
    from trainer import FINAL_DIR, TrainPlan, TrainStage, run_finetune, run_pretrain
    from tokenizer import Vocabulary
    from utils import (
        ConfigError, LayoutError, PatchRecError, VocabMismatchError, read_json, require_fields, setup_logger, write_json,
    )

logger = setup_logger(__name__)

DEFAULT_OUT_DIR = "runs"
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
MODEL_KEYS = {"d", "n_layers", "n_heads", "max_positions", "mlp_ratio", "init_std", "ln_eps"}
VOCAB_FILE = "vocab.tsv"


# ============================================================================
# Experiment config
# ============================================================================

@dataclass
class DatasetBlock:
    """Either synthetic generator params or the two TSV paths."""
    synthetic: Optional[SyntheticConfig] = None
    catalog: Optional[str] = None
    interactions: Optional[str] = None
    filter: FilterConfig = field(default_factory=FilterConfig)

    def to_dict(self) -> dict:
        data = {"filter": self.filter.to_dict()}
        if self.synthetic is not None:
            data["synthetic"] = self.synthetic.to_dict()
        else:
            data["catalog"] = self.catalog
            data["interactions"] = self.interactions
        return data

    @classmethod
    def from_dict(cls, data: dict, seed: int) -> "DatasetBlock":
        filter_config = FilterConfig.from_dict(data.get("filter", {}))
        if "synthetic" in data:
            synthetic = dict(data["synthetic"])
            synthetic.setdefault("seed", seed)
            return cls(synthetic=SyntheticConfig.from_dict(synthetic), filter=filter_config)
        require_fields(data, ["catalog", "interactions"], "dataset")
        return cls(catalog=data["catalog"], interactions=data["interactions"], filter=filter_config)


@dataclass
class EvalEntry:
    """One evaluation block: a trained plan swept over K (and M or L)."""
    name: str
    plan: str
    mode: LayoutMode
    k_list: List[int] = field(default_factory=lambda: [40])
    m_list: List[int] = field(default_factory=lambda: [5])
    l_list: List[int] = field(default_factory=lambda: [5])
    width: int = DEFAULT_WIDTH
    split: str = "test"
    cohorts: List[int] = field(default_factory=list)
    length_normalize: bool = True
    patch_separators: bool = True
    max_cases: Optional[int] = None
    workers: int = 1

    def specs(self) -> List[EvalSpec]:
        m_values = self.m_list if self.mode == LayoutMode.PFT_I else [self.m_list[0]]
        l_values = self.l_list if self.mode in (LayoutMode.PFT_S, LayoutMode.PURE_SESSION) else [self.l_list[0]]
        out = []
        for k in self.k_list:
            for m in m_values:
                for l in l_values:
                    out.append(EvalSpec(
                        mode=self.mode, k=k, m=min(m, k), l=l, width=self.width, split=self.split,
                        cohorts=list(self.cohorts), length_normalize=self.length_normalize,
                        patch_separators=self.patch_separators, max_cases=self.max_cases,
                        workers=self.workers,
                    ).validate())
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name, "plan": self.plan, "mode": self.mode.value,
            "k_list": self.k_list, "m_list": self.m_list, "l_list": self.l_list,
            "width": self.width, "split": self.split, "cohorts": self.cohorts,
            "length_normalize": self.length_normalize, "patch_separators": self.patch_separators,
            "max_cases": self.max_cases, "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalEntry":
        require_fields(data, ["name", "plan", "mode"], "eval entry")
        data = dict(data)
        data["mode"] = LayoutMode(data["mode"])
        return cls(**data)


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    out_dir: Path
    dataset: DatasetBlock
    model: Dict[str, object]
    plans: List[TrainPlan]
    init_from: Dict[str, str] = field(default_factory=dict)
    eval: List[EvalEntry] = field(default_factory=list)
    no_pretrain: bool = False

    @property
    def data_dir(self) -> Path:
        return self.out_dir / "data"

    def plan_dir(self, plan_name: str) -> Path:
        return self.out_dir / "plans" / plan_name

    def plan(self, name: str) -> TrainPlan:
        for plan in self.plans:
            if plan.name == name:
                return plan
        raise ConfigError(f"experiment '{self.name}' has no plan named '{name}'")

    def validate(self) -> "ExperimentConfig":
        unknown = set(self.model) - MODEL_KEYS
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        seen = set()
        for plan in self.plans:
            if plan.name in seen:
                raise ConfigError(f"duplicate plan name '{plan.name}'")
            parent = self.init_from.get(plan.name)
            if parent is not None and parent not in seen:
                raise ConfigError(
                    f"plan '{plan.name}' initializes from '{parent}', which is not an earlier plan"
                )
            seen.add(plan.name)
        for entry in self.eval:
            if entry.plan not in seen:
                raise ConfigError(f"eval entry '{entry.name}' references unknown plan '{entry.plan}'")
            entry.specs()
        return self

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "out_dir": str(self.out_dir),
            "no_pretrain": self.no_pretrain,
            "dataset": self.dataset.to_dict(),
            "model": dict(self.model),
            "plans": [dict(p.to_dict(), init_from=self.init_from.get(p.name)) for p in self.plans],
            "eval": [e.to_dict() for e in self.eval],
        }

    @classmethod
    def from_dict(cls, data: dict, seed: Optional[int] = None, out_dir: Optional[str] = None,
                  no_pretrain: bool = False) -> "ExperimentConfig":
        require_fields(data, ["name", "dataset", "plans"], "experiment")
        seed = int(data.get("seed", 0) if seed is None else seed)
        out = Path(out_dir or data.get("out_dir") or os.getenv("PATCHREC_OUT_DIR", DEFAULT_OUT_DIR))
        if no_pretrain:
            out = out.parent / f"{out.name}_no_pretrain"

        plans: List[TrainPlan] = []
        init_from: Dict[str, str] = {}
        dropped = set()
        for raw in data["plans"]:
            raw = dict(raw)
            require_fields(raw, ["name", "stage"], "plan")
            parent = raw.pop("init_from", None)
            if no_pretrain and raw["stage"] == TrainStage.PRETRAIN_PATCH.value:
                dropped.add(raw["name"])
                continue
            raw.setdefault("seed", seed)
            plan = TrainPlan.from_dict(raw)
            if parent is not None and parent not in dropped:
                init_from[plan.name] = parent
            plans.append(plan)

        entries = [EvalEntry.from_dict(e) for e in data.get("eval", [])]
        entries = [e for e in entries if e.plan not in dropped]
        return cls(
            name=data["name"] + ("_no_pretrain" if no_pretrain else ""),
            seed=seed,
            out_dir=out,
            dataset=DatasetBlock.from_dict(data["dataset"], seed),
            model=dict(data.get("model", {})),
            plans=plans,
            init_from=init_from,
            eval=entries,
            no_pretrain=no_pretrain,
        ).validate()


def load_experiment(path: Path, seed: Optional[int] = None, out_dir: Optional[str] = None,
                    no_pretrain: bool = False) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"experiment file not found: {path}")
    try:
        data = read_json(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    try:
        return ExperimentConfig.from_dict(data, seed=seed, out_dir=out_dir, no_pretrain=no_pretrain)
    except (TypeError, ValueError, KeyError, LayoutError) as e:
        raise ConfigError(f"{path}: {e}") from e


# ============================================================================
# Shared steps
# ============================================================================

def banner(title: str) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)


def print_resolved(config: ExperimentConfig) -> None:
    banner(f"Resolved experiment: {config.name}")
    print(json.dumps(config.to_dict(), indent=2, sort_keys=True))


def dataset_paths(config: ExperimentConfig):
    if config.dataset.synthetic is not None:
        return config.data_dir / CATALOG_FILE, config.data_dir / INTERACTIONS_FILE
    return Path(config.dataset.catalog), Path(config.dataset.interactions)


def load_dataset(config: ExperimentConfig) -> SplitDataset:
    catalog_path, interactions_path = dataset_paths(config)
    if config.dataset.synthetic is not None and not catalog_path.exists():
        logger.info(f"No generated data in {config.data_dir}; generating it now")
        cmd_gen_data(config)
    return ingest(catalog_path, interactions_path, config.dataset.filter)


def write_stats(config: ExperimentConfig, dataset: SplitDataset, context: LabContext) -> Path:
    counts = {item_id: len(tokens) for item_id, tokens in context.title_tokens.items()}
    stats = dataset_stats(dataset, counts)
    stats["vocabulary"] = len(context.vocab)
    return write_json(config.data_dir / "stats.json", stats)


def check_dumped_vocab(config: ExperimentConfig, context: LabContext) -> None:
    """
    Compare the vocabulary written by ingest with the one rebuilt from the data.

    Raises:
        VocabMismatchError: If the data changed since ingest.
    """
    path = config.data_dir / VOCAB_FILE
    if not path.exists():
        logger.warning(f"No {VOCAB_FILE} in {config.data_dir}; skipping the vocabulary check")
        return
    dumped = Vocabulary.load(path)
    if dumped.fingerprint() != context.vocab.fingerprint():
        raise VocabMismatchError(
            f"{path} (size {len(dumped)}, fingerprint {dumped.fingerprint()[:12]}) does not match the vocabulary "
            f"rebuilt from the data (size {len(context.vocab)}, fingerprint {context.vocab.fingerprint()[:12]}); "
            f"rerun ingest"
        )


# ============================================================================
# Commands
# ============================================================================

def cmd_gen_data(config: ExperimentConfig) -> Dict[str, Path]:
    """Generate the synthetic catalog + interactions and their stats."""
    if config.dataset.synthetic is None:
        raise ConfigError("gen-data needs a 'synthetic' dataset block")
    data = generate_synthetic(config.dataset.synthetic)
    paths = write_synthetic(data, config.dataset.synthetic, config.data_dir)
    dataset = build_split({i.item_id: i for i in data.catalog}, data.interactions, config.dataset.filter)
    context = LabContext.from_dataset(dataset)
    paths["stats"] = write_stats(config, dataset, context)
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return paths


def cmd_ingest(config: ExperimentConfig) -> dict:
    """Load, filter and split the dataset; write stats and the vocabulary."""
    dataset = load_dataset(config)
    context = LabContext.from_dataset(dataset)
    write_stats(config, dataset, context)
    context.vocab.dump(config.data_dir / VOCAB_FILE)
    stats = read_json(config.data_dir / "stats.json")
    for key, value in stats.items():
        print(f"  {key}: {value}")
    return stats


def check_plan_dependencies(config: ExperimentConfig, selected: List[TrainPlan]) -> None:
    """
    Every init_from must be trained in this invocation or already on disk.

    Raises:
        ConfigError: Before any training starts.
    """
    running = set()
    for plan in selected:
        parent = config.init_from.get(plan.name)
        if parent is not None and parent not in running:
            if not (config.plan_dir(parent) / FINAL_DIR).exists():
                raise ConfigError(
                    f"plan '{plan.name}' needs the checkpoint of '{parent}', which is neither trained "
                    f"in this run nor present at {config.plan_dir(parent) / FINAL_DIR}"
                )
        if plan.init_checkpoint and not Path(plan.init_checkpoint).exists():
            raise ConfigError(f"plan '{plan.name}': init_checkpoint {plan.init_checkpoint} does not exist")
        running.add(plan.name)


def cmd_train(config: ExperimentConfig, only: Optional[List[str]] = None, resume: bool = False) -> Dict[str, dict]:
    """Run the plans in order; returns each plan's run summary."""
    selected = [p for p in config.plans if not only or p.name in only]
    if only:
        missing = set(only) - {p.name for p in selected}
        if missing:
            raise ConfigError(f"--only names unknown plans: {sorted(missing)}")
    check_plan_dependencies(config, selected)

    dataset = load_dataset(config)
    context = LabContext.from_dataset(dataset)
    model_config = context.model_config(**config.model)
    logger.info(f"Model: {json.dumps(model_config.to_dict())}")

    summaries = {}
    for plan in selected:
        banner(f"PLAN: {plan.name} ({plan.stage.value})")
        parent = config.init_from.get(plan.name)
        if parent is not None:
            plan.init_checkpoint = str(config.plan_dir(parent) / FINAL_DIR)
        runner = run_pretrain if plan.stage == TrainStage.PRETRAIN_PATCH else run_finetune
        _, record = runner(plan, context, model_config=model_config,
                           out_dir=config.plan_dir(plan.name), resume=resume)
        summary = record.summary()
        write_json(config.plan_dir(plan.name) / "summary.json", summary)
        summaries[plan.name] = summary
        print(f"  final loss {summary['final_loss']:.4f} after {summary['steps']} steps -> {record.checkpoint_path}")
    return summaries


def cmd_eval(config: ExperimentConfig) -> List[dict]:
    """Evaluate every eval entry over its sweep grid; write reports, sweep.csv and the pairs."""
    for entry in config.eval:
        if not (config.plan_dir(entry.plan) / FINAL_DIR).exists():
            raise ConfigError(f"eval entry '{entry.name}': no checkpoint for plan '{entry.plan}' (run train first)")

    dataset = load_dataset(config)
    context = LabContext.from_dataset(dataset)
    check_dumped_vocab(config, context)
    eval_dir = config.out_dir / "eval"
    rows = []
    for entry in config.eval:
        state = load_checkpoint(config.plan_dir(entry.plan) / FINAL_DIR).state
        for spec in entry.specs():
            banner(f"EVAL: {entry.name} mode={spec.mode.value} K={spec.k} M={spec.m} L={spec.l}")
            report = evaluate(state, context, spec)
            name = f"{entry.name}_{spec.mode.value}_k{spec.k}_m{spec.m}_l{spec.l}"
            write_report(report, eval_dir, name)
            rows.append(sweep_row(entry.name, entry.plan, report))
            print(f"  HR@20={report.metrics['hr@20']:.4f} NDCG@20={report.metrics['ndcg@20']:.4f} CR={report.cr:.3f}")

    write_rows(eval_dir / "sweep.csv", SWEEP_FIELDS, rows)
    write_rows(eval_dir / "equal_token_pairs.csv", PAIR_FIELDS, equal_token_pairs(rows))
    return rows


def cmd_report(config: ExperimentConfig) -> Path:
    path = write_markdown(config.out_dir, config.name)
    print(f"  report: {path}")
    return path


def cmd_aggregate(config: ExperimentConfig) -> dict:
    """Medians and checks over the seed_<n> runs under the experiment directory."""
    if config.no_pretrain:
        raise ConfigError("aggregate reads both arms from the base directory; run it without --no-pretrain")
    result = aggregate_seeds(config.out_dir)
    write_markdown(config.out_dir, config.name)
    print(f"  seeds: {result.seeds}")
    for criterion in result.criteria:
        print(f"  {criterion.verdict:4s} {criterion.name}: {criterion.detail}")
    for name, path in result.paths.items():
        print(f"  {name}: {path}")
    return {c.name: c.passed for c in result.criteria}


COMMANDS = {
    "gen-data": lambda cfg, args: cmd_gen_data(cfg),
    "ingest": lambda cfg, args: cmd_ingest(cfg),
    "train": lambda cfg, args: cmd_train(cfg, only=args.only, resume=args.resume),
    "eval": lambda cfg, args: cmd_eval(cfg),
    "report": lambda cfg, args: cmd_report(cfg),
    "aggregate": lambda cfg, args: cmd_aggregate(cfg),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchrec", description="PatchRec desk-scale lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="Experiment JSON file")
        cmd.add_argument("--seed", type=int, help="Override the experiment seed")
        cmd.add_argument("--out", help="Override the output directory")
        cmd.add_argument("--no-pretrain", action="store_true", help="Drop patch pre-training plans")
        if name == "train":
            cmd.add_argument("--resume", action="store_true", help="Continue plans from their latest checkpoint")
            cmd.add_argument("--only", nargs="+", help="Run only these plans")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    start = time.time()
    try:
        config = load_experiment(args.config, seed=args.seed, out_dir=args.out, no_pretrain=args.no_pretrain)
        print_resolved(config)
        config.out_dir.mkdir(parents=True, exist_ok=True)
        write_json(config.out_dir / "resolved_config.json", config.to_dict())
        banner(f"COMMAND: {args.command}")
        COMMANDS[args.command](config, args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except PatchRecError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    print(f"\n{args.command} finished in {time.time() - start:.1f}s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
