"""
Evaluator - Run constrained decoding over a split and aggregate the results.

For every interaction of the split (the target) the user's truncated history
before it is laid out in the requested mode, decoded with beam search and
ranked. The report carries HR@K / NDCG@K, compression accounting and optional
long-history cohorts.

Compression ratio:
    headline  sum(uncompressed history tokens) / sum(compressed history positions)
    secondary mean over cases of the per-case ratio
"""

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from tqdm import tqdm

try:
    from patchrec.catalog import frequency_predictor
    from patchrec.context import LabContext
    from patchrec.decoder import DEFAULT_WIDTH, beam_search
    from patchrec.layout_types import LayoutConfig, LayoutMode
    from patchrec.metrics import metrics_from_ranks
    from patchrec.model import ModelState
    from patchrec.patches import history_units
    from patchrec.utils import ConfigError, DataError, EmptyHistoryError, setup_logger, write_json
except ImportError:
    from catalog import frequency_predictor
    from context import LabContext
    from decoder import DEFAULT_WIDTH, beam_search
    from layout_types import LayoutConfig, LayoutMode
    from metrics import metrics_from_ranks
    from model import ModelState
    from patches import history_units
    from utils import ConfigError, DataError, EmptyHistoryError, setup_logger, write_json

logger = setup_logger(__name__)

METRIC_KS = (10, 20)
CASE_FIELDS = [
    "case_id", "user_id", "target_item", "rank", "positions",
    "history_items", "full_history", "history_tokens", "history_positions", "cr",
]


@dataclass
class EvalSpec:
    """One evaluation point: layout mode, truncation, width and split."""
    mode: LayoutMode = LayoutMode.TEXT
    k: int = 40
    m: int = 5
    l: int = 5
    width: int = DEFAULT_WIDTH
    split: str = "test"
    cohorts: List[int] = field(default_factory=list)
    length_normalize: bool = True
    patch_separators: bool = True
    max_cases: Optional[int] = None
    workers: int = 1

    def layout_config(self) -> LayoutConfig:
        return LayoutConfig(k=self.k, m=self.m, l=self.l, mode=self.mode,
                            patch_separators=self.patch_separators).validate()

    def validate(self) -> "EvalSpec":
        self.layout_config()
        if self.width < 1:
            raise ConfigError(f"beam width must be >= 1, got {self.width}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["mode"] = self.mode.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "EvalSpec":
        data = dict(data)
        if "mode" in data:
            data["mode"] = LayoutMode(data["mode"])
        return cls(**data).validate()


@dataclass
class CaseResult:
    case_id: int
    user_id: int
    target_item: int
    rank: int  # 1-based, 0 when the target is not in the ranked list
    positions: int
    history_items: int
    full_history: int
    history_tokens: int
    history_positions: int
    cr: float


@dataclass
class EvalReport:
    spec: dict
    num_cases: int
    skipped_cases: int
    metrics: Dict[str, float]
    cr: float
    cr_mean_of_ratios: float
    tokens: Dict[str, int]
    cohorts: Dict[str, dict] = field(default_factory=dict)
    random_baseline: Dict[str, float] = field(default_factory=dict)
    frequency_baseline: Dict[str, float] = field(default_factory=dict)
    cases: List[CaseResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec,
            "num_cases": self.num_cases,
            "skipped_cases": self.skipped_cases,
            "metrics": self.metrics,
            "cr": self.cr,
            "cr_mean_of_ratios": self.cr_mean_of_ratios,
            "tokens": self.tokens,
            "cohorts": self.cohorts,
            "random_baseline": self.random_baseline,
            "frequency_baseline": self.frequency_baseline,
        }


@dataclass
class _Case:
    case_id: int
    user_id: int
    target_item: int
    history: List[int]
    full_history: int


def collect_cases(context: LabContext, split: str, k: int, max_cases: Optional[int] = None):
    """Cases of a split in split order; interactions without earlier history are skipped."""
    cases: List[_Case] = []
    skipped = 0
    for case_id, row in enumerate(context.dataset.split(split)):
        if max_cases is not None and len(cases) >= max_cases:
            break
        try:
            history = context.dataset.truncate_history(row.user_id, row.timestamp, k)
        except EmptyHistoryError:
            skipped += 1
            continue
        full = context.dataset.prior_count(row.user_id, row.timestamp)
        cases.append(_Case(case_id, row.user_id, row.item_id, history, full))
    return cases, skipped


def _run_case(state: ModelState, context: LabContext, spec: EvalSpec, config: LayoutConfig, case: _Case) -> CaseResult:
    layout = context.builder.build(case.history, config)
    text = context.builder.layout_text(case.history, config)
    ranked = beam_search(state, layout, spec.width, context.trie, context.title_tokens, spec.length_normalize)
    tokens, positions = history_units(text), history_units(layout)
    return CaseResult(
        case_id=case.case_id,
        user_id=case.user_id,
        target_item=case.target_item,
        rank=ranked.rank_of(case.target_item) or 0,
        positions=layout.positions,
        history_items=len(case.history),
        full_history=case.full_history,
        history_tokens=tokens,
        history_positions=positions,
        cr=tokens / positions,
    )


def _summarize(results: Sequence[CaseResult]) -> dict:
    ranks = [r.rank for r in results]
    return {"cases": len(results), **metrics_from_ranks(ranks, METRIC_KS)}


def evaluate(state: ModelState, context: LabContext, spec: EvalSpec, show_progress: bool = True) -> EvalReport:
    """
    Evaluate one model state on one split under one layout.

    Raises:
        VocabMismatchError: If the state and catalog vocabularies differ.
        DataError: If the split yields no case.
    """
    spec.validate()
    context.check_compatible(state)
    config = spec.layout_config()
    cases, skipped = collect_cases(context, spec.split, spec.k, spec.max_cases)
    if not cases:
        raise DataError(f"split '{spec.split}' has no case with a non-empty history")

    start = time.time()
    snapshot = state.snapshot()
    desc = f"Eval {spec.mode.value} K={spec.k}"
    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            results = list(tqdm(
                pool.map(lambda c: _run_case(snapshot, context, spec, config, c), cases),
                total=len(cases), desc=desc, disable=not show_progress,
            ))
    else:
        results = [
            _run_case(snapshot, context, spec, config, c)
            for c in tqdm(cases, desc=desc, disable=not show_progress)
        ]

    total_tokens = sum(r.history_tokens for r in results)
    total_positions = sum(r.history_positions for r in results)
    width = min(spec.width, context.trie.num_titles)
    report = EvalReport(
        spec=spec.to_dict(),
        num_cases=len(results),
        skipped_cases=skipped,
        metrics=metrics_from_ranks([r.rank for r in results], METRIC_KS),
        cr=total_tokens / total_positions,
        cr_mean_of_ratios=sum(r.cr for r in results) / len(results),
        tokens={
            "history_tokens": total_tokens,
            "history_positions": total_positions,
            "prompt_positions": sum(r.positions for r in results),
        },
        random_baseline={f"hr@{k}": min(k, width) / context.num_items for k in METRIC_KS},
        frequency_baseline=metrics_from_ranks(
            [_frequency_rank(c, width) for c in cases], METRIC_KS
        ),
        cases=results,
    )
    for threshold in spec.cohorts:
        members = [r for r in results if r.full_history >= threshold]
        report.cohorts[str(threshold)] = _summarize(members)

    logger.info(
        f"{desc}: {len(results)} cases, HR@10={report.metrics['hr@10']:.4f} "
        f"HR@20={report.metrics['hr@20']:.4f} CR={report.cr:.3f} ({time.time() - start:.1f}s)"
    )
    return report


def _frequency_rank(case: _Case, width: int) -> int:
    ranked = frequency_predictor(case.history, width)
    return ranked.index(case.target_item) + 1 if case.target_item in ranked else 0


def validation_hit_ratio(state: ModelState, context: LabContext, config: LayoutConfig,
                         cases: int, width: int = 10) -> float:
    """HR@10 on the first `cases` validation cases; checked periodically during training."""
    spec = EvalSpec(mode=config.mode, k=config.k, m=config.m, l=config.l, width=width,
                    split="validation", patch_separators=config.patch_separators, max_cases=cases)
    return evaluate(state, context, spec, show_progress=False).metrics["hr@10"]


def write_report(report: EvalReport, out_dir: Path, name: str) -> Dict[str, Path]:
    """EvalReport as JSON plus the per-case CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = write_json(out_dir / f"{name}.json", report.to_dict())
    csv_path = out_dir / f"{name}_cases.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CASE_FIELDS)
        writer.writeheader()
        for case in report.cases:
            writer.writerow(asdict(case))
    return {"report": json_path, "cases": csv_path}
