"""
Aggregate - Medians and bootstrap intervals across seed runs, and the
checks the desk experiments are judged by.

Reads every seed directory of one experiment:
    seed_<n>/eval/sweep.csv               (with patch pre-training)
    seed_<n>_no_pretrain/eval/sweep.csv   (without)
and writes seed_summary.csv and criteria.json next to them.

Checks (all on HR@20 medians over seeds):
  - baseline_beats_random: text rows at their largest K reach 5x the
    width-adjusted random hit rate
  - compressed_parity: PFT-I rows with CR >= 2 reach 0.9x the text row of
    the same K
  - long_history: PFT-I at its largest K is no worse than at its smallest
  - pretrain_ablation: PFT-I with pre-training is no worse than without;
    directional only, logged with an interval on the per-seed difference
"""

import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

try:
    from patchrec.utils import DataError, setup_logger, write_json
except ImportError:
    from utils import DataError, setup_logger, write_json

logger = setup_logger(__name__)

# Configuration
SEED_DIR = re.compile(r"^seed_(\d+)(_no_pretrain)?$")
PRETRAIN_ARM = "pretrain"
NO_PRETRAIN_ARM = "no_pretrain"
SUMMARY_FILE = "seed_summary.csv"
CRITERIA_FILE = "criteria.json"
KEY = ["arm", "entry", "mode", "k", "m", "l"]
METRICS = ["hr@20", "ndcg@20", "cr", "random_hr@20"]
MIN_SEEDS = 3
RANDOM_FACTOR = 5.0
PARITY_FACTOR = 0.9
MIN_CR = 2.0
BOOTSTRAP_SAMPLES = 2000
CONFIDENCE = 0.95


@dataclass
class CriterionResult:
    name: str
    passed: Optional[bool]          # None when the runs hold no rows to judge
    detail: str
    values: List[dict] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        if self.passed is None:
            return "SKIP"
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        return dict(asdict(self), verdict=self.verdict)


@dataclass
class SeedAggregate:
    summary: pd.DataFrame
    criteria: List[CriterionResult]
    seeds: List[int]
    paths: Dict[str, Path] = field(default_factory=dict)


# ============================================================================
# Loading
# ============================================================================

def find_seed_runs(base_dir: Path) -> List[Tuple[int, str, Path]]:
    """(seed, arm, sweep path) for every seed directory that finished eval."""
    base_dir = Path(base_dir)
    runs = []
    if not base_dir.exists():
        return runs
    for child in sorted(base_dir.iterdir()):
        match = SEED_DIR.match(child.name)
        if not match or not child.is_dir():
            continue
        sweep = child / "eval" / "sweep.csv"
        if not sweep.exists():
            logger.warning(f"Skipping {child.name}: no eval/sweep.csv")
            continue
        arm = NO_PRETRAIN_ARM if match.group(2) else PRETRAIN_ARM
        runs.append((int(match.group(1)), arm, sweep))
    return runs


def load_sweeps(base_dir: Path) -> pd.DataFrame:
    """
    Every seed's sweep rows in one frame, tagged with arm and seed.

    Raises:
        DataError: If no seed directory under base_dir has a sweep.
    """
    runs = find_seed_runs(base_dir)
    if not runs:
        raise DataError(f"no seed_*/eval/sweep.csv under {base_dir} (run with --seeds first)")
    frames = []
    for seed, arm, path in runs:
        frame = pd.read_csv(path)
        frame.insert(0, "seed", seed)
        frame.insert(0, "arm", arm)
        frames.append(frame)
    sweeps = pd.concat(frames, ignore_index=True)
    if sweeps.empty:
        raise DataError(f"the seed sweeps under {base_dir} hold no rows")
    return sweeps


# ============================================================================
# Statistics
# ============================================================================

def bootstrap_interval(values: Sequence[float], samples: int = BOOTSTRAP_SAMPLES,
                       confidence: float = CONFIDENCE, seed: int = 0) -> Tuple[float, float]:
    """Percentile bootstrap interval of the median."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("bootstrap over zero values")
    if values.size == 1:
        return float(values[0]), float(values[0])
    rng = np.random.default_rng(seed)
    draws = values[rng.integers(0, values.size, size=(samples, values.size))]
    medians = np.median(draws, axis=1)
    tail = (1.0 - confidence) / 2.0
    low, high = np.quantile(medians, [tail, 1.0 - tail])
    return float(low), float(high)


def summarize(sweeps: pd.DataFrame) -> pd.DataFrame:
    """One row per (arm, entry, mode, k, m, l): seed count, medians and intervals."""
    records = []
    for key, group in sweeps.groupby(KEY, sort=True):
        record = dict(zip(KEY, key))
        record["seeds"] = int(group["seed"].nunique())
        for metric in METRICS:
            values = group[metric].to_numpy(dtype=np.float64)
            low, high = bootstrap_interval(values)
            record[f"{metric}_median"] = float(np.median(values))
            record[f"{metric}_ci_low"] = low
            record[f"{metric}_ci_high"] = high
        records.append(record)
    return pd.DataFrame.from_records(records)


def _rows(summary: pd.DataFrame, arm: str, mode: str) -> pd.DataFrame:
    return summary[(summary["arm"] == arm) & (summary["mode"] == mode)]


# ============================================================================
# Criteria
# ============================================================================

def baseline_beats_random(summary: pd.DataFrame, factor: float = RANDOM_FACTOR) -> CriterionResult:
    name = "baseline_beats_random"
    text = _rows(summary, PRETRAIN_ARM, "text")
    if text.empty:
        return CriterionResult(name, None, "no text rows")
    values = []
    for entry, rows in text.groupby("entry"):
        row = rows.loc[rows["k"].idxmax()]
        hr, random_hr = float(row["hr@20_median"]), float(row["random_hr@20_median"])
        values.append({"entry": entry, "k": int(row["k"]), "hr@20": hr, "random_hr@20": random_hr,
                       "ratio": hr / random_hr if random_hr > 0 else float("inf"),
                       "passed": bool(hr >= factor * random_hr)})
    passed = all(v["passed"] for v in values)
    return CriterionResult(name, passed, f"text HR@20 at the largest K >= {factor:g}x random", values)


def compressed_parity(summary: pd.DataFrame, factor: float = PARITY_FACTOR,
                      min_cr: float = MIN_CR) -> CriterionResult:
    name = "compressed_parity"
    text = _rows(summary, PRETRAIN_ARM, "text")
    compressed = _rows(summary, PRETRAIN_ARM, "pft_i")
    compressed = compressed[compressed["cr_median"] >= min_cr]
    text_hr = text.groupby("k")["hr@20_median"].max()
    values = []
    for _, row in compressed.iterrows():
        k = int(row["k"])
        if k not in text_hr.index:
            continue
        hr, reference = float(row["hr@20_median"]), float(text_hr[k])
        values.append({"entry": row["entry"], "k": k, "m": int(row["m"]), "cr": float(row["cr_median"]),
                       "hr@20": hr, "text_hr@20": reference, "passed": bool(hr >= factor * reference)})
    if not values:
        return CriterionResult(name, None, f"no PFT-I row with CR >= {min_cr:g} and a text row of the same K")
    passed = all(v["passed"] for v in values)
    return CriterionResult(name, passed, f"PFT-I HR@20 at CR >= {min_cr:g} is >= {factor:g}x text", values)


def long_history(summary: pd.DataFrame) -> CriterionResult:
    name = "long_history"
    compressed = _rows(summary, PRETRAIN_ARM, "pft_i")
    values = []
    for (entry, m, l), rows in compressed.groupby(["entry", "m", "l"]):
        if rows["k"].nunique() < 2:
            continue
        short, long = rows.loc[rows["k"].idxmin()], rows.loc[rows["k"].idxmax()]
        values.append({"entry": entry, "m": int(m), "l": int(l),
                       "short_k": int(short["k"]), "short_hr@20": float(short["hr@20_median"]),
                       "long_k": int(long["k"]), "long_hr@20": float(long["hr@20_median"]),
                       "passed": bool(long["hr@20_median"] >= short["hr@20_median"])})
    if not values:
        return CriterionResult(name, None, "no PFT-I entry evaluated at two values of K")
    passed = all(v["passed"] for v in values)
    return CriterionResult(name, passed, "PFT-I HR@20 at the largest K >= at the smallest K", values)


def pretrain_ablation(sweeps: pd.DataFrame) -> CriterionResult:
    name = "pretrain_ablation"
    on = ["entry", "mode", "k", "m", "l", "seed"]
    compressed = sweeps[sweeps["mode"] == "pft_i"]
    with_pre = compressed[compressed["arm"] == PRETRAIN_ARM][on + ["hr@20"]]
    without = compressed[compressed["arm"] == NO_PRETRAIN_ARM][on + ["hr@20"]]
    paired = with_pre.merge(without, on=on, suffixes=("_pretrain", "_no_pretrain"))
    if paired.empty:
        return CriterionResult(name, None, "no seed evaluated in both arms")

    values = []
    for (entry, k, m, l), rows in paired.groupby(["entry", "k", "m", "l"]):
        diff = (rows["hr@20_pretrain"] - rows["hr@20_no_pretrain"]).to_numpy(dtype=np.float64)
        low, high = bootstrap_interval(diff)
        pre, scratch = float(rows["hr@20_pretrain"].median()), float(rows["hr@20_no_pretrain"].median())
        values.append({"entry": entry, "k": int(k), "m": int(m), "l": int(l), "seeds": int(len(rows)),
                       "hr@20_pretrain": pre, "hr@20_no_pretrain": scratch,
                       "diff_median": float(np.median(diff)), "diff_ci_low": low, "diff_ci_high": high,
                       "passed": bool(pre >= scratch)})
        logger.info(
            f"Pre-training ablation {entry} K={k} M={m}: {pre:.4f} vs {scratch:.4f}, "
            f"difference {np.median(diff):+.4f} [{low:+.4f}, {high:+.4f}] over {len(rows)} seeds"
        )
    passed = all(v["passed"] for v in values)
    return CriterionResult(name, passed, "PFT-I HR@20 with pre-training >= without (directional)", values)


# ============================================================================
# Entry point
# ============================================================================

def aggregate_seeds(base_dir: Path) -> SeedAggregate:
    """Summarize every seed run under base_dir and write the summary and criteria files."""
    base_dir = Path(base_dir)
    sweeps = load_sweeps(base_dir)
    seeds = sorted(int(s) for s in sweeps["seed"].unique())
    if len(seeds) < MIN_SEEDS:
        logger.warning(f"Only {len(seeds)} seed(s) found; the checks expect at least {MIN_SEEDS}")

    summary = summarize(sweeps)
    criteria = [
        baseline_beats_random(summary),
        compressed_parity(summary),
        long_history(summary),
        pretrain_ablation(sweeps),
    ]
    for criterion in criteria:
        logger.info(f"{criterion.verdict:4s} {criterion.name}: {criterion.detail}")

    summary_path = base_dir / SUMMARY_FILE
    summary.to_csv(summary_path, index=False, lineterminator="\n")
    criteria_path = write_json(base_dir / CRITERIA_FILE, {
        "seeds": seeds,
        "arms": sorted(sweeps["arm"].unique().tolist()),
        "criteria": [c.to_dict() for c in criteria],
    })
    return SeedAggregate(summary=summary, criteria=criteria, seeds=seeds,
                         paths={"summary": summary_path, "criteria": criteria_path})
