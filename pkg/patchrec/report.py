"""
Report - Sweep tables, equal-token pairing and the markdown run summary.

Reads what the other commands leave in an experiment directory:
    data/stats.json
    plans/<plan>/summary.json
    eval/sweep.csv, eval/equal_token_pairs.csv
    seed_summary.csv, criteria.json (multi-seed runs only)
and writes report.md.
"""

import csv
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

try:
    from patchrec.aggregate import CRITERIA_FILE, SUMMARY_FILE
    from patchrec.evaluator import EvalReport
    from patchrec.utils import read_json, setup_logger
except ImportError:
    from aggregate import CRITERIA_FILE, SUMMARY_FILE
    from evaluator import EvalReport
    from utils import read_json, setup_logger

logger = setup_logger(__name__)

SWEEP_FIELDS = [
    "entry", "plan", "mode", "k", "m", "l", "width", "cases",
    "cr", "cr_mean_of_ratios", "hr@10", "hr@20", "ndcg@10", "ndcg@20",
    "history_tokens", "history_positions", "prompt_positions",
    "random_hr@20", "frequency_hr@20",
]
PAIR_FIELDS = [
    "entry", "mode", "k", "m", "l", "prompt_positions", "cr", "hr@20", "ndcg@20",
    "text_entry", "text_k", "text_prompt_positions", "token_diff", "hr@20_diff", "ndcg@20_diff",
]


def sweep_row(entry: str, plan: str, report: EvalReport) -> dict:
    spec = report.spec
    return {
        "entry": entry,
        "plan": plan,
        "mode": spec["mode"],
        "k": spec["k"],
        "m": spec["m"],
        "l": spec["l"],
        "width": spec["width"],
        "cases": report.num_cases,
        "cr": report.cr,
        "cr_mean_of_ratios": report.cr_mean_of_ratios,
        **{key: report.metrics[key] for key in ("hr@10", "hr@20", "ndcg@10", "ndcg@20")},
        "history_tokens": report.tokens["history_tokens"],
        "history_positions": report.tokens["history_positions"],
        "prompt_positions": report.tokens["prompt_positions"],
        "random_hr@20": report.random_baseline["hr@20"],
        "frequency_hr@20": report.frequency_baseline["hr@20"],
    }


def equal_token_pairs(rows: Sequence[dict]) -> List[dict]:
    """Pair each compressed row with the text row of nearest prompt-position total."""
    text_rows = [r for r in rows if r["mode"] == "text"]
    pairs = []
    if not text_rows:
        return pairs
    for row in rows:
        if row["mode"] == "text":
            continue
        best = min(text_rows, key=lambda t: (abs(t["prompt_positions"] - row["prompt_positions"]), t["k"]))
        pairs.append({
            "entry": row["entry"], "mode": row["mode"], "k": row["k"], "m": row["m"], "l": row["l"],
            "prompt_positions": row["prompt_positions"], "cr": row["cr"],
            "hr@20": row["hr@20"], "ndcg@20": row["ndcg@20"],
            "text_entry": best["entry"], "text_k": best["k"],
            "text_prompt_positions": best["prompt_positions"],
            "token_diff": row["prompt_positions"] - best["prompt_positions"],
            "hr@20_diff": row["hr@20"] - best["hr@20"],
            "ndcg@20_diff": row["ndcg@20"] - best["ndcg@20"],
        })
    return pairs


def write_rows(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields))
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_rows(path: Path) -> List[dict]:
    if not Path(path).exists():
        return []
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


# ============================================================================
# Markdown
# ============================================================================

def _fmt(value, digits: int = 4) -> str:
    try:
        number = float(value)
    except (TypeError, ValueError):
        return str(value)
    return str(int(number)) if number.is_integer() and abs(number) >= 1 else f"{number:.{digits}f}"


def format_stats(stats: Optional[dict]) -> str:
    if not stats:
        return "*No dataset statistics found (run `ingest` or `gen-data`).*"
    rows = ["| Statistic | Value |", "|:----------|------:|"]
    for key in ("users", "items", "interactions", "avg_items_per_user", "avg_title_tokens",
                "train", "validation", "test"):
        if key in stats:
            rows.append(f"| {key} | {_fmt(stats[key], 2)} |")
    return "\n".join(rows)


def format_plans(summaries: Sequence[dict]) -> str:
    if not summaries:
        return "*No training runs found.*"
    rows = ["| Plan | Stage | Steps | First loss | Final loss | Tokens | Last val HR@10 |",
            "|:-----|:------|------:|-----------:|-----------:|-------:|---------------:|"]
    for s in summaries:
        val = s.get("validation") or []
        last = _fmt(val[-1]["hr@10"]) if val else "-"
        rows.append(
            f"| {s['plan']} | {s['stage']} | {s['steps']} | {_fmt(s['first_loss'])} | "
            f"{_fmt(s['final_loss'])} | {s['tokens']} | {last} |"
        )
    return "\n".join(rows)


def format_sweep(rows: Sequence[dict]) -> str:
    if not rows:
        return "*No evaluation rows found.*"
    out = ["| Entry | Mode | K | M | L | CR | HR@10 | HR@20 | N@10 | N@20 | Positions | Random HR@20 |",
           "|:------|:-----|--:|--:|--:|---:|------:|------:|-----:|-----:|----------:|-------------:|"]
    for r in rows:
        out.append(
            f"| {r['entry']} | {r['mode']} | {r['k']} | {r['m']} | {r['l']} | {_fmt(r['cr'], 2)} | "
            f"{_fmt(r['hr@10'])} | {_fmt(r['hr@20'])} | {_fmt(r['ndcg@10'])} | {_fmt(r['ndcg@20'])} | "
            f"{r['prompt_positions']} | {_fmt(r['random_hr@20'])} |"
        )
    return "\n".join(out)


def format_pairs(pairs: Sequence[dict]) -> str:
    if not pairs:
        return "*No equal-token comparisons (needs text and compressed rows).*"
    out = ["| Compressed | K | Positions | Text K | Text positions | ΔHR@20 | ΔN@20 |",
           "|:-----------|--:|----------:|-------:|---------------:|-------:|------:|"]
    for p in pairs:
        out.append(
            f"| {p['entry']} ({p['mode']}) | {p['k']} | {p['prompt_positions']} | {p['text_k']} | "
            f"{p['text_prompt_positions']} | {_fmt(p['hr@20_diff'])} | {_fmt(p['ndcg@20_diff'])} |"
        )
    return "\n".join(out)


def format_seed_summary(rows: Sequence[dict]) -> str:
    if not rows:
        return "*No multi-seed summary found (run `run_all.py --seeds ...`, then `aggregate`).*"
    out = ["| Arm | Entry | Mode | K | M | L | Seeds | CR | HR@20 median | HR@20 interval | Random HR@20 |",
           "|:----|:------|:-----|--:|--:|--:|------:|---:|-------------:|:---------------|-------------:|"]
    for r in rows:
        out.append(
            f"| {r['arm']} | {r['entry']} | {r['mode']} | {r['k']} | {r['m']} | {r['l']} | {r['seeds']} | "
            f"{_fmt(r['cr_median'], 2)} | {_fmt(r['hr@20_median'])} | "
            f"[{_fmt(r['hr@20_ci_low'])}, {_fmt(r['hr@20_ci_high'])}] | {_fmt(r['random_hr@20_median'])} |"
        )
    return "\n".join(out)


def format_criteria(criteria: Optional[dict]) -> str:
    if not criteria:
        return ""
    icons = {"PASS": "✅", "FAIL": "❌", "SKIP": "⏭️"}
    seeds = ", ".join(str(s) for s in criteria.get("seeds", []))
    out = [f"**Seeds:** {seeds}", "", "| Check | Verdict | Detail |", "|:------|:--------|:-------|"]
    for c in criteria.get("criteria", []):
        out.append(f"| {c['name']} | {icons.get(c['verdict'], '')} {c['verdict']} | {c['detail']} |")
    ablation = [c for c in criteria.get("criteria", []) if c["name"] == "pretrain_ablation"]
    for v in (ablation[0]["values"] if ablation else []):
        out.append(
            f"\n- {v['entry']} K={v['k']} M={v['m']}: {_fmt(v['hr@20_pretrain'])} with pre-training, "
            f"{_fmt(v['hr@20_no_pretrain'])} without (ΔHR@20 {_fmt(v['diff_median'])}, "
            f"interval [{_fmt(v['diff_ci_low'])}, {_fmt(v['diff_ci_high'])}], {v['seeds']} seeds)"
        )
    return "\n".join(out)


def render_report(out_dir: Path, experiment: str) -> str:
    out_dir = Path(out_dir)
    stats_path = out_dir / "data" / "stats.json"
    stats = read_json(stats_path) if stats_path.exists() else None
    summaries: List[Dict] = []
    for path in sorted((out_dir / "plans").glob("*/summary.json")):
        summaries.append(read_json(path))
    rows = read_rows(out_dir / "eval" / "sweep.csv")
    pairs = read_rows(out_dir / "eval" / "equal_token_pairs.csv")
    seed_rows = read_rows(out_dir / SUMMARY_FILE)
    criteria_path = out_dir / CRITERIA_FILE
    criteria = read_json(criteria_path) if criteria_path.exists() else None

    return f"""# PatchRec Run Report: {experiment}

**Generated:** {datetime.now().strftime("%Y-%m-%d %H:%M:%S")}
**Directory:** `{out_dir}`

---

## 📊 Dataset

{format_stats(stats)}

---

## 🏋️ Training

{format_plans(summaries)}

---

## 🎯 Evaluation

*CR is the ratio of summed history tokens to summed history positions over the split.*

{format_sweep(rows)}

---

## ⚖️ Equal-Token Comparison

*Each compressed row against the text row whose prompt-position total is closest.*

{format_pairs(pairs)}

---

## 🌱 Across Seeds

*Medians over seeds with 95% bootstrap intervals of the median.*

{format_seed_summary(seed_rows)}

{format_criteria(criteria)}
"""


def write_markdown(out_dir: Path, experiment: str) -> Path:
    path = Path(out_dir) / "report.md"
    path.write_text(render_report(out_dir, experiment), encoding="utf-8")
    logger.info(f"Report written to {path}")
    return path
