"""
Trainer - Patch pre-training, patch fine-tuning and the baseline regimes.

Stage 1 (PRETRAIN_PATCH): every text layout of a batch is paired with a copy
whose items are patched with probability p = step / total_steps; the loss is
averaged over originals and copies, so the effective batch doubles.

Stage 2 (FINETUNE_PFT_I / FINETUNE_PFT_S) and the baselines (BASELINE_TEXT,
PURE_ITEM, PURE_SESSION) train on one fixed layout family. DROPOUT_ABLATION
pairs each text layout with a copy whose selected items are removed.

Steps, not examples, drive the schedule: T = ceil(examples / batch_size) * epochs.
Batch order is one permutation per epoch drawn from the plan seed.
"""

import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

try:
    from patchrec.checkpoint import load_checkpoint, save_checkpoint
    from patchrec.context import LabContext
    from patchrec.evaluator import validation_hit_ratio
    from patchrec.layout_types import CompressionSchedule, LayoutConfig, LayoutMode, PromptLayout
    from patchrec.model import ModelConfig, ModelState, loss as layout_loss
    from patchrec.optim import WARMUP_RATIO, OptimizerState, optimizer_step, zero_grads
    from patchrec.patches import augment_dropout, augment_pretraining
    from patchrec.utils import (
        ConfigError, DataError, EmptyHistoryError, LayoutTooLongError,
        read_jsonl, setup_logger, write_jsonl,
    )
except ImportError:
    from checkpoint import load_checkpoint, save_checkpoint
    from context import LabContext
    from evaluator import validation_hit_ratio
    from layout_types import CompressionSchedule, LayoutConfig, LayoutMode, PromptLayout
    from model import ModelConfig, ModelState, loss as layout_loss
    from optim import WARMUP_RATIO, OptimizerState, optimizer_step, zero_grads
    from patches import augment_dropout, augment_pretraining
    from utils import (
        ConfigError, DataError, EmptyHistoryError, LayoutTooLongError,
        read_jsonl, setup_logger, write_jsonl,
    )

logger = setup_logger(__name__)

RUN_RECORD_FILE = "run_record.jsonl"
LATEST_DIR = "latest"
FINAL_DIR = "final"


class TrainStage(Enum):
    PRETRAIN_PATCH = "pretrain_patch"
    FINETUNE_PFT_I = "finetune_pft_i"
    FINETUNE_PFT_S = "finetune_pft_s"
    BASELINE_TEXT = "baseline_text"
    PURE_ITEM = "pure_item"
    PURE_SESSION = "pure_session"
    DROPOUT_ABLATION = "dropout_ablation"


STAGE_MODES = {
    TrainStage.PRETRAIN_PATCH: LayoutMode.TEXT,
    TrainStage.FINETUNE_PFT_I: LayoutMode.PFT_I,
    TrainStage.FINETUNE_PFT_S: LayoutMode.PFT_S,
    TrainStage.BASELINE_TEXT: LayoutMode.TEXT,
    TrainStage.PURE_ITEM: LayoutMode.PURE_ITEM,
    TrainStage.PURE_SESSION: LayoutMode.PURE_SESSION,
    TrainStage.DROPOUT_ABLATION: LayoutMode.TEXT,
}
PAIRED_STAGES = (TrainStage.PRETRAIN_PATCH, TrainStage.DROPOUT_ABLATION)


@dataclass
class TrainPlan:
    """
    One training stage.

    init_checkpoint is a checkpoint directory; the CLI also accepts the name of
    an earlier plan in the same experiment and resolves it to that plan's output.
    """
    name: str
    stage: TrainStage
    epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    init_checkpoint: Optional[str] = None
    warmup_ratio: float = WARMUP_RATIO
    cosine: bool = True
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    eval_every: int = 0
    eval_cases: int = 100
    checkpoint_every: int = 0
    max_examples: Optional[int] = None

    def validate(self) -> "TrainPlan":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"plan '{self.name}': epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"plan '{self.name}': lr must be > 0, got {self.lr}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"plan '{self.name}': warmup_ratio must be in [0, 1)")
        self.layout.validate()
        expected = STAGE_MODES[self.stage]
        if self.layout.mode != expected:
            raise ConfigError(
                f"plan '{self.name}': stage {self.stage.value} trains {expected.value} layouts, "
                f"config says {self.layout.mode.value}"
            )
        return self

    @property
    def paired(self) -> bool:
        return self.stage in PAIRED_STAGES

    def to_dict(self) -> dict:
        data = asdict(self)
        data["stage"] = self.stage.value
        data["layout"] = self.layout.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainPlan":
        data = dict(data)
        stage = TrainStage(data.pop("stage"))
        layout = dict(data.pop("layout", {}))
        layout.setdefault("mode", STAGE_MODES[stage].value)
        return cls(stage=stage, layout=LayoutConfig.from_dict(layout), **data).validate()


@dataclass
class StepRecord:
    step: int
    loss: float
    p: str           # exact step / total_steps
    p_value: float
    tokens: int      # input positions fed to the model this step
    examples: int    # layouts in the step (originals plus copies)
    skipped: int
    lr: float
    wall_time: float


@dataclass
class RunRecord:
    plan: str
    stage: str
    total_steps: int
    steps: List[StepRecord] = field(default_factory=list)
    validation: List[dict] = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    skipped_examples: int = 0

    @property
    def losses(self) -> List[float]:
        return [s.loss for s in self.steps]

    @property
    def p_values(self) -> List[str]:
        return [s.p for s in self.steps]

    def summary(self) -> dict:
        losses = self.losses
        return {
            "plan": self.plan,
            "stage": self.stage,
            "steps": len(self.steps),
            "total_steps": self.total_steps,
            "first_loss": losses[0] if losses else None,
            "final_loss": losses[-1] if losses else None,
            "tokens": sum(s.tokens for s in self.steps),
            "skipped_examples": self.skipped_examples,
            "validation": self.validation,
            "checkpoint_path": self.checkpoint_path,
        }


@dataclass
class TrainExample:
    example_id: int
    user_id: int
    history: List[int]
    target_item: int


# ============================================================================
# Examples and batching
# ============================================================================

def build_examples(context: LabContext, k: int, split: str = "train",
                   max_examples: Optional[int] = None) -> List[TrainExample]:
    """One example per interaction that has earlier history; example id = split index."""
    examples: List[TrainExample] = []
    skipped = 0
    for index, row in enumerate(context.dataset.split(split)):
        if max_examples is not None and len(examples) >= max_examples:
            break
        try:
            history = context.dataset.truncate_history(row.user_id, row.timestamp, k)
        except EmptyHistoryError:
            skipped += 1
            continue
        examples.append(TrainExample(index, row.user_id, history, row.item_id))
    if skipped:
        logger.debug(f"{skipped} {split} interactions have no earlier history and are not examples")
    return examples


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """The epoch's shuffled batches of example indices; the last batch may be short."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def total_steps(n: int, plan: TrainPlan) -> int:
    return math.ceil(n / plan.batch_size) * plan.epochs


def check_fits(context: LabContext, examples: Sequence[TrainExample], config: LayoutConfig,
               max_positions: int) -> int:
    """
    Longest training input over all examples.

    Raises:
        LayoutTooLongError: Naming the longest offender when it overflows.
    """
    longest, offender = 0, None
    for ex in examples:
        n = context.builder.build(ex.history, config, ex.target_item).input_positions
        if n > longest:
            longest, offender = n, ex
    if longest > max_positions:
        raise LayoutTooLongError(
            longest, max_positions,
            label=f"training example {offender.example_id} (user {offender.user_id}, {len(offender.history)} items)",
        )
    return longest


def batch_loss(state: ModelState, layouts: Sequence[PromptLayout], title_tokens,
               backward: bool = True) -> float:
    """Mean of per-layout losses; gradients of that mean accumulate into the parameters."""
    total = 0.0
    scale = 1.0 / len(layouts)
    for layout in layouts:
        value = layout_loss(state, layout, title_tokens)
        if backward:
            (value * scale).backward()
        total += value.item()
    return total / len(layouts)


def _step_layouts(context: LabContext, plan: TrainPlan, batch: Sequence[TrainExample],
                  schedule: CompressionSchedule) -> Tuple[List[PromptLayout], int]:
    built = [(ex.example_id, context.builder.build(ex.history, plan.layout, ex.target_item)) for ex in batch]
    if plan.stage == TrainStage.PRETRAIN_PATCH:
        augmented = augment_pretraining(context.builder, built, schedule, plan.seed, plan.layout.patch_separators)
        return augmented.layouts, 0
    if plan.stage == TrainStage.DROPOUT_ABLATION:
        augmented = augment_dropout(context.builder, built, schedule, plan.seed, plan.layout.patch_separators)
        return augmented.layouts, augmented.skipped
    return [layout for _, layout in built], 0


# ============================================================================
# Runs
# ============================================================================

def initial_state(plan: TrainPlan, context: LabContext, model_config: Optional[ModelConfig]) -> ModelState:
    """From plan.init_checkpoint when given, otherwise a fresh seeded model."""
    if plan.init_checkpoint:
        state = load_checkpoint(Path(plan.init_checkpoint)).state
        context.check_compatible(state)
        logger.info(f"Plan '{plan.name}' starts from {plan.init_checkpoint}")
        return state
    if model_config is None:
        raise ConfigError(f"plan '{plan.name}' has no init_checkpoint and no model config")
    logger.info(f"Plan '{plan.name}' starts from scratch (seed {plan.seed})")
    return ModelState.initialize(model_config, plan.seed)


def _resume_point(plan: TrainPlan, out_dir: Optional[Path], context: LabContext):
    if out_dir is None or not (out_dir / LATEST_DIR).exists():
        return None
    ckpt = load_checkpoint(out_dir / LATEST_DIR)
    progress = ckpt.trainer_state or {}
    if progress.get("plan") != plan.name or progress.get("plan_config") != plan.to_dict():
        raise ConfigError(f"{out_dir / LATEST_DIR} belongs to another plan configuration; refusing to resume")
    context.check_compatible(ckpt.state)
    steps = [StepRecord(**r) for r in read_jsonl(out_dir / RUN_RECORD_FILE) if r["step"] < progress["step"]]
    return ckpt.state, ckpt.optimizer(), progress, steps


def _save_progress(out_dir: Path, name: str, state: ModelState, optimizer: OptimizerState,
                   plan: TrainPlan, record: RunRecord) -> Path:
    path = save_checkpoint(out_dir / name, state, optimizer, {
        "plan": plan.name,
        "plan_config": plan.to_dict(),
        "step": optimizer.step,
        "validation": record.validation,
        "skipped_examples": record.skipped_examples,
    })
    write_jsonl(out_dir / RUN_RECORD_FILE, (asdict(s) for s in record.steps))
    return path


def train_plan(plan: TrainPlan, context: LabContext, model_config: Optional[ModelConfig] = None,
               out_dir: Optional[Path] = None, resume: bool = False,
               state: Optional[ModelState] = None) -> Tuple[ModelState, RunRecord]:
    """
    Run one plan to completion.

    Args:
        plan: The stage to train
        context: Dataset, vocabulary, builder and trie
        model_config: Used when the plan starts from scratch
        out_dir: Where the final checkpoint and run record go (None: keep in memory)
        resume: Continue from out_dir/latest when present
        state: Explicit starting state, overrides init_checkpoint

    Returns:
        The trained state and its RunRecord.
    """
    plan.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    examples = build_examples(context, plan.layout.k, max_examples=plan.max_examples)
    if len(examples) < plan.batch_size:
        raise DataError(
            f"plan '{plan.name}': {len(examples)} training examples cannot fill one batch of {plan.batch_size}"
        )

    state = state if state is not None else initial_state(plan, context, model_config)
    longest = check_fits(context, examples, plan.layout, state.config.max_positions)
    T = total_steps(len(examples), plan)
    optimizer = OptimizerState(
        lr=plan.lr, total_steps=T, warmup_ratio=plan.warmup_ratio, cosine=plan.cosine,
        weight_decay=plan.weight_decay, max_grad_norm=plan.max_grad_norm,
    )
    record = RunRecord(plan=plan.name, stage=plan.stage.value, total_steps=T)

    resumed = _resume_point(plan, out_dir, context) if resume else None
    if resumed is not None:
        state, optimizer, progress, record.steps = resumed
        record.validation = progress.get("validation", [])
        record.skipped_examples = progress.get("skipped_examples", 0)
        logger.info(f"Resuming plan '{plan.name}' at step {optimizer.step}/{T}")

    logger.info(
        f"Plan '{plan.name}' ({plan.stage.value}): {len(examples)} examples, {T} steps, "
        f"batch {plan.batch_size}{' x2 (paired)' if plan.paired else ''}, longest input {longest}"
    )

    steps_per_epoch = math.ceil(len(examples) / plan.batch_size)
    orders: Dict[int, List[np.ndarray]] = {}
    schedule = CompressionSchedule(T)
    params = state.parameters()
    start = time.time()

    for step in tqdm(range(optimizer.step, T), desc=plan.name, initial=optimizer.step, total=T):
        epoch, index = divmod(step, steps_per_epoch)
        if epoch not in orders:
            orders[epoch] = batch_order(len(examples), plan.batch_size, plan.seed, epoch)
        batch = [examples[i] for i in orders[epoch][index]]
        current = schedule.at(step)
        layouts, skipped = _step_layouts(context, plan, batch, current)

        zero_grads(params)
        mean_loss = batch_loss(state, layouts, context.title_tokens)
        lr = optimizer_step(optimizer, params)

        record.skipped_examples += skipped
        record.steps.append(StepRecord(
            step=step,
            loss=mean_loss,
            p=f"{current.p_exact.numerator}/{current.p_exact.denominator}",
            p_value=current.p,
            tokens=sum(layout.input_positions for layout in layouts),
            examples=len(layouts),
            skipped=skipped,
            lr=lr,
            wall_time=time.time() - start,
        ))

        done = step + 1
        if plan.eval_every and done % plan.eval_every == 0:
            hr = validation_hit_ratio(state, context, plan.layout, plan.eval_cases)
            record.validation.append({"step": done, "hr@10": hr})
            logger.info(f"[{plan.name}] step {done}/{T} loss={mean_loss:.4f} validation HR@10={hr:.4f}")
        if out_dir is not None and plan.checkpoint_every and done % plan.checkpoint_every == 0 and done < T:
            _save_progress(out_dir, LATEST_DIR, state, optimizer, plan, record)

    if record.skipped_examples:
        logger.info(f"Plan '{plan.name}': {record.skipped_examples} dropout copies skipped (empty history)")
    if out_dir is not None:
        record.checkpoint_path = str(_save_progress(out_dir, FINAL_DIR, state, optimizer, plan, record))
    logger.info(
        f"Plan '{plan.name}' finished: loss {record.losses[0]:.4f} -> {record.losses[-1]:.4f} "
        f"in {time.time() - start:.1f}s"
    )
    return state, record


def run_pretrain(plan: TrainPlan, context: LabContext, **kwargs) -> Tuple[ModelState, RunRecord]:
    if plan.stage != TrainStage.PRETRAIN_PATCH:
        raise ConfigError(f"run_pretrain needs a {TrainStage.PRETRAIN_PATCH.value} plan, got {plan.stage.value}")
    return train_plan(plan, context, **kwargs)


def run_finetune(plan: TrainPlan, context: LabContext, **kwargs) -> Tuple[ModelState, RunRecord]:
    if plan.stage == TrainStage.PRETRAIN_PATCH:
        raise ConfigError("run_finetune does not run the patch pre-training stage; use run_pretrain")
    return train_plan(plan, context, **kwargs)
