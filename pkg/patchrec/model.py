"""
Model - Tiny decoder-only causal transformer over prompt layouts.

Patches are pooled from the live token-embedding table on every call:
    item patch    = mean of the item's title-token embeddings
    session patch = mean of its items' item patches (mean of means)
Learned absolute position vectors are added after pooling, one per position,
so a patch consumes exactly one position. Blocks are pre-norm with GELU MLPs;
the output head is tied to the token-embedding table. The final LayerNorm
belongs to the block stack, so a zero-layer model maps (embedding + position)
straight through the tied head.

Training runs through the autograd Tensor path. Inference (beam search) runs
the same arithmetic on plain numpy arrays with a key/value cache.
"""

import copy
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

try:
    from patchrec.autograd import (
        Tensor, concat, gelu, layer_norm, matmul, mean_pool, no_grad, slice_cols,
        slice_rows, softmax, softmax_cross_entropy, take_rows, transpose,
    )
    from patchrec.layout_types import PromptLayout, SegmentKind
    from patchrec.utils import (
        ConfigError, LayoutError, LayoutTooLongError, NumericError, setup_logger,
    )
except ImportError:
    from autograd import (
        Tensor, concat, gelu, layer_norm, matmul, mean_pool, no_grad, slice_cols,
        slice_rows, softmax, softmax_cross_entropy, take_rows, transpose,
    )
    from layout_types import PromptLayout, SegmentKind
    from utils import ConfigError, LayoutError, LayoutTooLongError, NumericError, setup_logger

logger = setup_logger(__name__)

MODEL_VERSION = 1
TitleTokens = Mapping[int, Sequence[int]]


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_positions: int = 512
    mlp_ratio: int = 4
    init_std: float = 0.02
    ln_eps: float = 1e-5
    version: int = MODEL_VERSION
    vocab_fingerprint: str = ""

    def validate(self) -> "ModelConfig":
        if self.vocab_size < 1 or self.d < 1 or self.max_positions < 1:
            raise ConfigError(f"invalid model sizes: {self.to_dict()}")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.n_heads < 1 or self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        version = data.get("version", MODEL_VERSION)
        if version != MODEL_VERSION:
            raise ConfigError(f"unsupported model config version {version}, expected {MODEL_VERSION}")
        return cls(**data).validate()


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name and shape, in canonical order."""
    d, hidden = config.d, config.d * config.mlp_ratio
    shapes: Dict[str, Tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_positions, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.gamma": (d,), p + "ln1.beta": (d,),
            p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
            p + "attn.w_out": (d, d), p + "attn.b_out": (d,),
            p + "ln2.gamma": (d,), p + "ln2.beta": (d,),
            p + "mlp.w_in": (d, hidden), p + "mlp.b_in": (hidden,),
            p + "mlp.w_out": (hidden, d), p + "mlp.b_out": (d,),
        })
    if config.n_layers > 0:
        shapes["ln_f.gamma"] = (d,)
        shapes["ln_f.beta"] = (d,)
    return shapes


class ModelState:
    """The trainable parameters plus their config."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config.validate()
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {list(params[name].shape)}, expected {list(shape)}")
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ModelState":
        config.validate()
        rng = np.random.default_rng(seed)
        params: Dict[str, Tensor] = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gamma"):
                data = np.ones(shape)
            elif name.endswith(".beta") or ".b_" in name:
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, config.init_std, size=shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def tok_emb(self) -> Tensor:
        return self.params["tok_emb"]

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def snapshot(self) -> "ModelState":
        """A read-only copy for evaluation workers."""
        params = {n: Tensor(p.data.copy(), requires_grad=False, name=n) for n, p in self.params.items()}
        return ModelState(copy.deepcopy(self.config), params)


# ============================================================================
# Embedding
# ============================================================================

def _title(title_tokens: TitleTokens, item_id: int) -> Sequence[int]:
    try:
        return title_tokens[item_id]
    except KeyError:
        raise LayoutError(f"item {item_id} has no tokenized title") from None


def item_patch(table: Tensor, title_tokens: TitleTokens, item_id: int) -> Tensor:
    """Mean of the title-token embeddings."""
    return mean_pool(take_rows(table, _title(title_tokens, item_id)))


def session_patch(table: Tensor, title_tokens: TitleTokens, item_ids: Sequence[int]) -> Tensor:
    """Mean of the item patches."""
    patches = [item_patch(table, title_tokens, i) for i in item_ids]
    return mean_pool(patches[0] if len(patches) == 1 else concat(patches, axis=0))


def embed_rows(table: Tensor, layout: PromptLayout, title_tokens: TitleTokens,
               include_target: bool = False) -> Tensor:
    """
    Content rows of a layout (no positions yet), one row per position.
    With include_target the target tokens except the final EOS are appended.
    """
    pieces: List[Tensor] = []
    run: List[int] = []

    def flush():
        if run:
            pieces.append(take_rows(table, list(run)))
            run.clear()

    for seg in layout.segments:
        if seg.kind in (SegmentKind.RAW_TOKENS, SegmentKind.SPECIAL):
            run.extend(seg.token_ids)
        elif seg.kind == SegmentKind.ITEM_PATCH:
            flush()
            pieces.append(item_patch(table, title_tokens, seg.source_item_ids[0]))
        else:
            flush()
            pieces.append(session_patch(table, title_tokens, seg.source_item_ids))
    if include_target:
        run.extend(layout.target_token_ids[:-1])
    flush()
    return pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)


def embed_layout(state: ModelState, layout: PromptLayout, title_tokens: TitleTokens,
                 include_target: bool = False) -> Tensor:
    """Pooled content rows of the layout from the current embedding table."""
    n = layout.input_positions if include_target else layout.positions
    if n > state.config.max_positions:
        raise LayoutTooLongError(n, state.config.max_positions)
    return embed_rows(state.tok_emb, layout, title_tokens, include_target)


# ============================================================================
# Transformer (autograd path)
# ============================================================================

def causal_mask(n: int, offset: int = 0, total: Optional[int] = None) -> np.ndarray:
    """True where query row a (absolute position offset + a) must not see key column j."""
    total = offset + n if total is None else total
    return np.arange(total)[None, :] > (offset + np.arange(n))[:, None]


def _block(state: ModelState, i: int, x: Tensor, mask: np.ndarray) -> Tensor:
    cfg = state.config
    p = f"layers.{i}."
    d, dh = cfg.d, cfg.head_dim
    h = layer_norm(x, state[p + "ln1.gamma"], state[p + "ln1.beta"], cfg.ln_eps)
    qkv = matmul(h, state[p + "attn.w_qkv"]) + state[p + "attn.b_qkv"]
    scale = 1.0 / np.sqrt(dh)
    heads = []
    for hd in range(cfg.n_heads):
        q = slice_cols(qkv, hd * dh, (hd + 1) * dh)
        k = slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh)
        v = slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh)
        att = softmax(matmul(q, transpose(k)) * scale, mask=mask)
        heads.append(matmul(att, v))
    attn = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    x = x + (matmul(attn, state[p + "attn.w_out"]) + state[p + "attn.b_out"])
    h2 = layer_norm(x, state[p + "ln2.gamma"], state[p + "ln2.beta"], cfg.ln_eps)
    mlp = matmul(gelu(matmul(h2, state[p + "mlp.w_in"]) + state[p + "mlp.b_in"]), state[p + "mlp.w_out"])
    return x + (mlp + state[p + "mlp.b_out"])


def forward_embedded(state: ModelState, rows: Tensor) -> Tensor:
    """Logits [n x vocab] for content rows; adds positions and runs the stack."""
    cfg = state.config
    n = rows.shape[0]
    if n > cfg.max_positions:
        raise LayoutTooLongError(n, cfg.max_positions)
    x = rows + slice_rows(state["pos_emb"], 0, n)
    mask = causal_mask(n)
    for i in range(cfg.n_layers):
        x = _block(state, i, x, mask)
    if cfg.n_layers > 0:
        x = layer_norm(x, state["ln_f.gamma"], state["ln_f.beta"], cfg.ln_eps)
    logits = matmul(x, transpose(state.tok_emb))
    if not np.all(np.isfinite(logits.data)):
        raise NumericError(f"non-finite logits over {n} positions")
    return logits


def forward(state: ModelState, layout: PromptLayout, title_tokens: TitleTokens,
            include_target: bool = True) -> Tensor:
    """Next-token logits at every input position of the layout."""
    rows = embed_layout(state, layout, title_tokens, include_target)
    return forward_embedded(state, rows)


def loss_targets(layout: PromptLayout) -> Tuple[List[int], List[bool]]:
    """Per-position targets and mask: only positions predicting the target (and EOS) count."""
    if not layout.target_token_ids:
        raise LayoutError("layout has no target to supervise")
    p = layout.positions
    n = layout.input_positions
    targets = [0] * n
    mask = [False] * n
    for j, tok in enumerate(layout.target_token_ids):
        targets[p - 1 + j] = tok
        mask[p - 1 + j] = True
    return targets, mask


def loss(state: ModelState, layout: PromptLayout, title_tokens: TitleTokens) -> Tensor:
    """Mean cross-entropy over the target positions of one layout."""
    targets, mask = loss_targets(layout)
    logits = forward(state, layout, title_tokens, include_target=True)
    return softmax_cross_entropy(logits, targets, mask)


# ============================================================================
# Cached inference (numpy path)
# ============================================================================

@dataclass
class KVCache:
    keys: List[np.ndarray] = field(default_factory=list)
    values: List[np.ndarray] = field(default_factory=list)
    length: int = 0


def _np_layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    return centered * (1.0 / np.sqrt(var + eps)) * gamma + beta


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def _np_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    scores = np.where(mask, -np.inf, scores)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def infer_rows(state: ModelState, rows: np.ndarray, cache: Optional[KVCache] = None) -> Tuple[np.ndarray, KVCache]:
    """
    Run content rows that follow `cache` through the model.

    Returns:
        logits for the new rows and a new cache covering old + new positions.
    """
    cfg = state.config
    P = {name: t.data for name, t in state.params.items()}
    start = cache.length if cache is not None else 0
    n = rows.shape[0]
    if start + n > cfg.max_positions:
        raise LayoutTooLongError(start + n, cfg.max_positions, label="decoding state")
    d, dh = cfg.d, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    mask = causal_mask(n, offset=start)
    x = rows + P["pos_emb"][start:start + n]
    new_cache = KVCache(length=start + n)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = _np_layer_norm(x, P[p + "ln1.gamma"], P[p + "ln1.beta"], cfg.ln_eps)
        qkv = h @ P[p + "attn.w_qkv"] + P[p + "attn.b_qkv"]
        k_new, v_new = qkv[:, d:2 * d], qkv[:, 2 * d:]
        keys = k_new if cache is None else np.vstack([cache.keys[i], k_new])
        values = v_new if cache is None else np.vstack([cache.values[i], v_new])
        new_cache.keys.append(keys)
        new_cache.values.append(values)
        heads = []
        for hd in range(cfg.n_heads):
            cols = slice(hd * dh, (hd + 1) * dh)
            att = _np_softmax((qkv[:, cols] @ keys[:, cols].T) * scale, mask)
            heads.append(att @ values[:, cols])
        x = x + (np.concatenate(heads, axis=1) @ P[p + "attn.w_out"] + P[p + "attn.b_out"])
        h2 = _np_layer_norm(x, P[p + "ln2.gamma"], P[p + "ln2.beta"], cfg.ln_eps)
        x = x + (_np_gelu(h2 @ P[p + "mlp.w_in"] + P[p + "mlp.b_in"]) @ P[p + "mlp.w_out"] + P[p + "mlp.b_out"])
    if cfg.n_layers > 0:
        x = _np_layer_norm(x, P["ln_f.gamma"], P["ln_f.beta"], cfg.ln_eps)
    logits = x @ P["tok_emb"].T
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"non-finite logits while decoding at positions {start}..{start + n - 1}")
    return logits, new_cache


def prompt_rows(state: ModelState, layout: PromptLayout, title_tokens: TitleTokens) -> np.ndarray:
    """Prompt content rows as a plain array (no graph)."""
    with no_grad():
        return embed_layout(state, layout, title_tokens).data


def token_rows(state: ModelState, token_ids: Sequence[int]) -> np.ndarray:
    return state.tok_emb.data[np.asarray(token_ids, dtype=np.int64)]
