"""Part-aware prompt bank: seven text prompts plus learnable modifiers
assembled into a fixed 77-row conditioning matrix.

Each prompt k keeps the first 4 token embeddings of its text (frozen) and
prepends L_k-4 learnable modifier rows; concatenating the seven prompts in
order yields the 77 x D matrix consumed by the denoiser's cross-attention.
Only the modifier rows train; text embeddings come from a frozen encoder.

The default encoder is hash-seeded so the repo runs with zero external
assets; embeddings exported offline from a pretrained text encoder can be
loaded from a container file instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, concat
from .container import read_container
from .exceptions import ConfigError, EncodingError, ShapeError
from .rng import gaussian, rng_for

__all__ = [
    "PromptSpec",
    "HashTextEncoder",
    "PrecomputedTextEncoder",
    "PromptBank",
    "PromptEmbedding",
    "pooled_prompt",
]

TOTAL_TOKENS = 77
FROZEN_ROWS = 4
MODIFIER_STD = 0.02

DEFAULT_TEXTS = ("person", "motion", "speed", "head", "body", "arms", "legs")
DEFAULT_BUDGET = (7, 12, 10, 10, 10, 14, 14)
ACTION_SLOT = 1  # texts[1] carries the per-sequence action class


@dataclass(frozen=True)
class PromptSpec:
    texts: tuple = DEFAULT_TEXTS
    token_budget: tuple = DEFAULT_BUDGET

    def __post_init__(self):
        if len(self.texts) != 7 or len(self.token_budget) != 7:
            raise ConfigError("prompt spec needs exactly 7 texts and 7 budgets")
        if sum(self.token_budget) != TOTAL_TOKENS:
            raise ConfigError(
                f"token budgets {self.token_budget} must sum to {TOTAL_TOKENS}"
            )
        if any(b < FROZEN_ROWS + 1 for b in self.token_budget):
            raise ConfigError("every prompt budget must be >= 5")

    def with_action(self, action: str | None) -> "PromptSpec":
        return replace(self, texts=self.texts[:ACTION_SLOT] + (action or "motion",) + self.texts[ACTION_SLOT + 1 :])

    @property
    def modifier_rows(self):
        return tuple(b - FROZEN_ROWS for b in self.token_budget)


class HashTextEncoder:
    """Deterministic stand-in for a frozen text encoder.

    Tokenizes on whitespace, adds begin/end markers, pads to 4 positions, and
    embeds each token as a seeded Gaussian vector keyed by the token string.
    The same string therefore always yields identical embeddings.
    """

    def __init__(self, embed_dim: int, seed: int = 0, scale: float = MODIFIER_STD):
        if embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {embed_dim}")
        self.embed_dim = embed_dim
        self.seed = seed
        self.scale = scale

    def encode(self, text: str) -> np.ndarray:
        tokens = ["<bos>"] + text.lower().split() + ["<eos>"]
        while len(tokens) < FROZEN_ROWS:
            tokens.append("<pad>")
        rows = [
            self.scale * gaussian(self.embed_dim, self.seed, "token", tok)
            for tok in tokens
        ]
        return np.stack(rows)


class PrecomputedTextEncoder:
    """Serves 4 x D blocks exported offline, keyed by exact prompt text."""

    def __init__(self, path):
        tensors, meta = read_container(path)
        texts = meta.get("texts", {})
        self._blocks = {}
        dims = set()
        for key, arr in tensors.items():
            if not key.endswith("/frozen"):
                continue
            text = texts.get(key[: -len("/frozen")])
            if text is None:
                raise ConfigError(f"{path}: entry {key!r} has no text in meta.texts")
            if arr.ndim != 2 or arr.shape[0] != FROZEN_ROWS:
                raise ConfigError(
                    f"{path}: entry {key!r} must be {FROZEN_ROWS} x D, got {arr.shape}"
                )
            self._blocks[text] = arr
            dims.add(arr.shape[1])
        if not self._blocks:
            raise ConfigError(f"{path}: no prompt embeddings found")
        if len(dims) != 1:
            raise ConfigError(f"{path}: inconsistent embedding dims {sorted(dims)}")
        self.embed_dim = dims.pop()

    def encode(self, text: str) -> np.ndarray:
        block = self._blocks.get(text)
        if block is None:
            raise EncodingError(
                f"no precomputed embedding for prompt text {text!r}; "
                f"export it or use the hash encoder"
            )
        return block


def init_modifiers(spec: PromptSpec, embed_dim: int, seed: int) -> list:
    """Learnable modifier rows, i.i.d. Gaussian(0, 0.02), one matrix per prompt."""
    if embed_dim < 1:
        raise ConfigError(f"embed_dim must be >= 1, got {embed_dim}")
    return [
        MODIFIER_STD * gaussian((rows, embed_dim), seed, "modifier", k)
        for k, rows in enumerate(spec.modifier_rows)
    ]


def encode_texts(spec: PromptSpec, encoder) -> list:
    """First 4 token embeddings per prompt text, in spec order."""
    blocks = []
    for k, text in enumerate(spec.texts):
        emb = np.asarray(encoder.encode(text))
        if emb.ndim != 2 or emb.shape[0] < FROZEN_ROWS:
            raise EncodingError(
                f"prompt {k} ({text!r}): encoder returned {emb.shape[0] if emb.ndim == 2 else '?'} "
                f"tokens, need >= {FROZEN_ROWS}"
            )
        blocks.append(np.array(emb[:FROZEN_ROWS], dtype=np.float64))
    return blocks


@dataclass
class PromptEmbedding:
    """Assembled 77 x D matrix plus its pooled summary vector."""

    tokens: Tensor
    pooled: Tensor
    spec: PromptSpec = field(default_factory=PromptSpec)

    @property
    def embed_dim(self):
        return self.tokens.shape[1]


def _pool_selector(spec: PromptSpec) -> np.ndarray:
    """(1, 77) matrix averaging the last row of each prompt block."""
    sel = np.zeros((1, TOTAL_TOKENS))
    ends = np.cumsum(spec.token_budget)
    sel[0, ends - 1] = 1.0 / len(spec.token_budget)
    return sel


def pooled_prompt(embedding: PromptEmbedding) -> np.ndarray:
    """Recompute the pooled vector from the assembled tokens."""
    sel = _pool_selector(embedding.spec)
    return (sel @ embedding.tokens.data)[0]


class PromptBank:
    """Frozen text tokens plus learnable modifiers for the 7 prompts.

    Modifiers are shared across action classes; frozen blocks are encoded per
    action text and cached. Assembled embeddings are immutable snapshots safe
    for concurrent readers, while the modifiers are mutated only by training.
    """

    def __init__(self, spec: PromptSpec, encoder, seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.encoder = encoder
        self.embed_dim = encoder.embed_dim
        self.dtype = np.dtype(dtype)
        self.modifiers = [
            Tensor(m.astype(self.dtype), requires_grad=True)
            for m in init_modifiers(spec, self.embed_dim, seed)
        ]
        self._frozen_cache: dict = {}

    def frozen_blocks(self, action: str | None = None) -> list:
        key = action or "motion"
        if key not in self._frozen_cache:
            blocks = encode_texts(self.spec.with_action(key), self.encoder)
            self._frozen_cache[key] = [b.astype(self.dtype) for b in blocks]
        return self._frozen_cache[key]

    def cached_actions(self) -> dict:
        """Snapshot of every action's frozen blocks encoded so far."""
        return {k: list(v) for k, v in self._frozen_cache.items()}

    def set_frozen_blocks(self, action: str | None, blocks) -> None:
        """Install externally provided 4 x D blocks (checkpoint restore)."""
        blocks = [np.asarray(b, dtype=self.dtype) for b in blocks]
        for k, b in enumerate(blocks):
            if b.shape != (FROZEN_ROWS, self.embed_dim):
                raise ShapeError(f"frozen block {k} has shape {b.shape}")
        self._frozen_cache[action or "motion"] = blocks

    def trainable(self) -> dict:
        return {f"prompt/{k}/modifier": m for k, m in enumerate(self.modifiers)}

    def assemble(self, action: str | None = None) -> PromptEmbedding:
        """Concatenate [modifiers; frozen 4 rows] per prompt into 77 x D."""
        frozen = self.frozen_blocks(action)
        pieces = []
        for k, (mod, txt) in enumerate(zip(self.modifiers, frozen)):
            if mod.shape[1] != txt.shape[1]:
                raise ShapeError(
                    f"prompt {k}: modifier dim {mod.shape[1]} != text dim {txt.shape[1]}"
                )
            pieces.append(mod)
            pieces.append(Tensor(txt))
        tokens = concat(pieces, axis=0)
        pooled = Tensor(_pool_selector(self.spec).astype(self.dtype)) @ tokens
        return PromptEmbedding(tokens=tokens, pooled=pooled, spec=self.spec)
