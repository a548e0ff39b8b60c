"""Feature blocks over (context, prefix, step) and their flat integer layout.

The layout array is what the numeric kernels consume: ``layout[b]`` is the
column offset of block ``b`` in the feature vector, or -1 when the block is
absent from the map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env

BLOCK_SIZES = {
    "bias": 1,
    "step": env.MAX_LEN,
    "prev_token": env.VOCAB_SIZE + 1,
    "cue": env.N_CUE_PAIRS,
    "cue_at_answer": env.N_CUE_PAIRS,
    "nuisance": env.N_NUISANCE,
    "hint": 1 + env.N_HINTS,
    "hint_at_answer": env.N_HINTS,
    "revealed": env.N_LETTERS,
    "revealed_at_answer": env.N_LETTERS,
    "hinted_prev_token": env.VOCAB_SIZE + 1,
    "offgrammar_cue_at_answer": env.N_CUE_PAIRS,
}
# kernel block codes; order is part of the weight-file contract
BLOCK_CODES = {name: i for i, name in enumerate(BLOCK_SIZES)}
N_BLOCKS = len(BLOCK_SIZES)

STUDENT_BLOCKS = (
    "bias", "step", "prev_token", "cue", "cue_at_answer", "nuisance",
    "hint", "hint_at_answer", "revealed", "revealed_at_answer", "hinted_prev_token",
)
# the teacher may additionally see whether its prefix has left the grammar
TEACHER_EXTRA_BLOCKS = ("offgrammar_cue_at_answer",)

MAX_DIM = 128


@dataclass(frozen=True)
class FeatureMap:
    blocks: tuple[str, ...] = STUDENT_BLOCKS

    def __post_init__(self):
        unknown = [b for b in self.blocks if b not in BLOCK_SIZES]
        if unknown:
            raise ValueError(f"unknown feature blocks: {unknown}")
        if len(set(self.blocks)) != len(self.blocks):
            raise ValueError("duplicate feature blocks")
        if self.dim > MAX_DIM:
            raise ValueError(f"feature dimension {self.dim} exceeds {MAX_DIM}")

    @property
    def dim(self) -> int:
        return sum(BLOCK_SIZES[b] for b in self.blocks)

    def offset(self, block: str) -> int:
        off = 0
        for b in self.blocks:
            if b == block:
                return off
            off += BLOCK_SIZES[b]
        raise KeyError(block)

    def column(self, block: str, index: int = 0) -> int:
        if not 0 <= index < BLOCK_SIZES[block]:
            raise IndexError(f"{block}[{index}]")
        return self.offset(block) + index

    def layout(self) -> np.ndarray:
        out = np.full(N_BLOCKS, -1, dtype=np.int64)
        for b in self.blocks:
            out[BLOCK_CODES[b]] = self.offset(b)
        return out

    def to_dict(self) -> dict:
        return {"blocks": list(self.blocks)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMap":
        return cls(tuple(d["blocks"]))


@dataclass(frozen=True)
class EncodedContext:
    """Kernel-facing view of a Context: small ints plus the squashed nuisance."""

    cue: int
    hint: int  # hint letter index, -1 if absent
    revealed: int  # -1 if absent
    nuisance: np.ndarray  # tanh-squashed, float64, read-only


def encode_context(ctx: env.Context) -> EncodedContext:
    nuis = np.tanh(np.asarray(ctx.nuisance, dtype=np.float64))
    nuis.setflags(write=False)
    hint = -1 if ctx.hint is None else ctx.hint - env.HINT_BASE
    revealed = -1 if ctx.revealed_answer is None else int(ctx.revealed_answer)
    return EncodedContext(ctx.cue_index, hint, revealed, nuis)


# Incremental grammar tracker shared by the kernels (states of the format
# automaton with unbounded filler count; OFF once the prefix cannot be
# completed into a well-formed answer).
G_START, G_THINK, G_CLOSED, G_ANS_OPEN, G_LETTER, G_DONE, G_END, G_OFF = range(8)


def grammar_next(state: int, tok: int) -> int:
    if state == G_START:
        return G_THINK if tok == env.THINK_OPEN else G_OFF
    if state == G_THINK:
        if env.is_filler(tok):
            return G_THINK
        return G_CLOSED if tok == env.THINK_CLOSE else G_OFF
    if state == G_CLOSED:
        return G_ANS_OPEN if tok == env.ANSWER_OPEN else G_OFF
    if state == G_ANS_OPEN:
        return G_LETTER if env.is_letter(tok) else G_OFF
    if state == G_LETTER:
        return G_DONE if tok == env.ANSWER_CLOSE else G_OFF
    if state == G_DONE:
        return G_END if tok == env.END else G_OFF
    return G_OFF
