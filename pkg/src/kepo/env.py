"""Synthetic sparse-reward multiple-choice tasks with ID/OOD nuisance splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

MAX_LEN = 8
N_LETTERS = 4
N_FILLERS = 10
N_HINTS = N_LETTERS
N_NUISANCE = 4
N_CUE_PAIRS = 4


class Role(IntEnum):
    TAG_THINK_OPEN = 0
    TAG_THINK_CLOSE = 1
    TAG_ANSWER_OPEN = 2
    TAG_ANSWER_CLOSE = 3
    LETTER = 4
    FILLER = 5
    HINT_SYMBOL = 6
    END = 7


# token ids: 4 tags, 4 letters, 10 fillers, 4 hint symbols, END
THINK_OPEN = 0
THINK_CLOSE = 1
ANSWER_OPEN = 2
ANSWER_CLOSE = 3
LETTER_BASE = 4
FILLER_BASE = LETTER_BASE + N_LETTERS
HINT_BASE = FILLER_BASE + N_FILLERS
END = HINT_BASE + N_HINTS
VOCAB_SIZE = END + 1
BOS = VOCAB_SIZE  # only ever used as a "previous token" feature

LETTERS = "ABCD"


@dataclass(frozen=True)
class Token:
    id: int
    role: Role
    index: int = 0  # letter / filler / hint index within its role

    @property
    def name(self) -> str:
        if self.role is Role.LETTER:
            return LETTERS[self.index]
        if self.role is Role.FILLER:
            return f"F{self.index}"
        if self.role is Role.HINT_SYMBOL:
            return f"H{LETTERS[self.index]}"
        return {
            Role.TAG_THINK_OPEN: "<think>",
            Role.TAG_THINK_CLOSE: "</think>",
            Role.TAG_ANSWER_OPEN: "<answer>",
            Role.TAG_ANSWER_CLOSE: "</answer>",
            Role.END: "<end>",
        }[self.role]


def token(tid: int) -> Token:
    if not 0 <= tid < VOCAB_SIZE:
        raise ValueError(f"token id {tid} outside vocabulary of size {VOCAB_SIZE}")
    if tid < LETTER_BASE:
        return Token(tid, Role(tid))
    if tid < FILLER_BASE:
        return Token(tid, Role.LETTER, tid - LETTER_BASE)
    if tid < HINT_BASE:
        return Token(tid, Role.FILLER, tid - FILLER_BASE)
    if tid < END:
        return Token(tid, Role.HINT_SYMBOL, tid - HINT_BASE)
    return Token(tid, Role.END)


VOCAB = tuple(token(i) for i in range(VOCAB_SIZE))


def letter_token(letter: int) -> int:
    return LETTER_BASE + letter


def filler_token(k: int) -> int:
    return FILLER_BASE + k


def hint_token(letter: int) -> int:
    return HINT_BASE + letter


def is_letter(tid: int) -> bool:
    return LETTER_BASE <= tid < FILLER_BASE


def is_filler(tid: int) -> bool:
    return FILLER_BASE <= tid < HINT_BASE


def is_hint(tid: int) -> bool:
    return HINT_BASE <= tid < END


def render(tokens: Iterable[int]) -> str:
    return " ".join(VOCAB[t].name for t in tokens)


@dataclass(frozen=True)
class TaskFamily:
    """A cue->letter lookup table plus the format's minimum think length."""

    name: str
    table: tuple[int, int, int, int]  # indexed by 2*b0 + b1
    min_filler: int


FAMILIES = {
    "parity": TaskFamily("parity", (0, 1, 1, 0), min_filler=1),  # XOR-to-{A,B}
    "direct": TaskFamily("direct", (0, 0, 1, 1), min_filler=0),  # first bit to {A,B}
}


@dataclass(frozen=True)
class NuisanceFamily:
    mean: float
    scale: float


# index 0 is the training (ID) distribution; the rest are covariate shifts
NUISANCE_FAMILIES = (
    NuisanceFamily(0.0, 0.5),
    NuisanceFamily(1.5, 0.5),
    NuisanceFamily(-1.5, 0.5),
    NuisanceFamily(0.0, 2.0),
    NuisanceFamily(2.5, 1.0),
)
MAX_OOD_SPLITS = len(NUISANCE_FAMILIES) - 1


@dataclass(frozen=True)
class Context:
    task_family: str
    cue_bits: tuple[int, int]
    nuisance: tuple[float, ...]
    domain_tag: str = "ID"
    hint: Optional[int] = None
    revealed_answer: Optional[int] = None

    @property
    def cue_index(self) -> int:
        return 2 * self.cue_bits[0] + self.cue_bits[1]

    @property
    def family(self) -> TaskFamily:
        return FAMILIES[self.task_family]

    def with_hint(self, hint: int, answer: int) -> "Context":
        return replace(self, hint=hint, revealed_answer=answer)

    def with_answer(self, answer: int) -> "Context":
        return replace(self, hint=None, revealed_answer=answer)

    def plain(self) -> "Context":
        if self.hint is None and self.revealed_answer is None:
            return self
        return replace(self, hint=None, revealed_answer=None)


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    accuracy: int

    @property
    def total(self) -> int:
        return self.format + self.accuracy


def correct_letter(ctx: Context) -> int:
    return ctx.family.table[ctx.cue_index]


def parse_answer(tokens: Sequence[int]) -> Optional[int]:
    """Letter index of the closing answer field ``<answer> L </answer> [<end>]``.

    The think block is not consulted, so an answer can parse from a
    response that fails the format check.
    """
    toks = list(tokens)
    if toks and toks[-1] == END:
        toks.pop()
    if len(toks) < 3:
        return None
    ao, body, ac = toks[-3:]
    if ao == ANSWER_OPEN and is_letter(body) and ac == ANSWER_CLOSE:
        return body - LETTER_BASE
    return None


def format_ok(tokens: Sequence[int], min_filler: int = 0) -> bool:
    toks = list(tokens)
    if toks and toks[-1] == END:
        toks.pop()
    if len(toks) < 5 + min_filler or toks[0] != THINK_OPEN:
        return False
    body = toks[1:-4]
    if len(body) < min_filler or not all(is_filler(t) for t in body):
        return False
    tc, ao, letter, ac = toks[-4:]
    return tc == THINK_CLOSE and ao == ANSWER_OPEN and is_letter(letter) and ac == ANSWER_CLOSE


def score_trajectory(ctx: Context, tokens: Sequence[int]) -> RewardBreakdown:
    fmt = int(format_ok(tokens, ctx.family.min_filler))
    parsed = parse_answer(tokens)
    acc = int(parsed is not None and parsed == correct_letter(ctx))
    return RewardBreakdown(fmt, acc)


@dataclass(frozen=True)
class TaskSet:
    train_contexts: tuple[Context, ...]
    eval_splits: dict[str, tuple[Context, ...]]
    answer_rule: str
    cliff_mode: bool
    corrupted: bool = False
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def family(self) -> TaskFamily:
        return FAMILIES[self.answer_rule]


def _draw_contexts(rng: np.random.Generator, n: int, family: str, tag: str,
                   nuis: NuisanceFamily) -> tuple[Context, ...]:
    cues = rng.integers(0, 2, size=(n, 2))
    noise = rng.normal(nuis.mean, nuis.scale, size=(n, N_NUISANCE))
    return tuple(
        Context(family, (int(c[0]), int(c[1])), tuple(float(v) for v in z), tag)
        for c, z in zip(cues, noise)
    )


def make_task_set(seed: int, n_train: int, n_eval_per_split: int, n_ood_splits: int,
                  cliff_mode: bool, corrupted: bool = False) -> TaskSet:
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    if n_ood_splits < 1:
        raise ValueError("n_ood_splits must be >= 1")
    if n_ood_splits > MAX_OOD_SPLITS:
        raise ValueError(f"n_ood_splits={n_ood_splits} exceeds the {MAX_OOD_SPLITS} "
                         "configured nuisance families")
    if corrupted and not cliff_mode:
        raise ValueError("the corrupted-context variant is defined for cliff tasks only")
    family = "parity" if cliff_mode else "direct"
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A5C]))
    train = _draw_contexts(rng, n_train, family, "ID", NUISANCE_FAMILIES[0])
    splits = {"ID": _draw_contexts(rng, n_eval_per_split, family, "ID", NUISANCE_FAMILIES[0])}
    for k in range(1, n_ood_splits + 1):
        tag = f"OOD{k}"
        splits[tag] = _draw_contexts(rng, n_eval_per_split, family, tag, NUISANCE_FAMILIES[k])
    return TaskSet(train, splits, family, cliff_mode, corrupted, seed)


def _context_record(ctx: Context, split: str) -> dict:
    return {
        "split": split,
        "task_family": ctx.task_family,
        "cue_bits": list(ctx.cue_bits),
        "nuisance": list(ctx.nuisance),
        "domain_tag": ctx.domain_tag,
    }


def save_task_set(ts: TaskSet, path: str | Path) -> None:
    lines = [json.dumps({"kind": "taskset", "answer_rule": ts.answer_rule,
                         "cliff_mode": ts.cliff_mode, "corrupted": ts.corrupted,
                         "seed": ts.seed, "splits": list(ts.eval_splits)})]
    lines += [json.dumps(_context_record(c, "train")) for c in ts.train_contexts]
    for name, ctxs in ts.eval_splits.items():
        lines += [json.dumps(_context_record(c, name)) for c in ctxs]
    Path(path).write_text("\n".join(lines) + "\n")


def load_task_set(path: str | Path) -> TaskSet:
    rows = [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows or rows[0].get("kind") != "taskset":
        raise ValueError(f"{path}: missing taskset header record")
    head, body = rows[0], rows[1:]
    train: list[Context] = []
    splits: dict[str, list[Context]] = {name: [] for name in head["splits"]}
    for r in body:
        ctx = Context(r["task_family"], tuple(r["cue_bits"]), tuple(r["nuisance"]), r["domain_tag"])
        (train if r["split"] == "train" else splits[r["split"]]).append(ctx)
    return TaskSet(tuple(train), {k: tuple(v) for k, v in splits.items()}, head["answer_rule"],
                   head["cliff_mode"], head["corrupted"], head["seed"])
