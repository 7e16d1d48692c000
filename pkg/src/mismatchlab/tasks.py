"""Synthetic verifiable-reward tasks.

Three binary-reward task kinds keep reward variance alive across groups:
parity of the non-EOS token count, token-id sum modulo the vocabulary
size, and copying a prescribed short prefix. Each kind has both
satisfying and non-satisfying completions within any max_len.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .policy import Vocabulary


class TaskKind(enum.Enum):
    PARITY_MATCH = "parity_match"
    TARGET_SUM = "target_sum"
    COPY_PREFIX = "copy_prefix"


_KINDS = (TaskKind.PARITY_MATCH, TaskKind.TARGET_SUM, TaskKind.COPY_PREFIX)


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    prompt_id: int
    target: int
    max_len: int

    def __post_init__(self) -> None:
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def prefix_length(task: TaskSpec) -> int:
    """Prescribed-prefix length for COPY_PREFIX tasks (capped by max_len)."""
    return min(2, task.max_len)


# Distinct COPY_PREFIX patterns in the prompt pool; small enough that
# prompts recur and per-prompt behavior is learnable.
COPY_PATTERN_POOL = 12

_PROMPT_ID_BASE = {
    TaskKind.PARITY_MATCH: 100,
    TaskKind.TARGET_SUM: 200,
    TaskKind.COPY_PREFIX: 300,
}


def prompt_id_for(kind: TaskKind, target: int) -> int:
    """Stable prompt identity: equal (kind, target) tasks share a prompt."""
    return _PROMPT_ID_BASE[kind] + target


def prefix_pattern(task: TaskSpec, vocab: Vocabulary) -> tuple[int, ...]:
    """Decode the COPY_PREFIX target payload into non-EOS token ids.

    The target is a base-(size-1) number whose digits map onto the
    vocabulary with the EOS id skipped, so a pattern can never terminate
    the rollout early.
    """
    base = vocab.size - 1
    k = prefix_length(task)
    digits = []
    value = task.target
    for _ in range(k):
        digits.append(value % base)
        value //= base
    return tuple(d if d < vocab.eos_id else d + 1 for d in digits)


def copy_target_range(vocab: Vocabulary, max_len: int) -> int:
    k = min(2, max_len)
    return min((vocab.size - 1) ** k, COPY_PATTERN_POOL)


def sample_prompt(stream: np.random.Generator, vocab: Vocabulary, max_len: int) -> TaskSpec:
    """Draw a task uniformly over kinds and over the kind's parameter range.

    Draw order (one integers() call each, relied on by replay tests):
    kind index in [0, 3), then the kind-specific target range: parity in
    [0, 2), sum target in [0, size), prefix payload in
    [0, copy_target_range). The prompt id is derived from (kind, target)
    so identical tasks share a prompt identity.
    """
    kind = _KINDS[int(stream.integers(0, len(_KINDS)))]
    if kind is TaskKind.PARITY_MATCH:
        target = int(stream.integers(0, 2))
    elif kind is TaskKind.TARGET_SUM:
        target = int(stream.integers(0, vocab.size))
    else:
        target = int(stream.integers(0, copy_target_range(vocab, max_len)))
    return TaskSpec(
        kind=kind, prompt_id=prompt_id_for(kind, target), target=target, max_len=max_len
    )


def verify(task: TaskSpec, completion: tuple[int, ...] | list[int], vocab: Vocabulary) -> float:
    """Binary reward: 1.0 iff the completion satisfies the task predicate."""
    tokens = tuple(completion)
    for t in tokens:
        if not 0 <= t < vocab.size:
            raise ValueError(f"completion token {t} outside vocabulary")
    if task.kind is TaskKind.PARITY_MATCH:
        count = sum(1 for t in tokens if t != vocab.eos_id)
        return 1.0 if count % 2 == task.target else 0.0
    if task.kind is TaskKind.TARGET_SUM:
        return 1.0 if sum(tokens) % vocab.size == task.target else 0.0
    pattern = prefix_pattern(task, vocab)
    k = len(pattern)
    return 1.0 if len(tokens) >= k and tokens[:k] == pattern else 0.0
