"""Synthetic verifiable-reward tasks: sampling and predicates."""

from __future__ import annotations

import numpy as np
import pytest

from mismatchlab import TaskKind, TaskSpec, Vocabulary, prefix_pattern, sample_prompt, verify
from mismatchlab.tasks import copy_target_range, prefix_length, prompt_id_for


def replay_oracle(stream: np.random.Generator, vocab: Vocabulary, max_len: int) -> TaskSpec:
    """Straight-line mirror of the documented draw order."""
    kinds = (TaskKind.PARITY_MATCH, TaskKind.TARGET_SUM, TaskKind.COPY_PREFIX)
    kind = kinds[int(stream.integers(0, 3))]
    if kind is TaskKind.PARITY_MATCH:
        target = int(stream.integers(0, 2))
    elif kind is TaskKind.TARGET_SUM:
        target = int(stream.integers(0, vocab.size))
    else:
        target = int(stream.integers(0, copy_target_range(vocab, max_len)))
    return TaskSpec(kind, prompt_id_for(kind, target), target, max_len)


def test_sample_prompt_replays_from_fixed_seed() -> None:
    vocab = Vocabulary(size=8)
    a = np.random.default_rng(404)
    b = np.random.default_rng(404)
    for _ in range(50):
        assert sample_prompt(a, vocab, 8) == replay_oracle(b, vocab, 8)


def test_kind_frequencies_one_third_within_three_sigma() -> None:
    vocab = Vocabulary(size=8)
    stream = np.random.default_rng(7)
    n = 10_000
    counts = {k: 0 for k in TaskKind}
    for _ in range(n):
        counts[sample_prompt(stream, vocab, 8).kind] += 1
    bound = 3 * np.sqrt((1 / 3) * (2 / 3) / n)
    for k in TaskKind:
        assert abs(counts[k] / n - 1 / 3) <= bound


def test_equal_tasks_share_prompt_identity() -> None:
    vocab = Vocabulary(size=8)
    stream = np.random.default_rng(2)
    seen: dict[tuple, int] = {}
    for _ in range(300):
        t = sample_prompt(stream, vocab, 8)
        key = (t.kind, t.target)
        if key in seen:
            assert seen[key] == t.prompt_id
        seen[key] = t.prompt_id


def test_parity_match_definitions() -> None:
    vocab = Vocabulary(size=8, eos_id=0)
    even = TaskSpec(TaskKind.PARITY_MATCH, 100, 0, 8)
    odd = TaskSpec(TaskKind.PARITY_MATCH, 101, 1, 8)
    assert verify(even, (3, 5), vocab) == 1.0
    assert verify(even, (3, 5, 0), vocab) == 1.0  # trailing EOS not counted
    assert verify(odd, (3, 5), vocab) == 0.0
    assert verify(odd, (3,), vocab) == 1.0
    assert verify(even, (), vocab) == 1.0


def test_target_sum_definitions() -> None:
    vocab = Vocabulary(size=8, eos_id=0)
    task = TaskSpec(TaskKind.TARGET_SUM, 203, 3, 8)
    assert verify(task, (), vocab) == 0.0  # empty sum is 0 != 3
    assert verify(task, (3,), vocab) == 1.0
    assert verify(task, (5, 6), vocab) == 1.0  # 11 mod 8 == 3
    zero = TaskSpec(TaskKind.TARGET_SUM, 200, 0, 8)
    assert verify(zero, (), vocab) == 1.0


def test_copy_prefix_definitions() -> None:
    vocab = Vocabulary(size=8, eos_id=0)
    task = TaskSpec(TaskKind.COPY_PREFIX, 305, 5, 8)
    pattern = prefix_pattern(task, vocab)
    assert len(pattern) == prefix_length(task) == 2
    assert all(t != vocab.eos_id for t in pattern)
    assert verify(task, pattern, vocab) == 1.0
    assert verify(task, pattern + (4, 0), vocab) == 1.0
    assert verify(task, (pattern[0],), vocab) == 0.0
    assert verify(task, ((pattern[0] + 1) % 8, pattern[1]), vocab) == 0.0


def test_verify_agrees_with_independent_predicate_oracle() -> None:
    vocab = Vocabulary(size=8, eos_id=0)
    rng = np.random.default_rng(9)

    def oracle(task: TaskSpec, completion: tuple[int, ...]) -> float:
        if task.kind is TaskKind.PARITY_MATCH:
            return 1.0 if len([t for t in completion if t != 0]) % 2 == task.target else 0.0
        if task.kind is TaskKind.TARGET_SUM:
            total = 0
            for t in completion:
                total += t
            return 1.0 if total % 8 == task.target else 0.0
        pat = prefix_pattern(task, vocab)
        if len(completion) < len(pat):
            return 0.0
        for a, b in zip(completion, pat):
            if a != b:
                return 0.0
        return 1.0

    for _ in range(500):
        task = sample_prompt(rng, vocab, 8)
        completion = tuple(int(t) for t in rng.integers(0, 8, size=rng.integers(0, 9)))
        assert verify(task, completion, vocab) == oracle(task, completion)


def test_verify_is_pure_and_deterministic() -> None:
    vocab = Vocabulary(size=8)
    task = TaskSpec(TaskKind.TARGET_SUM, 202, 2, 8)
    completion = (1, 1)
    assert verify(task, completion, vocab) == verify(task, completion, vocab)


def test_each_kind_has_satisfying_and_non_satisfying_completions() -> None:
    vocab = Vocabulary(size=8, eos_id=0)
    rng = np.random.default_rng(31)
    for _ in range(60):
        task = sample_prompt(rng, vocab, max_len=4)
        outcomes = set()
        # brute force over completions of length <= 2 (within any max_len >= 2)
        outcomes.add(verify(task, (), vocab))
        for a in range(8):
            outcomes.add(verify(task, (a,), vocab))
            for b in range(8):
                outcomes.add(verify(task, (a, b), vocab))
        assert outcomes == {0.0, 1.0}


def test_verify_rejects_out_of_vocabulary_tokens() -> None:
    vocab = Vocabulary(size=8)
    task = TaskSpec(TaskKind.PARITY_MATCH, 100, 0, 8)
    with pytest.raises(ValueError):
        verify(task, (9,), vocab)
