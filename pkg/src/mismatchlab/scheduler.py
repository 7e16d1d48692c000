"""Deterministic discrete-event simulator for budget-partitioned rollouts.

Time model: one tick generates one token for every active rollout in
parallel (idealized batched inference); rollout-phase cost is measured
in ticks and weight sync adds a fixed tick cost per iteration.

An iteration first ages and purges carried-over rollouts, then generates
until the completed-token counter reaches the token budget, refilling
the inference pool from a pending queue and fresh prompts whenever
occupancy drops. Each sampled prompt spawns a full sibling group whose
members are admitted individually as capacity frees, so the pool never
exceeds its capacity. Completed rollouts wait in the training pool until
every sibling is terminal, at which point the group is emitted for
training; unfinished rollouts carry over and resume under the updated
parameters, and a rollout that outlives the retention threshold takes
its whole group with it (the group could never be trained otherwise).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .discrepancy import DiscrepancySample, make_probes, measure
from .errors import TickCapError
from .objective import (
    LossBreakdown,
    MaskingBounds,
    ObjectiveConfig,
    PromptGroup,
    TokenRecord,
    empty_breakdown,
    group_advantages,
    momentum_update,
    objective_and_grad,
    sgd_update,
)
from .policy import (
    Context,
    Engine,
    FEATURE_WINDOW,
    PolicyParams,
    Vocabulary,
    batched_log_softmax,
    batched_train_logits,
    feature_rows,
    noise_keys,
    perturb_logits,
)
from .tasks import TaskSpec, sample_prompt, verify

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class BudgetConfig:
    """Inputs of the budget-partitioned generation loop."""

    token_budget: int
    infer_capacity: int
    retention_threshold: int = 3
    train_capacity: int | None = None  # recorded, deliberately unenforced
    sync_cost_ticks: int = 0
    prompts_per_iteration: int = 12
    max_total_prompts: int | None = None
    tick_cap: int = 1_000_000

    def __post_init__(self) -> None:
        if self.token_budget < 1:
            raise ValueError("token_budget must be >= 1")
        if self.infer_capacity < 1:
            raise ValueError("infer_capacity must be >= 1")
        if self.retention_threshold < 0:
            raise ValueError("retention_threshold must be nonnegative")
        if self.sync_cost_ticks < 0:
            raise ValueError("sync_cost_ticks must be nonnegative")
        if self.prompts_per_iteration < 1:
            raise ValueError("prompts_per_iteration must be >= 1")


@dataclass
class Rollout:
    """One trajectory with per-token engine log probs and an owned RNG stream."""

    task: TaskSpec
    stream: np.random.Generator
    uid: int
    group_uid: int
    tokens: list[TokenRecord] = field(default_factory=list)
    terminal: bool = False
    retention_period: int = 0
    target_len: int | None = None

    @property
    def length(self) -> int:
        return len(self.tokens)

    def token_ids(self) -> tuple[int, ...]:
        return tuple(rec.token for rec in self.tokens)

    def context_now(self) -> Context:
        window = tuple(rec.token for rec in self.tokens[-FEATURE_WINDOW:])
        return Context(self.task.prompt_id, window)


@dataclass
class StepReport:
    iteration: int
    rollout_ticks: int
    trained_tokens: int
    purged_rollouts: int
    resumed_rollouts: int
    completed_rollouts: int
    stale_token_fraction: float
    emitted_groups: int = 0
    emitted_tokens: int = 0
    reward_mean: float = math.nan


class SyntheticPromptSource:
    """Endless sampled tasks; optionally draws a target length per rollout."""

    def __init__(
        self,
        vocab: Vocabulary,
        max_len: int,
        length_model: str = "policy",
        median: float = 32.0,
        sigma: float = 1.0,
    ) -> None:
        if length_model not in ("policy", "lognormal"):
            raise ValueError(f"unknown length model {length_model!r}")
        self.vocab = vocab
        self.max_len = max_len
        self.length_model = length_model
        self.median = median
        self.sigma = sigma

    def next_prompt(
        self, stream: np.random.Generator, group_size: int
    ) -> tuple[TaskSpec, list[int | None]] | None:
        task = sample_prompt(stream, self.vocab, self.max_len)
        if self.length_model == "policy":
            return task, [None] * group_size
        draws = stream.lognormal(math.log(self.median), self.sigma, size=group_size)
        lengths = [int(min(max(round(x), 1), self.max_len)) for x in draws]
        return task, lengths


class ScriptedPromptSource:
    """Finite list of (task, per-sibling target lengths) pairs, for fixtures."""

    def __init__(self, prompts: list[tuple[TaskSpec, list[int]]]) -> None:
        self.prompts = list(prompts)
        self.cursor = 0

    def next_prompt(
        self, stream: np.random.Generator, group_size: int
    ) -> tuple[TaskSpec, list[int | None]] | None:
        if self.cursor >= len(self.prompts):
            return None
        task, lengths = self.prompts[self.cursor]
        self.cursor += 1
        if len(lengths) != group_size:
            raise ValueError("scripted prompt must provide one target length per sibling")
        return task, list(lengths)


@dataclass
class _GroupSlot:
    task: TaskSpec
    members: list[Rollout]
    purged: bool = False
    emitted: bool = False


@dataclass
class SchedulerState:
    """Inference pool, pending queue, training pool, and audit bookkeeping."""

    vocab: Vocabulary
    infer: Engine
    temperature: float
    source: SyntheticPromptSource | ScriptedPromptSource
    prompt_stream: np.random.Generator
    seed: int
    infer_pool: list[Rollout] = field(default_factory=list)
    pending: deque[Rollout] = field(default_factory=deque)
    train_pool: list[Rollout] = field(default_factory=list)
    groups: dict[int, _GroupSlot] = field(default_factory=dict)
    counter: int = 0
    iteration: int = 0
    tick_clock: int = 0
    next_uid: int = 0
    next_group_uid: int = 0
    prompts_sampled: int = 0
    spawned_uids: set[int] = field(default_factory=set)
    purged_uids: set[int] = field(default_factory=set)
    trained_uids: set[int] = field(default_factory=set)


def make_state(
    seed: int,
    vocab: Vocabulary,
    infer: Engine,
    source: SyntheticPromptSource | ScriptedPromptSource,
    temperature: float = 1.0,
) -> SchedulerState:
    prompt_stream = np.random.default_rng(np.random.SeedSequence((seed & _MASK64, 1)))
    return SchedulerState(
        vocab=vocab,
        infer=infer,
        temperature=temperature,
        source=source,
        prompt_stream=prompt_stream,
        seed=seed,
    )


def _rollout_stream(seed: int, uid: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed & _MASK64, 2, uid)))


def _spawn_group(state: SchedulerState, group_cfg: ObjectiveConfig) -> bool:
    """Sample one prompt and queue its sibling rollouts; False when exhausted."""
    drawn = state.source.next_prompt(state.prompt_stream, group_cfg.group_size)
    if drawn is None:
        return False
    task, lengths = drawn
    group_uid = state.next_group_uid
    state.next_group_uid += 1
    members: list[Rollout] = []
    for target in lengths:
        uid = state.next_uid
        state.next_uid += 1
        rollout = Rollout(
            task=task,
            stream=_rollout_stream(state.seed, uid),
            uid=uid,
            group_uid=group_uid,
            target_len=target,
        )
        members.append(rollout)
        state.pending.append(rollout)
        state.spawned_uids.add(uid)
    state.groups[group_uid] = _GroupSlot(task=task, members=members)
    state.prompts_sampled += 1
    return True


def _refill(state: SchedulerState, cfg: BudgetConfig, group_cfg: ObjectiveConfig, sampled_this_iter: int) -> int:
    """Admit pending rollouts and sample new prompts while capacity allows."""
    while len(state.infer_pool) < cfg.infer_capacity:
        if state.pending:
            state.infer_pool.append(state.pending.popleft())
            continue
        if sampled_this_iter >= cfg.prompts_per_iteration:
            break
        if cfg.max_total_prompts is not None and state.prompts_sampled >= cfg.max_total_prompts:
            break
        if not _spawn_group(state, group_cfg):
            break
        sampled_this_iter += 1
    return sampled_this_iter


def _is_terminal(rollout: Rollout, vocab: Vocabulary) -> bool:
    if rollout.target_len is not None:
        return rollout.length >= rollout.target_len
    last = rollout.tokens[-1].token
    return last == vocab.eos_id or rollout.length >= rollout.task.max_len


def _generate_tick(rollouts: list[Rollout], params: PolicyParams, state: SchedulerState) -> None:
    """One parallel token for every listed rollout, batched across the pool.

    Each rollout samples from its own stream, so pool scheduling order
    never perturbs another rollout's token sequence.
    """
    n = len(rollouts)
    feats = np.empty((n, 4), dtype=np.intp)
    keys_fixed = np.empty(n, dtype=np.uint64)
    keys_version = np.empty(n, dtype=np.uint64)
    infer = state.infer
    for i, rollout in enumerate(rollouts):
        toks = rollout.tokens
        last = toks[-1].token if toks else -1
        prev = toks[-2].token if len(toks) >= 2 else -1
        feats[i] = feature_rows(rollout.task.prompt_id, prev, last, params.n_features)
        keys_fixed[i], keys_version[i] = noise_keys(
            infer, params.version_id, rollout.task.prompt_id, prev, last
        )
    train_logits = batched_train_logits(params, feats, state.temperature)
    infer_logits = perturb_logits(train_logits, keys_fixed, keys_version, infer.mismatch_scale)
    lp_inf_rows, probs = batched_log_softmax(infer_logits)
    lp_tr_rows, _ = batched_log_softmax(train_logits)
    cdf = np.cumsum(probs, axis=1)
    width = probs.shape[1]
    for i, rollout in enumerate(rollouts):
        u = rollout.stream.random()
        token = min(int(np.searchsorted(cdf[i], u, side="right")), width - 1)
        rollout.tokens.append(
            TokenRecord(
                token=token,
                logp_infer_old=float(lp_inf_rows[i, token]),
                logp_train_old=float(lp_tr_rows[i, token]),
                logp_train_cur=float(lp_tr_rows[i, token]),
                gen_version=params.version_id,
            )
        )


def _purge_boundary(state: SchedulerState, cfg: BudgetConfig) -> int:
    """Age carried-over rollouts, purge overextended ones with their groups."""
    for rollout in state.infer_pool:
        rollout.retention_period += 1
    dead_groups = {
        r.group_uid for r in state.infer_pool if r.retention_period > cfg.retention_threshold
    }
    if not dead_groups:
        return 0
    purged = 0
    for group_uid in dead_groups:
        slot = state.groups[group_uid]
        slot.purged = True
        for member in slot.members:
            state.purged_uids.add(member.uid)
            purged += 1
    state.infer_pool = [r for r in state.infer_pool if r.group_uid not in dead_groups]
    state.pending = deque(r for r in state.pending if r.group_uid not in dead_groups)
    state.train_pool = [r for r in state.train_pool if r.group_uid not in dead_groups]
    return purged


def _emit_groups(state: SchedulerState, params_version: int) -> tuple[list[PromptGroup], int, int]:
    """Emit every group whose siblings are all terminal, in group order."""
    ready: list[int] = []
    for group_uid in sorted(state.groups):
        slot = state.groups[group_uid]
        if slot.emitted or slot.purged:
            continue
        if all(m.terminal for m in slot.members):
            ready.append(group_uid)
    emitted: list[PromptGroup] = []
    stale = 0
    total = 0
    for group_uid in ready:
        slot = state.groups[group_uid]
        slot.emitted = True
        rewards = [verify(slot.task, m.token_ids(), state.vocab) for m in slot.members]
        advantages = group_advantages(rewards)
        emitted.append(
            PromptGroup(
                task=slot.task,
                rollouts=list(slot.members),
                rewards=[float(r) for r in rewards],
                advantages=[float(a) for a in advantages],
            )
        )
        for member in slot.members:
            state.trained_uids.add(member.uid)
            total += member.length
            stale += sum(1 for rec in member.tokens if rec.gen_version < params_version)
    emitted_uids = {m.uid for g in emitted for m in g.rollouts}
    state.train_pool = [r for r in state.train_pool if r.uid not in emitted_uids]
    return emitted, total, stale


def run_iteration(
    state: SchedulerState,
    params_t: PolicyParams,
    cfg: BudgetConfig,
    group_cfg: ObjectiveConfig,
    trace: list | None = None,
) -> tuple[StepReport, list[PromptGroup]]:
    """One budget-partitioned iteration; returns the report and emitted groups."""
    purged = _purge_boundary(state, cfg)
    resumed = sum(1 for r in state.infer_pool if r.tokens)

    state.counter = 0
    ticks = 0
    completed = 0
    sampled_this_iter = 0
    while state.counter < cfg.token_budget:
        sampled_this_iter = _refill(state, cfg, group_cfg, sampled_this_iter)
        if not state.infer_pool:
            break
        if ticks >= cfg.tick_cap:
            raise TickCapError(
                f"budget {cfg.token_budget} unreachable within {cfg.tick_cap} ticks"
            )
        active = len(state.infer_pool)
        _generate_tick(state.infer_pool, params_t, state)
        finished_this_tick: list[Rollout] = []
        survivors: list[Rollout] = []
        for rollout in state.infer_pool:
            if _is_terminal(rollout, state.vocab):
                rollout.terminal = True
                finished_this_tick.append(rollout)
            else:
                survivors.append(rollout)
        state.infer_pool = survivors
        for rollout in finished_this_tick:
            state.counter += rollout.length
            state.train_pool.append(rollout)
            completed += 1
        ticks += 1
        state.tick_clock += 1
        if trace is not None:
            trace.append(
                {
                    "tick": state.tick_clock,
                    "active": active,
                    "completed": len(finished_this_tick),
                    "counter": state.counter,
                    "pool_after": len(state.infer_pool),
                }
            )

    groups, emitted_tokens, stale_tokens = _emit_groups(state, params_t.version_id)
    report = StepReport(
        iteration=state.iteration,
        rollout_ticks=ticks,
        trained_tokens=state.counter,
        purged_rollouts=purged,
        resumed_rollouts=resumed,
        completed_rollouts=completed,
        stale_token_fraction=stale_tokens / emitted_tokens if emitted_tokens else 0.0,
        emitted_groups=len(groups),
        emitted_tokens=emitted_tokens,
        reward_mean=_groups_reward_mean(groups),
    )
    state.iteration += 1
    return report, groups


def _groups_reward_mean(groups: list[PromptGroup]) -> float:
    rewards = [r for g in groups for r in g.rewards]
    return float(np.mean(rewards)) if rewards else math.nan


def run_iteration_baseline(
    state: SchedulerState,
    params_t: PolicyParams,
    cfg: BudgetConfig,
    group_cfg: ObjectiveConfig,
) -> tuple[StepReport, list[PromptGroup]]:
    """Single-pass comparator: a fixed prompt batch run to termination.

    No budget cut and no carry-over; the rollout phase costs the maximum
    rollout length of each capacity-sized wave.
    """
    batch: list[Rollout] = []
    for _ in range(cfg.prompts_per_iteration):
        if cfg.max_total_prompts is not None and state.prompts_sampled >= cfg.max_total_prompts:
            break
        if not _spawn_group(state, group_cfg):
            break
        while state.pending:
            batch.append(state.pending.popleft())
    if not batch:
        raise ValueError("baseline iteration has an empty prompt set")

    ticks = 0
    for start in range(0, len(batch), cfg.infer_capacity):
        wave = [r for r in batch[start : start + cfg.infer_capacity]]
        wave_len = 0
        active = list(wave)
        while active:
            if wave_len >= cfg.tick_cap:
                raise TickCapError("baseline rollout exceeded the tick cap")
            _generate_tick(active, params_t, state)
            still = []
            for rollout in active:
                if _is_terminal(rollout, state.vocab):
                    rollout.terminal = True
                else:
                    still.append(rollout)
            active = still
            wave_len += 1
        ticks += wave_len

    state.counter = sum(r.length for r in batch)
    state.train_pool.extend(batch)
    state.tick_clock += ticks
    groups, emitted_tokens, stale_tokens = _emit_groups(state, params_t.version_id)
    report = StepReport(
        iteration=state.iteration,
        rollout_ticks=ticks,
        trained_tokens=state.counter,
        purged_rollouts=0,
        resumed_rollouts=0,
        completed_rollouts=len(batch),
        stale_token_fraction=stale_tokens / emitted_tokens if emitted_tokens else 0.0,
        emitted_groups=len(groups),
        emitted_tokens=emitted_tokens,
        reward_mean=_groups_reward_mean(groups),
    )
    state.iteration += 1
    return report, groups


def train_loop(
    n_iterations: int,
    state: SchedulerState,
    params: PolicyParams,
    cfg: BudgetConfig,
    group_cfg: ObjectiveConfig,
    bounds: MaskingBounds,
    lr: float,
    ref: PolicyParams | None = None,
    probes: list[Context] | None = None,
    baseline: bool = False,
    optimizer: str = "sgd",
    momentum_beta: float = 0.9,
    on_step=None,
) -> tuple[list[tuple[StepReport, LossBreakdown, DiscrepancySample]], PolicyParams]:
    """Alternate rollout generation, objective/gradient, update, weight sync.

    Resumed rollouts keep their recorded token history, so stale tokens
    retain the version that generated them. on_step, when given, is
    called with (report, loss, sample) as each iteration lands so
    callers can flush metrics before a potential numeric failure.
    """
    if optimizer not in ("sgd", "momentum"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if ref is None:
        ref = params.copy()
    if probes is None:
        probes = make_probes(256, state.vocab, state.seed)
    velocity = np.zeros_like(params.weights)
    results: list[tuple[StepReport, LossBreakdown, DiscrepancySample]] = []
    step = run_iteration_baseline if baseline else run_iteration
    for _ in range(n_iterations):
        report, groups = step(state, params, cfg, group_cfg)
        if groups:
            loss = objective_and_grad(
                groups, params, params, ref, group_cfg, bounds, state.temperature
            )
        else:
            loss = empty_breakdown(params)
        sample = measure(
            params, probes, state.infer, state.temperature, step=report.iteration, loss=loss
        )
        results.append((report, loss, sample))
        if on_step is not None:
            on_step(report, loss, sample)
        if groups:
            if optimizer == "momentum":
                params, velocity = momentum_update(params, loss.grad, velocity, lr, momentum_beta)
            else:
                params = sgd_update(params, loss.grad, lr)
        state.tick_clock += cfg.sync_cost_ticks
    return results, params
