"""Tiny autoregressive softmax policy evaluated by two engines.

The policy is linear over hashed n-gram features of the recent token
window (plus a prompt feature and a bias), so it is the smallest model
with context-dependent, nontrivial gradients. The training engine
computes the exact softmax; the inference engine adds a seeded,
zero-mean logit perturbation whose magnitude tracks the logit scale,
standing in for the numerical disagreement between separate serving and
training stacks. The perturbation is re-drawn per parameter version so
the disagreement evolves with the parameters.

Scalar entry points (distribution, log_prob, sample_token) define the
contracts; batched helpers on (N, 4) feature-row matrices carry the hot
paths and produce bit-identical results.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import NumericError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Last-n token window feeding the hashed features.
FEATURE_WINDOW = 2

# Heavy-tail mixtures: the dense stream keeps a fatter tail than the
# fault stream; a fault tail mostly manufactures implausible boosts of
# already-suppressed tokens.
_DENSE_TAIL_CUT = 164   # 164/2048 = 8%
_DENSE_TAIL_GAIN = 4.0
_FAULT_TAIL_CUT = 82    # 82/2048 = 4%
_FAULT_TAIL_GAIN = 4.0
# Fault relative error is bounded (clipped noise): a lossy kernel can
# wreck a value within a bounded factor, so an error can suppress a
# leader outright but can never hoist a deeply-suppressed token over it.
_FAULT_NOISE_CLIP = 1.6
_NOISE_TAG = 0x6E015E
_NOISE_VERSION_TAG = 0x7A11E7
_SECOND_FIXED_XOR = 0x1B873593C2B2AE35
_SECOND_VERSION_XOR = 0x85EBCA77C2B2AE63
_FAULT_XOR = 0x46A0175E37C2D91B

# Each noise stream mixes a context-persistent component with one
# re-drawn per parameter version (weights on the unit circle, so the
# marginal stays standard normal). Persistence is what lets repeated
# updates on a disagreeing context compound instead of averaging out.
_PERSISTENT_WEIGHT = 0.99
_VERSION_WEIGHT = 0.141

# Disagreement structure: a dense additive component everywhere plus
# sparse persistent "fault" entries whose error tracks the logit
# magnitude, mimicking heterogeneous kernels that are near-exact on most
# entries and badly lossy on a few.
_FAULT_CUT = 820  # 820/2048 = 40% of (context, token) pairs
_FAULT_GAIN = 10.0
_DENSE_WEIGHT = 0.3


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix(*values: int) -> int:
    """Stable (process-independent) hash of an integer tuple."""
    h = 0x8A5CD789635D2DFF
    for v in values:
        h = _splitmix64(h ^ (v & _MASK64))
    return h


def _splitmix64_vec(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(_GOLDEN)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


_STRIDE_A = np.uint64(0xD1342543DE82EF95)
_STRIDE_B = np.uint64(0x2545F4914F6CDD1D)
_XOR_B = 0x9E6C63D0876A9A47


def unit_noise_matrix(
    keys: np.ndarray, width: int, tail_cut: int = _DENSE_TAIL_CUT, tail_gain: float = _DENSE_TAIL_GAIN
) -> np.ndarray:
    """Counter-based standard normals with a heavy tail, one row per key.

    Deterministic in (key, column); no RNG state is consumed. Box-Muller
    on splitmix64 streams keeps draws stable across processes; the tail
    flag comes from spare low bits of the second stream.
    """
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1, 1)
    idx = np.arange(width, dtype=np.uint64).reshape(1, -1)
    a = _splitmix64_vec(keys + idx * _STRIDE_A)
    b = _splitmix64_vec((keys ^ np.uint64(_XOR_B)) + idx * _STRIDE_B)
    u1 = ((a >> np.uint64(11)).astype(np.float64) + 1.0) / float(1 << 53)
    u2 = (b >> np.uint64(11)).astype(np.float64) / float(1 << 53)
    normals = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
    heavy = (b & np.uint64(0x7FF)) < np.uint64(tail_cut)
    return np.where(heavy, normals * tail_gain, normals)


@dataclass(frozen=True)
class Vocabulary:
    """Token alphabet; eos_id is the reserved termination token."""

    size: int = 32
    eos_id: int = 0

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {self.size}")
        if not 0 <= self.eos_id < self.size:
            raise ValueError(f"eos_id {self.eos_id} out of range for size {self.size}")


@dataclass
class PolicyParams:
    """Weight matrix indexed by (feature, token), plus a version counter."""

    weights: np.ndarray
    version_id: int = 0

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a (n_features, vocab_size) matrix")
        if not np.isfinite(self.weights).all():
            raise NumericError("policy weights contain non-finite values")

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.version_id)


def init_params(
    vocab: Vocabulary,
    n_features: int = 64,
    init_scale: float = 0.8,
    seed: int = 0,
) -> PolicyParams:
    """Fresh Gaussian weights at version 0, deterministic in seed."""
    rng = np.random.default_rng(np.random.SeedSequence((seed & _MASK64, 0xA11CE)))
    weights = rng.normal(0.0, init_scale, size=(n_features, vocab.size))
    return PolicyParams(weights=weights, version_id=0)


class EngineKind(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass(frozen=True)
class Engine:
    """One of the two evaluation engines.

    mismatch_scale and mismatch_seed only matter for INFER; at
    mismatch_scale == 0 the inference engine is bit-identical to the
    training engine.
    """

    kind: EngineKind
    mismatch_scale: float = 0.0
    mismatch_seed: int = 0

    def __post_init__(self) -> None:
        if self.mismatch_scale < 0:
            raise ValueError("mismatch_scale must be nonnegative")


def train_engine() -> Engine:
    return Engine(EngineKind.TRAIN)


def infer_engine(mismatch_scale: float = 0.0, mismatch_seed: int = 0) -> Engine:
    return Engine(EngineKind.INFER, mismatch_scale, mismatch_seed)


@dataclass(frozen=True)
class Context:
    """Prompt identity plus the recent token window."""

    prompt_id: int
    token_history: tuple[int, ...] = ()

    def window(self) -> tuple[int, int]:
        """(second-to-last, last) tokens, -1 where history is short."""
        hist = self.token_history
        last = hist[-1] if hist else -1
        prev = hist[-2] if len(hist) >= 2 else -1
        return prev, last


@dataclass(frozen=True)
class TokenDistribution:
    """Normalized categorical distribution over the vocabulary."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if (p < 0).any() or abs(float(p.sum()) - 1.0) > 1e-12:
            raise NumericError("token distribution is not normalized")


@lru_cache(maxsize=None)
def _bias_row(n_features: int) -> int:
    return _mix(1) % n_features


@lru_cache(maxsize=131072)
def _unigram_row(prompt_id: int, last: int, n_features: int) -> int:
    return _mix(3, prompt_id, last) % n_features


@lru_cache(maxsize=131072)
def _bigram_row(prompt_id: int, prev: int, last: int, n_features: int) -> int:
    return _mix(4, prompt_id, prev, last) % n_features


@lru_cache(maxsize=131072)
def _bigram_row_b(prompt_id: int, prev: int, last: int, n_features: int) -> int:
    return _mix(5, prompt_id, prev, last) % n_features


def feature_rows(prompt_id: int, prev: int, last: int, n_features: int) -> tuple[int, int, int, int]:
    """Bias plus prompt-conditioned n-gram rows of the token window.

    All non-bias rows are window-local, so updates at one context do not
    bleed into another context's distribution except through the bias.
    """
    return (
        _bias_row(n_features),
        _unigram_row(prompt_id, last, n_features),
        _bigram_row(prompt_id, prev, last, n_features),
        _bigram_row_b(prompt_id, prev, last, n_features),
    )


def feature_indices(ctx: Context, n_features: int) -> tuple[int, int, int, int]:
    """Active feature rows for a context: bias, prompt, unigram, bigram."""
    prev, last = ctx.window()
    return feature_rows(ctx.prompt_id, prev, last, n_features)


def noise_keys(
    engine: Engine, version_id: int, prompt_id: int, prev: int, last: int
) -> tuple[int, int]:
    """(persistent, per-version) noise stream keys for one context."""
    return (
        _mix(_NOISE_TAG, engine.mismatch_seed, prompt_id, prev, last),
        _mix(_NOISE_VERSION_TAG, engine.mismatch_seed, version_id, prompt_id, prev, last),
    )


def batched_train_logits(params: PolicyParams, feats: np.ndarray, temperature: float) -> np.ndarray:
    """(N, vocab) scaled training-engine logits for an (N, 4) feature-row batch."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    w = params.weights
    logits = w[feats[:, 0]] + w[feats[:, 1]] + w[feats[:, 2]] + w[feats[:, 3]]
    if temperature != 1.0:
        logits = logits / temperature
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits (corrupted parameters)")
    return logits


def mixed_unit_noise(
    keys_fixed: np.ndarray, keys_version: np.ndarray, width: int,
    tail_cut: int = _DENSE_TAIL_CUT, tail_gain: float = _DENSE_TAIL_GAIN,
) -> np.ndarray:
    """Unit-variance noise rows mixing persistent and per-version components."""
    return _PERSISTENT_WEIGHT * unit_noise_matrix(keys_fixed, width, tail_cut, tail_gain) + _VERSION_WEIGHT * unit_noise_matrix(keys_version, width, tail_cut, tail_gain)


def fault_mask(keys_fixed: np.ndarray, width: int) -> np.ndarray:
    """Persistent boolean fault lines per (context, token) entry."""
    keys = np.asarray(keys_fixed, dtype=np.uint64).reshape(-1, 1) ^ np.uint64(_FAULT_XOR)
    idx = np.arange(width, dtype=np.uint64).reshape(1, -1)
    h = _splitmix64_vec(keys + idx * _STRIDE_A)
    return (h & np.uint64(0x7FF)) < np.uint64(_FAULT_CUT)


def noise_components(
    keys_fixed: np.ndarray, keys_version: np.ndarray, width: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dense unit noise, fault unit noise, fault mask) for a key batch."""
    kf = np.asarray(keys_fixed, dtype=np.uint64)
    kv = np.asarray(keys_version, dtype=np.uint64)
    dense = mixed_unit_noise(kf, kv, width)
    fault_noise = np.clip(
        mixed_unit_noise(
            kf ^ np.uint64(_SECOND_FIXED_XOR),
            kv ^ np.uint64(_SECOND_VERSION_XOR),
            width,
            _FAULT_TAIL_CUT,
            _FAULT_TAIL_GAIN,
        ),
        -_FAULT_NOISE_CLIP,
        _FAULT_NOISE_CLIP,
    )
    return dense, fault_noise, fault_mask(kf, width)


def perturbation(logits: np.ndarray, keys_fixed: np.ndarray, keys_version: np.ndarray, scale: float) -> np.ndarray:
    """Additive logit error of the inference engine.

    scale * (dense_weight * dense + fault_gain * fault * |logit| * fault_noise):
    a small additive disagreement everywhere plus sparse faults whose
    error is proportional to the logit magnitude (near-zero activations
    agree on both engines; large ones diverge).
    """
    dense, fault_noise, faults = noise_components(keys_fixed, keys_version, logits.shape[1])
    return scale * (_DENSE_WEIGHT * dense + _FAULT_GAIN * faults * np.abs(logits) * fault_noise)


def perturb_logits(
    logits: np.ndarray, keys_fixed: np.ndarray, keys_version: np.ndarray, scale: float
) -> np.ndarray:
    """Inference-engine view of a logits batch."""
    if scale <= 0.0:
        return logits
    return logits + perturbation(logits, keys_fixed, keys_version, scale)


def batched_log_softmax(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(log_probs, probs) rows; exact log-sum-exp, no flooring."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    return shifted - np.log(z), e / z


def _context_batch(params: PolicyParams, ctx: Context, engine: Engine, temperature: float) -> np.ndarray:
    prev, last = ctx.window()
    feats = np.asarray([feature_rows(ctx.prompt_id, prev, last, params.n_features)])
    logits = batched_train_logits(params, feats, temperature)
    if engine.kind is EngineKind.INFER and engine.mismatch_scale > 0.0:
        kf, kv = noise_keys(engine, params.version_id, ctx.prompt_id, prev, last)
        logits = perturb_logits(
            logits,
            np.asarray([kf], dtype=np.uint64),
            np.asarray([kv], dtype=np.uint64),
            engine.mismatch_scale,
        )
    return logits


def _scaled_logits(params: PolicyParams, ctx: Context, engine: Engine, temperature: float) -> np.ndarray:
    return _context_batch(params, ctx, engine, temperature)[0]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def distribution(params: PolicyParams, ctx: Context, engine: Engine, temperature: float = 1.0) -> TokenDistribution:
    """Softmax of the feature-dot-weight logits divided by temperature."""
    return TokenDistribution(_softmax(_scaled_logits(params, ctx, engine, temperature)))


def log_prob(params: PolicyParams, ctx: Context, token: int, engine: Engine, temperature: float = 1.0) -> float:
    """Exact log probability via log-sum-exp; no probability flooring."""
    if not 0 <= token < params.vocab_size:
        raise ValueError(f"token {token} outside vocabulary of size {params.vocab_size}")
    logits = _scaled_logits(params, ctx, engine, temperature)
    m = float(logits.max())
    return float(logits[token] - m - math.log(np.exp(logits - m).sum()))


def sample_token(
    params: PolicyParams,
    ctx: Context,
    engine: Engine,
    temperature: float,
    stream: np.random.Generator,
) -> int:
    """Inverse-CDF sample: one uniform draw from the stream per token."""
    probs = distribution(params, ctx, engine, temperature).probs
    u = stream.random()
    token = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(token, probs.size - 1)


def sample_with_logprobs(
    params: PolicyParams,
    ctx: Context,
    infer: Engine,
    temperature: float,
    stream: np.random.Generator,
) -> tuple[int, float, float]:
    """Sample one token from the inference engine and record both engines' log probs.

    Returns (token, log pi_infer(token), log pi_train(token)); the stream
    advances by exactly one uniform draw, matching sample_token.
    """
    if infer.kind is not EngineKind.INFER:
        raise ValueError("sampling engine must be the inference engine")
    prev, last = ctx.window()
    feats = np.asarray([feature_rows(ctx.prompt_id, prev, last, params.n_features)])
    train_logits = batched_train_logits(params, feats, temperature)
    if infer.mismatch_scale > 0.0:
        kf, kv = noise_keys(infer, params.version_id, ctx.prompt_id, prev, last)
        infer_logits = perturb_logits(
            train_logits,
            np.asarray([kf], dtype=np.uint64),
            np.asarray([kv], dtype=np.uint64),
            infer.mismatch_scale,
        )
    else:
        infer_logits = train_logits
    lp_inf_rows, probs = batched_log_softmax(infer_logits)
    u = stream.random()
    token = min(int(np.searchsorted(np.cumsum(probs[0]), u, side="right")), probs.shape[1] - 1)
    lp_tr_rows, _ = batched_log_softmax(train_logits)
    return token, float(lp_inf_rows[0, token]), float(lp_tr_rows[0, token])
