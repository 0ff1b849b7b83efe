"""Evaluation measures over the oracle world.

Pure functions only: token error rate (edit distance against the input
text), speaker similarity (cosine against a speaker's reference embedding),
the exact per-position distribution gap between the oracle conditionals and
a policy, the pooled-representation gap with its 2-D projection, and the
deterministic preference judge used in place of human raters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import ConfigError, ShapeError, StatsError
from .nn import log_softmax
from .world import World, sample_batch, speaker_embed, transcribe

TER_MARGIN = 1e-9
SIM_MARGIN = 0.01


# --- edit distance ------------------------------------------------------------


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two integer sequences."""
    a = np.asarray(a, dtype=np.int64).ravel()
    b = np.asarray(b, dtype=np.int64).ravel()
    if len(b) == 0:
        return len(a)
    idx = np.arange(len(b) + 1, dtype=np.int64)
    prev = idx.copy()
    base = np.empty(len(b) + 1, dtype=np.int64)
    for i in range(1, len(a) + 1):
        base[0] = i
        np.minimum(prev[1:] + 1, prev[:-1] + (b != a[i - 1]), out=base[1:])
        # propagate insertions left-to-right: cur[j] = min_k<=j base[k] + (j - k)
        prev = idx + np.minimum.accumulate(base - idx)
    return int(prev[-1])


def ter(hypothesis, reference) -> float:
    """Token error rate: edit distance normalized by reference length.
    Insertions can push the rate above 1."""
    reference = np.asarray(reference, dtype=np.int64).ravel()
    if len(reference) == 0:
        raise ShapeError("ter needs a non-empty reference")
    return levenshtein(hypothesis, reference) / len(reference)


# --- speaker similarity ---------------------------------------------------------


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ShapeError("cosine undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def sim(world: World, layers: np.ndarray, speaker: int) -> float:
    """Cosine between a token stack's embedding and the speaker reference."""
    return cosine(speaker_embed(world, layers), world.speaker_ref[speaker])


def transcription(world: World, speaker: int, layer1) -> np.ndarray:
    """Oracle transcription of the longest decodable prefix.

    Generated sequences may stop mid-block; symbols lost to truncation show
    up as deletions in the error rate."""
    y = np.asarray(layer1, dtype=np.int64).ravel()
    usable = len(y) - len(y) % world.config.expansion
    if usable == 0:
        return np.empty(0, dtype=np.int64)
    return transcribe(world, speaker, y[:usable])


# --- preference judge -------------------------------------------------------------


def oracle_judge(a: tuple[float, float], b: tuple[float, float]) -> int:
    """Compare two (TER, SIM) outcomes: +1 if `a` wins, -1 if it loses, 0 tie.

    Lower TER wins outright (margin 1e-9); on a TER tie, higher SIM wins
    if it leads by more than 0.01."""
    ter_a, sim_a = a
    ter_b, sim_b = b
    if ter_a < ter_b - TER_MARGIN:
        return 1
    if ter_b < ter_a - TER_MARGIN:
        return -1
    if sim_a > sim_b + SIM_MARGIN:
        return 1
    if sim_b > sim_a + SIM_MARGIN:
        return -1
    return 0


# --- held-out evaluation sets --------------------------------------------------------


@dataclass(frozen=True)
class EvalSet:
    """Held-out items: input text, golden stack, and a same-speaker prompt
    segment taken from a different held-out utterance."""
    texts: np.ndarray     # (N, l_text)
    speakers: np.ndarray  # (N,)
    golden: np.ndarray    # (N, Q, l_ar) full golden stacks
    prompts: np.ndarray   # (N, Q, P) same-speaker prompt segments
    seeds: np.ndarray     # (N,) golden sample seeds (replayable)

    @property
    def golden_l1(self) -> np.ndarray:
        return self.golden[:, 0, :]

    def __len__(self) -> int:
        return len(self.texts)

    def take(self, n: int) -> "EvalSet":
        return EvalSet(self.texts[:n], self.speakers[:n], self.golden[:n],
                       self.prompts[:n], self.seeds[:n])


def build_eval_set(world: World, n: int, seed: int, prompt_len: int = 8) -> EvalSet:
    """Draw n held-out utterances on the evaluation seed stream.

    Speakers cycle; each item's prompt is the leading segment of the next
    held-out utterance by the same speaker, so prompts are speaker-matched
    but never the item's own utterance."""
    s = world.config.speakers
    if n < 2 * s or n % s != 0:
        raise ConfigError(
            f"eval set size must be a multiple of {s} speakers and at least {2 * s}")
    if not 1 <= prompt_len <= world.config.l_ar:
        raise ConfigError(f"prompt_len must lie in [1, {world.config.l_ar}]")
    speakers = np.arange(n, dtype=np.int64) % s
    seeds = rng.derive_array(seed, rng.STREAM_EVAL, np.arange(n))
    texts, stacks = sample_batch(world, speakers, seeds)
    prompts = stacks[(np.arange(n) + s) % n][:, :, :prompt_len]
    return EvalSet(texts=texts, speakers=speakers, golden=stacks,
                   prompts=prompts, seeds=seeds)


# --- exact distribution gap -----------------------------------------------------------


def kl_gap(world: World, policy, eval_set: EvalSet,
           per_item: bool = False):
    """Mean per-position KL between the oracle conditionals and the policy,
    teacher-forced along the golden layer-1 sequences.

    The policy is renormalized over the K_ar token support at every position
    (the stop token is excluded: the oracle process never stops early).
    `policy` needs only a `response_logits(texts, ys)` method."""
    c = world.config
    n = len(eval_set)
    ys = eval_set.golden_l1
    logits = np.asarray(policy.response_logits(eval_set.texts, list(ys)))
    if logits.shape != (n * c.l_ar, c.k_ar):
        raise ShapeError(
            f"scorer returned {logits.shape}, expected {(n * c.l_ar, c.k_ar)}")
    lq = log_softmax(logits.reshape(n, c.l_ar, c.k_ar))
    sym = eval_set.texts[:, np.arange(c.l_ar) // c.expansion]
    prev = np.concatenate(
        [np.full((n, 1), c.start_token, dtype=np.int64), ys[:, :-1]], axis=1)
    spk = eval_set.speakers[:, None]
    p = world.oracle_probs[spk, sym, prev]
    lp = world.oracle_logprobs[spk, sym, prev]
    kl = (p * (lp - lq)).sum(axis=-1)  # (n, l_ar); oracle cells are strictly positive
    items = kl.mean(axis=1)
    mean = float(items.mean())
    return (mean, items) if per_item else mean


def bootstrap_se(values: np.ndarray, n_boot: int = 200, seed: int = 0) -> float:
    """Bootstrap standard error of the mean of per-item values."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(values) < 2:
        raise StatsError("bootstrap needs at least 2 values")
    gen = rng.generator(rng.mix64(seed, rng.STREAM_EVAL))
    idx = gen.integers(0, len(values), size=(n_boot, len(values)))
    return float(values[idx].mean(axis=1).std(ddof=1))


# --- pooled-representation gap -----------------------------------------------------------


@dataclass
class GapReport:
    """Separation between golden and synthetic pooled representations."""
    centroid_dist: float
    centroid_se: float
    coords: np.ndarray        # (2 * n_items, 2) projection of all points
    labels: list[str]         # "golden" / "synthetic" per row of coords
    n_items: int
    n_dropped: int
    kl: float | None = None
    kl_se: float | None = None


def pca_2d(points: np.ndarray) -> np.ndarray:
    """Project points onto their top-2 principal directions.

    Component signs are fixed by making each direction's largest-magnitude
    loading positive, so the projection is reproducible."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) < 3:
        raise StatsError("2-D projection needs at least 3 points")
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2].copy()
    if comps.shape[0] < 2:
        raise StatsError("points span fewer than 2 dimensions")
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1.0
    return centered @ comps.T


def rep_gap(policy, eval_set: EvalSet, sampler, *, seed: int,
            temperature: float = 1.0, n_boot: int = 200) -> GapReport:
    """Pooled-representation gap between golden responses and responses
    sampled from `sampler`, both embedded by the same scoring `policy`.

    Items whose sample is empty after one reseeded retry are dropped in
    golden/synthetic pairs so the two point clouds stay matched."""
    n = len(eval_set)
    if n < 3:
        raise StatsError(f"rep_gap needs at least 3 items, got {n}")
    seeds = rng.derive_array(seed, rng.STREAM_POLICY, np.arange(n))
    ys = sampler.sample_batch(eval_set.texts, temperature, seeds)
    kept: list[int] = []
    for i, y in enumerate(ys):
        if len(y) == 0:
            retry = rng.mix64(int(seeds[i]), rng.STREAM_RETRY)
            ys[i] = sampler.sample_batch(eval_set.texts[i:i + 1], temperature,
                                         np.array([retry], dtype=np.uint64))[0]
        if len(ys[i]) > 0:
            kept.append(i)
    if len(kept) < 3:
        raise StatsError(f"rep_gap has {len(kept)} non-empty samples; needs 3")
    kept_idx = np.array(kept, dtype=np.int64)
    texts = eval_set.texts[kept_idx]
    frames_g = policy.model.frames(texts, list(eval_set.golden_l1[kept_idx]),
                                   policy.control)
    frames_s = policy.model.frames(texts, [ys[i] for i in kept], policy.control)
    rep_g = policy.pooled_batch(frames_g)
    rep_s = policy.pooled_batch(frames_s)

    m = len(kept)
    dist = float(np.linalg.norm(rep_g.mean(axis=0) - rep_s.mean(axis=0)))
    gen = rng.generator(rng.mix64(seed, rng.STREAM_EVAL))
    idx = gen.integers(0, m, size=(n_boot, m))
    boot = np.linalg.norm(rep_g[idx].mean(axis=1) - rep_s[idx].mean(axis=1), axis=1)
    se = float(boot.std(ddof=1))

    coords = pca_2d(np.vstack([rep_g, rep_s]))
    labels = ["golden"] * m + ["synthetic"] * m
    return GapReport(centroid_dist=dist, centroid_se=se, coords=coords,
                     labels=labels, n_items=m, n_dropped=n - m)
