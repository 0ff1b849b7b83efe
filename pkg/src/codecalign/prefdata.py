"""Preference-pair datasets: golden vs. policy-sampled layer-1 sequences.

Each item pairs a golden response (drawn from the world) with a synthetic
response (sampled from the current policy) for the same text and speaker.
Datasets carry provenance (policy and world fingerprints, base seed,
iteration) and serialize to JSON lines with a bit-exact round trip.
Cross-iteration merging keeps a sliding window: the newest data plus the
single most recent previous iteration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .errors import ConfigError, FormatError, ProvenanceError
from .metrics import oracle_judge
from .nar import NarModel, reconstruct_batch
from .world import World, sample_batch, world_fingerprint

FORMAT_TAG = "pref-v1"


@dataclass(frozen=True)
class PreferenceTriple:
    """One comparison: same text and speaker, golden vs. synthetic response."""
    text: np.ndarray       # (l_text,) int64
    speaker: int
    y_g: np.ndarray        # golden layer-1 tokens, (l_ar,)
    y_s: np.ndarray        # synthetic layer-1 tokens, variable length
    iteration: int
    sample_seed: int       # replays y_g via sample_utterance(world, speaker, seed)


@dataclass(frozen=True)
class PreferenceDataset:
    triples: tuple[PreferenceTriple, ...]
    policy_hash: str
    world_hash: str
    base_seed: int
    iteration: int
    degenerate: int        # items skipped after an empty sample and one retry

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        return iter(self.triples)

    def texts(self) -> np.ndarray:
        return np.stack([t.text for t in self.triples])


def build_pref_dataset(world: World, policy, n: int, iteration: int,
                       base_seed: int, *, temperature: float = 1.0
                       ) -> PreferenceDataset:
    """Draw n preference pairs with per-item seeds mix64(base_seed, i).

    Golden responses replay directly from the item seed; synthetic responses
    are sampled from the policy with no control token.  An item whose sample
    comes back empty is retried once on a fresh sub-seed, then skipped and
    counted as degenerate.
    """
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    if iteration < 0:
        raise ConfigError(f"iteration must be >= 0, got {iteration}")
    idx = np.arange(n)
    item_seeds = rng.mix64_array(base_seed, idx)
    speakers = (idx % world.config.speakers).astype(np.int64)
    texts, stacks = sample_batch(world, speakers, item_seeds)

    pol_seeds = rng.mix64_array(item_seeds, rng.STREAM_POLICY)
    ys = policy.sample_batch(texts, temperature, pol_seeds, control=None)
    empty = [i for i in range(n) if len(ys[i]) == 0]
    if empty:
        retry_seeds = rng.mix64_array(item_seeds[empty], rng.STREAM_RETRY)
        redone = policy.sample_batch(texts[empty], temperature, retry_seeds,
                                     control=None)
        for i, y in zip(empty, redone):
            ys[i] = y

    triples = []
    degenerate = 0
    for i in range(n):
        if len(ys[i]) == 0:
            degenerate += 1
            continue
        triples.append(PreferenceTriple(
            text=texts[i], speaker=int(speakers[i]), y_g=stacks[i, 0],
            y_s=np.asarray(ys[i], dtype=np.int64), iteration=iteration,
            sample_seed=int(item_seeds[i])))
    return PreferenceDataset(triples=tuple(triples),
                             policy_hash=policy.fingerprint(),
                             world_hash=world_fingerprint(world),
                             base_seed=int(base_seed) & rng.MASK64,
                             iteration=iteration, degenerate=degenerate)


def merge_iterations(previous: PreferenceDataset | None,
                     new: PreferenceDataset) -> PreferenceDataset:
    """Sliding-window merge: keep the newest data plus the single most
    recent previous iteration; anything older is dropped."""
    if previous is None:
        return new
    if previous.world_hash != new.world_hash:
        raise ProvenanceError(
            f"cannot merge datasets from different worlds: "
            f"{previous.world_hash[:12]} vs {new.world_hash[:12]}")
    recent = tuple(t for t in previous.triples if t.iteration == previous.iteration)
    return replace(new, triples=recent + new.triples,
                   degenerate=previous.degenerate + new.degenerate)


# --- serialization ------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def pref_bytes(dataset: PreferenceDataset) -> bytes:
    header = _dumps({
        "format": FORMAT_TAG,
        "size": len(dataset),
        "iteration": dataset.iteration,
        "base_seed": dataset.base_seed,
        "policy": dataset.policy_hash,
        "world": dataset.world_hash,
        "degenerate": dataset.degenerate,
    })
    lines = [header]
    for t in dataset.triples:
        lines.append(_dumps({
            "iter": t.iteration,
            "speaker": t.speaker,
            "seed": t.sample_seed,
            "text": [int(v) for v in t.text],
            "y_g": [int(v) for v in t.y_g],
            "y_s": [int(v) for v in t.y_s],
        }))
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_pref(dataset: PreferenceDataset, path: str) -> None:
    with open(path, "wb") as f:
        f.write(pref_bytes(dataset))


def load_pref(path: str) -> PreferenceDataset:
    with open(path, "rb") as f:
        lines = f.read().decode("utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} header is not JSON: {e}") from e
    if header.get("format") != FORMAT_TAG:
        raise FormatError(f"{path} has format {header.get('format')!r}, "
                          f"expected {FORMAT_TAG!r}")
    triples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            triples.append(PreferenceTriple(
                text=np.array(d["text"], dtype=np.int64),
                speaker=int(d["speaker"]),
                y_g=np.array(d["y_g"], dtype=np.int64),
                y_s=np.array(d["y_s"], dtype=np.int64),
                iteration=int(d["iter"]),
                sample_seed=int(d["seed"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}:{lineno}: bad triple: {e}") from e
    if len(triples) != header.get("size"):
        raise FormatError(f"{path} declares {header.get('size')} triples "
                          f"but holds {len(triples)}")
    return PreferenceDataset(triples=tuple(triples),
                             policy_hash=header["policy"],
                             world_hash=header["world"],
                             base_seed=int(header["base_seed"]),
                             iteration=int(header["iteration"]),
                             degenerate=int(header["degenerate"]))


# --- dataset quality audit -----------------------------------------------------


def oracle_verify(world: World, nar_model: NarModel, nar_params: np.ndarray,
                  dataset: PreferenceDataset, m: int, *, seed: int = 0
                  ) -> dict[str, float]:
    """Judge m sampled pairs after reconstructing both sides through the
    layer-expansion model.  Returns win/tie/lose percentages for the golden
    side; they sum to 100."""
    n = len(dataset)
    if not 1 <= m <= n:
        raise ConfigError(f"verification size {m} outside [1, {n}]")
    if m == n:
        chosen = np.arange(n)
    else:
        chosen = np.sort(rng.generator(rng.mix64(seed, rng.STREAM_EVAL))
                         .choice(n, size=m, replace=False))
    picked = [dataset.triples[int(i)] for i in chosen]
    texts = np.stack([t.text for t in picked])
    speakers = np.array([t.speaker for t in picked], dtype=np.int64)
    prompt_seeds = rng.derive_array(seed, rng.STREAM_PREF, chosen)
    _, stacks = sample_batch(world, speakers, prompt_seeds)
    prompts = stacks[:, :, :nar_model.config.prompt_len]
    ters_g, sims_g = reconstruct_batch(world, nar_model, nar_params, texts,
                                       speakers, prompts, [t.y_g for t in picked])
    ters_s, sims_s = reconstruct_batch(world, nar_model, nar_params, texts,
                                       speakers, prompts, [t.y_s for t in picked])
    win = tie = lose = 0
    for i in range(m):
        verdict = oracle_judge((ters_g[i], sims_g[i]), (ters_s[i], sims_s[i]))
        if verdict > 0:
            win += 1
        elif verdict < 0:
            lose += 1
        else:
            tie += 1
    return {"golden_win": 100.0 * win / m, "tie": 100.0 * tie / m,
            "golden_lose": 100.0 * lose / m}
