"""Synthetic codec world with an exactly computable golden distribution.

The world stands in for real speech plus a neural codec.  Layer-1 ("AR")
tokens follow a first-order Markov conditional p*(y_i | text symbol,
previous token, speaker) given by seeded Gaussian logits; layers 2..Q
("NAR" layers) are deterministic per-speaker lookups of the layer-1 token
with a small corruption rate.  Because p* is available in closed form,
likelihoods, MAP transcription, and KL divergences against any model are
exact rather than estimated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import container, rng
from .errors import ConfigError, FormatError, ShapeError

WORLD_MAGIC = b"SALW"
WORLD_VERSION = 1

# Monte-Carlo sample count per speaker for the cached reference embedding.
REF_SAMPLES = 512

# Largest flattened block-score table we are willing to precompute.
_INVERSE_MAP_LIMIT = 1 << 16


@dataclass(frozen=True)
class WorldConfig:
    v_text: int = 16        # text-alphabet size
    l_text: int = 12        # text length
    k_ar: int = 32          # layer-1 vocab size
    k_nar: int = 32         # vocab size of layers 2..Q
    q_layers: int = 3       # total token layers
    expansion: int = 2      # layer-1 tokens per text symbol
    speakers: int = 8
    tau_oracle: float = 0.5
    eps_nar: float = 0.05   # corruption rate of the layer lookups
    d_emb: int = 16         # signature/embedding dimension
    world_seed: int = 20240917

    @property
    def l_ar(self) -> int:
        return self.l_text * self.expansion

    @property
    def start_token(self) -> int:
        # previous-token axis index used at position 0
        return self.k_ar

    def validate(self) -> None:
        for name in ("v_text", "k_ar", "k_nar", "speakers", "d_emb"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be >= 2, got {getattr(self, name)}")
        if self.l_text < 1:
            raise ConfigError(f"l_text must be >= 1, got {self.l_text}")
        if self.expansion < 1:
            raise ConfigError(f"expansion must be >= 1, got {self.expansion}")
        if self.q_layers < 2:
            raise ConfigError(f"q_layers must be >= 2, got {self.q_layers}")
        if not self.tau_oracle > 0:
            raise ConfigError(f"tau_oracle must be > 0, got {self.tau_oracle}")
        if not 0 <= self.eps_nar <= 1:
            raise ConfigError(f"eps_nar must be in [0, 1], got {self.eps_nar}")
        if not 0 <= self.world_seed <= rng.MASK64:
            raise ConfigError(f"world_seed must be a 64-bit value, got {self.world_seed}")


@dataclass(frozen=True)
class Utterance:
    speaker: int
    text: np.ndarray           # (l_text,) int64
    golden_layers: np.ndarray  # (q_layers, l_ar) int64, row 0 = layer 1
    sample_seed: int


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class World:
    config: WorldConfig
    oracle_logits: np.ndarray  # (S, V_text, K_ar+1, K_ar)
    nar_tables: np.ndarray     # (Q-1, S, K_ar) int64 in [0, K_nar)
    token_sig: np.ndarray      # (Q, max(K_ar, K_nar), d_emb) unit rows
    speaker_ref: np.ndarray    # (S, d_emb) unit rows
    inverse_map: np.ndarray | None = None  # (S, K_ar+1, K_ar**R) int64 MAP symbols

    def __post_init__(self):
        for name in ("oracle_logits", "nar_tables", "token_sig", "speaker_ref"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        if self.inverse_map is not None:
            object.__setattr__(self, "inverse_map", _freeze(self.inverse_map))
        lse = _logsumexp(self.oracle_logits)
        logprobs = self.oracle_logits - lse[..., None]
        probs = np.exp(logprobs)
        object.__setattr__(self, "oracle_logprobs", _freeze(logprobs))
        object.__setattr__(self, "oracle_probs", _freeze(probs))
        object.__setattr__(self, "_cdf", _freeze(np.cumsum(probs, axis=-1)))


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis)
    return m + np.log(np.sum(np.exp(a - np.expand_dims(m, axis)), axis=axis))


def world_init(config: WorldConfig) -> World:
    config.validate()
    c = config
    gen = rng.generator(rng.mix64(c.world_seed, rng.STREAM_WORLD))
    oracle_logits = gen.standard_normal((c.speakers, c.v_text, c.k_ar + 1, c.k_ar))
    oracle_logits /= c.tau_oracle
    nar_tables = gen.integers(0, c.k_nar, size=(c.q_layers - 1, c.speakers, c.k_ar))
    k_max = max(c.k_ar, c.k_nar)
    sig = gen.standard_normal((c.q_layers, k_max, c.d_emb))
    sig /= np.linalg.norm(sig, axis=-1, keepdims=True)

    world = World(
        config=c,
        oracle_logits=oracle_logits,
        nar_tables=nar_tables,
        token_sig=sig,
        speaker_ref=np.zeros((c.speakers, c.d_emb)),
        inverse_map=None,
    )
    m = REF_SAMPLES
    seeds = rng.derive_array(c.world_seed, rng.STREAM_SPEAKER_REF, np.arange(c.speakers * m))
    speakers = np.repeat(np.arange(c.speakers), m)
    _, layers = sample_batch(world, speakers, seeds)
    embs = embed_batch(world, layers)
    refs = embs.reshape(c.speakers, m, c.d_emb).mean(axis=1)
    refs /= np.linalg.norm(refs, axis=-1, keepdims=True)
    return replace(world, speaker_ref=refs, inverse_map=_build_inverse_map(world))


def _build_inverse_map(world: World) -> np.ndarray | None:
    """Per-speaker MAP tables: (prev boundary token, R-token block) -> symbol.

    Only built when the flattened block axis is small; `transcribe` falls
    back to direct scoring otherwise, with identical results.
    """
    c = world.config
    r_exp = c.expansion
    n_blocks = c.k_ar ** r_exp
    if n_blocks > _INVERSE_MAP_LIMIT:
        return None
    lp = world.oracle_logprobs
    block = np.stack(
        np.meshgrid(*([np.arange(c.k_ar)] * r_exp), indexing="ij"), axis=0,
    ).reshape(r_exp, n_blocks)
    out = np.empty((c.speakers, c.k_ar + 1, n_blocks), dtype=np.int64)
    for s in range(c.speakers):
        # scores: (V, K_ar+1, n_blocks), summed position by position
        scores = lp[s, :, :, block[0]].transpose(1, 2, 0).copy()
        for i in range(1, r_exp):
            scores += lp[s, :, block[i - 1], block[i]].T[:, None, :]
        out[s] = np.argmax(scores, axis=0)
    return out


# ---------------------------------------------------------------------------
# sampling

def _raw_draws(config: WorldConfig, seeds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-item text symbols and layer-1 inverse-CDF uniforms.

    Draw order per item is frozen: l_text integers, then l_ar uniforms.
    """
    c = config
    b = len(seeds)
    texts = np.empty((b, c.l_text), dtype=np.int64)
    u = np.empty((b, c.l_ar))
    for j, seed in enumerate(seeds):
        g = rng.generator(int(seed))
        texts[j] = g.integers(0, c.v_text, c.l_text)
        u[j] = g.random(c.l_ar)
    return texts, u


def sample_batch(world: World, speakers: np.ndarray, seeds: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized golden sampling: returns texts (B, l_text) and full layer
    stacks (B, q_layers, l_ar)."""
    c = world.config
    speakers = np.asarray(speakers, dtype=np.int64)
    seeds = np.asarray(seeds)
    if speakers.shape != seeds.shape or speakers.ndim != 1:
        raise ShapeError("speakers and seeds must be 1-D arrays of equal length")
    if speakers.size and (speakers.min() < 0 or speakers.max() >= c.speakers):
        raise ShapeError(f"speaker ids must lie in [0, {c.speakers})")
    b = len(speakers)
    texts, u = _raw_draws(c, seeds)
    cdf = world._cdf
    layer1 = np.empty((b, c.l_ar), dtype=np.int64)
    prev = np.full(b, c.start_token, dtype=np.int64)
    for i in range(c.l_ar):
        sym = texts[:, i // c.expansion]
        rows = cdf[speakers, sym, prev]  # (B, K)
        tok = np.minimum((rows < u[:, i, None]).sum(axis=1), c.k_ar - 1)
        layer1[:, i] = tok
        prev = tok
    noise_seeds = np.array([rng.mix64(int(s), rng.STREAM_NAR_NOISE) for s in seeds],
                           dtype=np.uint64)
    layers = expand_batch(world, speakers, layer1, noise_seeds)
    return texts, layers


def sample_utterance(world: World, speaker: int, sample_seed: int) -> Utterance:
    if not 0 <= speaker < world.config.speakers:
        raise ShapeError(f"speaker {speaker} out of range [0, {world.config.speakers})")
    texts, layers = sample_batch(world, np.array([speaker]), np.array([sample_seed], dtype=np.uint64))
    return Utterance(speaker=speaker, text=texts[0], golden_layers=layers[0],
                     sample_seed=int(sample_seed) & rng.MASK64)


def expand_batch(world: World, speakers: np.ndarray, layer1: np.ndarray,
                 noise_seeds: np.ndarray) -> np.ndarray:
    """Vectorized layer expansion: (B, L) layer-1 tokens -> (B, Q, L) stacks."""
    c = world.config
    layer1 = np.asarray(layer1, dtype=np.int64)
    b, length = layer1.shape
    stacks = np.empty((b, c.q_layers, length), dtype=np.int64)
    stacks[:, 0] = layer1
    # draw order per item: for each layer q=2..Q, L uniforms then L integers
    u = np.empty((b, c.q_layers - 1, length))
    repl = np.empty((b, c.q_layers - 1, length), dtype=np.int64)
    for j, seed in enumerate(noise_seeds):
        g = rng.generator(int(seed))
        for q in range(c.q_layers - 1):
            u[j, q] = g.random(length)
            repl[j, q] = g.integers(0, c.k_nar, length)
    for q in range(c.q_layers - 1):
        looked = world.nar_tables[q][speakers[:, None], layer1]
        stacks[:, q + 1] = np.where(u[:, q] < c.eps_nar, repl[:, q], looked)
    return stacks


def nar_expand(world: World, speaker: int, layer1: np.ndarray, noise_seed: int) -> np.ndarray:
    """Golden expansion of one layer-1 sequence into the full (Q, L) stack."""
    layer1 = np.asarray(layer1, dtype=np.int64)
    if layer1.ndim != 1 or layer1.size == 0:
        raise ShapeError("layer1 must be a non-empty 1-D sequence")
    if layer1.min() < 0 or layer1.max() >= world.config.k_ar:
        raise ShapeError(f"layer-1 tokens must lie in [0, {world.config.k_ar})")
    stacks = expand_batch(world, np.array([speaker]), layer1[None, :],
                          np.array([noise_seed], dtype=np.uint64))
    return stacks[0]


# ---------------------------------------------------------------------------
# likelihoods and inversion

def _check_layer1(world: World, y: np.ndarray, expect_len: int | None) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.ndim != 1:
        raise ShapeError(f"layer-1 sequence must be 1-D, got shape {y.shape}")
    if expect_len is not None and len(y) != expect_len:
        raise ShapeError(f"layer-1 sequence has length {len(y)}, expected {expect_len}")
    if y.size and (y.min() < 0 or y.max() >= world.config.k_ar):
        raise ShapeError(f"layer-1 tokens must lie in [0, {world.config.k_ar})")
    return y


def golden_logprob(world: World, speaker: int, text: np.ndarray, y: np.ndarray) -> float:
    """Exact log p*(y | text, speaker); -inf if any step has zero mass."""
    c = world.config
    text = np.asarray(text, dtype=np.int64)
    if text.shape != (c.l_text,):
        raise ShapeError(f"text has shape {text.shape}, expected ({c.l_text},)")
    if text.min() < 0 or text.max() >= c.v_text:
        raise ShapeError(f"text symbols must lie in [0, {c.v_text})")
    y = _check_layer1(world, y, c.l_ar)
    syms = np.repeat(text, c.expansion)
    prev = np.concatenate(([c.start_token], y[:-1]))
    steps = world.oracle_logprobs[speaker, syms, prev, y]
    return float(steps.sum())


def golden_logprob_batch(world: World, speakers: np.ndarray, texts: np.ndarray,
                         ys: np.ndarray) -> np.ndarray:
    c = world.config
    syms = np.repeat(texts, c.expansion, axis=1)
    prev = np.concatenate(
        [np.full((len(ys), 1), c.start_token, dtype=np.int64), ys[:, :-1]], axis=1)
    steps = world.oracle_logprobs[np.asarray(speakers)[:, None], syms, prev, ys]
    return steps.sum(axis=1)


def transcribe(world: World, speaker: int, layer1: np.ndarray) -> np.ndarray:
    """MAP text recovery from layer-1 tokens, block by block.

    Ties break toward the lowest symbol index.
    """
    y = _check_layer1(world, layer1, None)
    return transcribe_batch(world, np.array([speaker]), y[None, :])[0]


def transcribe_batch(world: World, speakers: np.ndarray, layer1: np.ndarray) -> np.ndarray:
    c = world.config
    layer1 = np.asarray(layer1, dtype=np.int64)
    if layer1.ndim != 2:
        raise ShapeError(f"layer1 batch must be 2-D, got shape {layer1.shape}")
    b, length = layer1.shape
    if length == 0 or length % c.expansion:
        raise ShapeError(f"layer-1 length {length} is not a positive multiple of {c.expansion}")
    speakers = np.asarray(speakers, dtype=np.int64)
    nb = length // c.expansion
    blocks = layer1.reshape(b, nb, c.expansion)
    bound = np.concatenate(
        [np.full((b, 1), c.start_token, dtype=np.int64), layer1[:, c.expansion - 1:-1:c.expansion]],
        axis=1)  # (B, nb) previous token at each block start
    if world.inverse_map is not None and length and c.k_ar ** c.expansion == world.inverse_map.shape[-1]:
        flat = np.zeros((b, nb), dtype=np.int64)
        for i in range(c.expansion):
            flat = flat * c.k_ar + blocks[:, :, i]
        return world.inverse_map[speakers[:, None], bound, flat]
    lp = world.oracle_logprobs
    sp = speakers[:, None, None]
    # direct path: accumulate per in-block position in increasing order
    scores = np.zeros((b, nb, c.v_text))
    prev = bound
    for i in range(c.expansion):
        cur = blocks[:, :, i]
        scores += lp[sp, np.arange(c.v_text)[None, None, :], prev[..., None], cur[..., None]]
        prev = cur
    return np.argmax(scores, axis=-1)


def speaker_embed(world: World, layers: np.ndarray) -> np.ndarray:
    """Unit-norm mean of token signatures over all (layer, position).

    Accepts a partial stack (first q rows of the layer hierarchy, 1 <= q <= Q).
    """
    layers = np.asarray(layers, dtype=np.int64)
    if (layers.ndim != 2 or not 1 <= layers.shape[0] <= world.config.q_layers
            or layers.shape[1] == 0):
        raise ShapeError(
            f"layers must have shape (q in [1, {world.config.q_layers}], L>=1), "
            f"got {layers.shape}")
    return embed_batch(world, layers[None])[0]


def embed_batch(world: World, layers: np.ndarray) -> np.ndarray:
    q = layers.shape[1]
    vecs = world.token_sig[np.arange(q)[None, :, None], layers]  # (B, q, L, d)
    emb = vecs.mean(axis=(1, 2))
    norms = np.linalg.norm(emb, axis=-1, keepdims=True)
    return emb / norms


def conditional_entropies(world: World) -> np.ndarray:
    """Entropy of every oracle conditional cell, shape (S, V_text, K_ar+1)."""
    p = world.oracle_probs
    lp = world.oracle_logprobs
    return -(p * lp).sum(axis=-1)


# ---------------------------------------------------------------------------
# serialization

def _tensor_dict(world: World) -> dict[str, np.ndarray]:
    t = {
        "oracle_logits": world.oracle_logits,
        "nar_tables": world.nar_tables,
        "token_sig": world.token_sig,
        "speaker_ref": world.speaker_ref,
    }
    if world.inverse_map is not None:
        t["inverse_map"] = world.inverse_map
    return t


def world_bytes(world: World) -> bytes:
    return container.pack(WORLD_MAGIC, WORLD_VERSION, asdict(world.config), _tensor_dict(world))


def world_fingerprint(world: World) -> str:
    return container.sha256_hex(world_bytes(world))


def save_world(world: World, path: str) -> None:
    with open(path, "wb") as f:
        f.write(world_bytes(world))


def load_world(path: str) -> World:
    config_d, tensors, _ = container.read_file(path, WORLD_MAGIC, WORLD_VERSION)
    try:
        config = WorldConfig(**config_d)
        world = World(
            config=config,
            oracle_logits=tensors["oracle_logits"],
            nar_tables=tensors["nar_tables"],
            token_sig=tensors["token_sig"],
            speaker_ref=tensors["speaker_ref"],
            inverse_map=tensors.get("inverse_map"),
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"world file {path} is missing fields: {e}") from e
    return world
