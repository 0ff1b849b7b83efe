"""Masked-parallel generator of the upper codec layers.

Conditioned on a speaker prompt (a short full-stack segment from another
utterance of the same speaker) and the layer-1 token sequence, the model
fills in layers 2..Q.  Training masks a random fraction of one target layer
per step and predicts the hidden tokens bidirectionally; generation decodes
layers in order, committing the most confident positions first under a
cosine schedule until every position is filled.  Committed positions are
immutable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn, rng
from .errors import ConfigError, ConvergenceError, FormatError, ShapeError
from .metrics import sim, ter, transcription
from .policy import JsonlLogger, load_model_file, model_bytes
from .world import World, WorldConfig


@dataclass(frozen=True)
class NarConfig:
    v_l1: int = 32
    k_nar: int = 32
    q_layers: int = 3
    l_resp: int = 24
    prompt_len: int = 8
    decode_steps: int = 4
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ffn: int = 256
    init_std: float = 0.02
    param_seed: int = 0

    @property
    def mask_id(self) -> int:
        return self.k_nar

    @staticmethod
    def for_world(wc: WorldConfig, **overrides) -> "NarConfig":
        base = NarConfig(v_l1=wc.k_ar, k_nar=wc.k_nar, q_layers=wc.q_layers,
                         l_resp=wc.l_ar)
        return replace(base, **overrides)

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.decode_steps < 1:
            raise ConfigError(f"decode_steps must be >= 1, got {self.decode_steps}")
        if self.q_layers < 2:
            raise ConfigError("the layer stack needs at least 2 layers")
        if not 1 <= self.prompt_len <= self.l_resp:
            raise ConfigError(
                f"prompt_len must lie in [1, {self.l_resp}], got {self.prompt_len}")
        for name in ("v_l1", "k_nar", "l_resp", "d_model", "n_layers",
                     "n_heads", "d_ffn"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass(frozen=True)
class NarItem:
    """One training item: same-speaker prompt stack, conditioning layer 1,
    and the golden upper layers to predict."""
    speaker: int
    prompt: np.ndarray   # (Q, P)
    layer1: np.ndarray   # (L,)
    targets: np.ndarray  # (Q - 1, L)


def build_nar_items(stacks: np.ndarray, speakers: np.ndarray,
                    prompt_len: int) -> list[NarItem]:
    """Pair each utterance with the next utterance of the same speaker, whose
    leading segment becomes the prompt."""
    stacks = np.asarray(stacks, dtype=np.int64)
    speakers = np.asarray(speakers, dtype=np.int64)
    if stacks.ndim != 3 or len(stacks) != len(speakers):
        raise ShapeError(f"stacks must be (N, Q, L) aligned with speakers, "
                         f"got {stacks.shape} and {speakers.shape}")
    if stacks.shape[2] < prompt_len:
        raise ConfigError(f"utterances of length {stacks.shape[2]} cannot "
                          f"provide prompts of length {prompt_len}")
    by_speaker: dict[int, list[int]] = {}
    for i, s in enumerate(speakers):
        by_speaker.setdefault(int(s), []).append(i)
    items: list[NarItem] = []
    for i, s in enumerate(speakers):
        group = by_speaker[int(s)]
        if len(group) < 2:
            raise ConfigError(f"speaker {s} has a single utterance; prompts "
                              "must come from a distinct one")
        j = group[(group.index(i) + 1) % len(group)]
        items.append(NarItem(speaker=int(s), prompt=stacks[j, :, :prompt_len],
                             layer1=stacks[i, 0], targets=stacks[i, 1:]))
    return items


def _collate(items: list[NarItem]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    prompts = np.stack([it.prompt for it in items])
    layer1 = np.stack([it.layer1 for it in items])
    targets = np.stack([it.targets for it in items])
    return prompts, layer1, targets


class NarModel:
    """Weights-agnostic model definition: shapes, forward, backward, decode."""

    def __init__(self, config: NarConfig):
        config.validate()
        self.config = config
        self.dims = nn.CoreDims(config.n_layers, config.n_heads,
                                config.d_model, config.d_ffn)
        d = config.d_model
        entries = [("emb_l1", (config.v_l1, d), "gauss")]
        entries += [(f"emb_l{q}", (config.k_nar + 1, d), "gauss")
                    for q in range(2, config.q_layers + 1)]
        entries += [
            ("pos_emb", (config.prompt_len + config.l_resp, d), "gauss"),
            ("seg_emb", (2, d), "gauss"),
        ]
        entries += nn.core_entries(self.dims)
        entries += [(f"head_l{q}", (d, config.k_nar), "gauss")
                    for q in range(2, config.q_layers + 1)]
        self.spec = nn.ParamSpec(entries)

    def init_params(self) -> np.ndarray:
        gen = rng.generator(rng.mix64(self.config.param_seed, rng.STREAM_INIT))
        return self.spec.init(gen, self.config.init_std)

    # -- forward --------------------------------------------------------------

    def _check_inputs(self, prompts, layer1, upper):
        c = self.config
        b, l = layer1.shape
        if prompts.shape != (b, c.q_layers, c.prompt_len):
            raise ShapeError(f"prompts must be (B, {c.q_layers}, {c.prompt_len}), "
                             f"got {prompts.shape}")
        if upper.shape != (b, c.q_layers - 1, l):
            raise ShapeError(f"upper layers must be (B, {c.q_layers - 1}, {l}), "
                             f"got {upper.shape}")
        if l < 1 or l > c.l_resp:
            raise ShapeError(f"layer-1 length {l} outside [1, {c.l_resp}]")

    def _x0(self, v, prompts, layer1, upper):
        c = self.config
        b, l = layer1.shape
        p = c.prompt_len
        x0 = np.empty((b, p + l, c.d_model))
        x0[:, :p] = v["emb_l1"][prompts[:, 0]]
        x0[:, p:] = v["emb_l1"][layer1]
        for q in range(2, c.q_layers + 1):
            emb = v[f"emb_l{q}"]
            x0[:, :p] += emb[prompts[:, q - 1]]
            x0[:, p:] += emb[upper[:, q - 2]]
        x0 += v["pos_emb"][:p + l]
        x0[:, :p] += v["seg_emb"][0]
        x0[:, p:] += v["seg_emb"][1]
        return x0

    def _forward(self, params, prompts, layer1, upper, need_cache):
        self._check_inputs(prompts, layer1, upper)
        v = self.spec.views(params)
        x0 = self._x0(v, prompts, layer1, upper)
        hf, cache = nn.core_forward(v, self.dims, x0, causal=False,
                                    need_cache=need_cache)
        return hf, cache, v

    def layer_logits(self, params, prompts, layer1, upper, q) -> np.ndarray:
        """Logits over layer-q tokens at every response position, (B, L, K)."""
        hf, _, v = self._forward(params, prompts, layer1, upper, False)
        return hf[:, self.config.prompt_len:] @ v[f"head_l{q}"]

    # -- training objective ------------------------------------------------------

    def nll_and_grad(self, params, prompts, layer1, upper, q, mask, targets
                     ) -> tuple[float, np.ndarray]:
        """Mean NLL of layer-q `targets` at `mask` positions, with the exact
        gradient in flat parameter coordinates."""
        c = self.config
        n_masked = int(mask.sum())
        if n_masked == 0:
            raise ShapeError("the training mask selects no positions")
        hf, cache, v = self._forward(params, prompts, layer1, upper, True)
        p = c.prompt_len
        head = v[f"head_l{q}"]
        logits = hf[:, p:] @ head
        bidx, tidx = np.nonzero(mask)
        rows = logits[bidx, tidx]
        lsm = nn.log_softmax(rows)
        tgt = targets[bidx, tidx]
        loss = float(-lsm[np.arange(len(rows)), tgt].mean())

        drows = nn.softmax(rows)
        drows[np.arange(len(rows)), tgt] -= 1.0
        drows /= n_masked
        dresp = np.zeros_like(logits)
        dresp[bidx, tidx] = drows

        gflat = np.zeros(self.spec.total)
        g = self.spec.views(gflat)
        hresp = hf[:, p:]
        g[f"head_l{q}"] += hresp.reshape(-1, c.d_model).T @ dresp.reshape(-1, c.k_nar)
        dhf = np.zeros_like(hf)
        dhf[:, p:] = dresp @ head.T
        dx0 = nn.core_backward(v, g, self.dims, cache, dhf)

        b, l = layer1.shape
        np.add.at(g["emb_l1"], prompts[:, 0], dx0[:, :p])
        np.add.at(g["emb_l1"], layer1, dx0[:, p:])
        for qq in range(2, c.q_layers + 1):
            ge = g[f"emb_l{qq}"]
            np.add.at(ge, prompts[:, qq - 1], dx0[:, :p])
            np.add.at(ge, upper[:, qq - 2], dx0[:, p:])
        g["pos_emb"][:p + l] += dx0.sum(axis=0)
        g["seg_emb"][0] += dx0[:, :p].sum(axis=(0, 1))
        g["seg_emb"][1] += dx0[:, p:].sum(axis=(0, 1))
        return loss, gflat

    # -- decoding -----------------------------------------------------------------

    def _schedule(self, l: int, steps: int) -> list[int]:
        """Cumulative number of committed positions after each decode step."""
        ks = np.arange(1, steps + 1)
        counts = np.ceil((1.0 - np.cos(0.5 * np.pi * ks / steps)) * l).astype(int)
        counts[-1] = l
        return list(np.maximum.accumulate(counts))

    def decode_batch(self, params, prompts, layer1, *, steps: int | None = None,
                     seed: int = 0, trace: list | None = None) -> np.ndarray:
        """Fill layers 2..Q for a batch of equal-length layer-1 sequences.

        Layers are decoded coarse-to-fine; within a layer, the positions with
        the highest argmax probability are committed first following a cosine
        schedule.  Greedy confidence decoding is deterministic; `seed` is
        accepted for interface stability."""
        c = self.config
        prompts = np.asarray(prompts, dtype=np.int64)
        layer1 = np.asarray(layer1, dtype=np.int64)
        b, l = layer1.shape
        steps = c.decode_steps if steps is None else steps
        if steps < 1:
            raise ConfigError(f"decode steps must be >= 1, got {steps}")
        upper = np.full((b, c.q_layers - 1, l), c.mask_id, dtype=np.int64)
        self._check_inputs(prompts, layer1, upper)
        counts = self._schedule(l, steps)
        for q in range(2, c.q_layers + 1):
            committed = np.zeros((b, l), dtype=bool)
            for k in range(steps):
                hf, _, v = self._forward(params, prompts, layer1, upper, False)
                logits = hf[:, c.prompt_len:] @ v[f"head_l{q}"]
                probs = nn.softmax(logits)
                conf = probs.max(axis=-1)
                choice = probs.argmax(axis=-1)
                for j in range(b):
                    need = counts[k] - int(committed[j].sum())
                    if need <= 0:
                        continue
                    cand = np.nonzero(~committed[j])[0]
                    order = cand[np.argsort(-conf[j, cand], kind="stable")]
                    sel = order[:need]
                    upper[j, q - 2, sel] = choice[j, sel]
                    committed[j, sel] = True
                if trace is not None:
                    trace.append((q, committed.copy(), upper[:, q - 2].copy()))
            assert committed.all()
        return upper

    def decode(self, params, prompt, layer1, *, steps: int | None = None,
               seed: int = 0, trace: list | None = None) -> np.ndarray:
        out = self.decode_batch(params, np.asarray(prompt)[None],
                                np.asarray(layer1)[None], steps=steps,
                                seed=seed, trace=trace)
        return out[0]


# --- training ----------------------------------------------------------------------


def _draw_step_mask(gen: np.random.Generator, q_layers: int, b: int, l: int
                    ) -> tuple[int, np.ndarray]:
    """Draw (target layer, mask) for one step: a uniform layer and a
    uniform-random fraction of its positions, rounded up so at least one
    position is hidden.  A degenerate empty draw (u = 0) is redrawn."""
    while True:
        q = 2 + int(gen.integers(0, q_layers - 1))
        u = float(gen.random())
        count = int(np.ceil(u * l))
        if count == 0:
            continue
        mask = np.zeros((b, l), dtype=bool)
        for j in range(b):
            mask[j, gen.permutation(l)[:count]] = True
        return q, mask


def nar_train(model: NarModel, params: np.ndarray, items: list[NarItem], *,
              epochs: int, lr: float, batch: int, seed: int,
              log_path: str | None = None) -> tuple[np.ndarray, list[float]]:
    """Masked-prediction training over golden stacks.

    Each step picks one target layer uniformly, hides a uniform-random
    fraction of its positions, and minimizes the NLL of the hidden tokens."""
    n = len(items)
    if n == 0:
        raise ShapeError("nar_train needs a non-empty dataset")
    c = model.config
    prompts, layer1, targets = _collate(items)
    params = params.copy()
    state = nn.AdamState(model.spec.total)
    logger = JsonlLogger(log_path)
    history = []
    step = 0
    try:
        for epoch in range(epochs):
            order = rng.generator(rng.mix64(rng.mix64(seed, rng.STREAM_TRAIN), epoch)
                                  ).permutation(n)
            losses = []
            for lo in range(0, n, batch):
                idx = order[lo:lo + batch]
                gen = rng.generator(rng.mix64(rng.mix64(seed, rng.STREAM_MASK), step))
                q, mask = _draw_step_mask(gen, c.q_layers, len(idx), layer1.shape[1])
                upper = targets[idx].copy()
                upper[:, q - 2][mask] = c.mask_id
                upper[:, q - 1:] = c.mask_id  # finer layers unseen during training
                loss, grad = model.nll_and_grad(params, prompts[idx], layer1[idx],
                                                upper, q, mask, targets[idx][:, q - 2])
                if not np.isfinite(loss):
                    raise ConvergenceError(f"nar_train diverged at step {step}: "
                                           f"loss={loss}")
                params = nn.adam_step(params, grad, state, lr)
                losses.append(loss)
                logger.log(step=step, loss=loss, lr=lr, epoch=epoch, layer=q)
                step += 1
            history.append(float(np.mean(losses)))
    finally:
        logger.close()
    return params, history


# --- reconstruction ------------------------------------------------------------------


def reconstruct_batch(world: World, model: NarModel, params: np.ndarray,
                      texts: np.ndarray, speakers: np.ndarray,
                      prompts: np.ndarray, layer1s: list[np.ndarray],
                      *, steps: int | None = None, seed: int = 0
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Decode full stacks from layer-1 sequences and score them.

    Returns per-item (TER vs the input text, SIM vs the speaker reference).
    Empty layer-1 inputs score TER 1.0 (everything deleted) and SIM 0.0;
    a trailing partial block transcribes as deletions."""
    n = len(layer1s)
    ters = np.empty(n)
    sims = np.empty(n)
    by_len: dict[int, list[int]] = {}
    for i, y in enumerate(layer1s):
        if len(y) == 0:
            ters[i] = 1.0
            sims[i] = 0.0
        else:
            by_len.setdefault(len(y), []).append(i)
    for l, idx in sorted(by_len.items()):
        group = np.array(idx, dtype=np.int64)
        layer1 = np.stack([np.asarray(layer1s[i], dtype=np.int64) for i in idx])
        upper = model.decode_batch(params, prompts[group], layer1,
                                   steps=steps, seed=seed)
        for row, i in enumerate(idx):
            stack = np.vstack([layer1[row][None, :], upper[row]])
            hyp = transcription(world, int(speakers[i]), layer1[row])
            ters[i] = ter(hyp, texts[i])
            sims[i] = sim(world, stack, int(speakers[i]))
    return ters, sims


def reconstruct(world: World, model: NarModel, params: np.ndarray,
                text: np.ndarray, speaker: int, prompt: np.ndarray,
                layer1: np.ndarray, *, steps: int | None = None,
                seed: int = 0) -> tuple[float, float]:
    ters, sims = reconstruct_batch(
        world, model, params, np.asarray(text)[None], np.array([speaker]),
        np.asarray(prompt)[None], [np.asarray(layer1)], steps=steps, seed=seed)
    return float(ters[0]), float(sims[0])


# --- checkpoints -----------------------------------------------------------------------


def save_nar(path: str, model: NarModel, params: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(nar_bytes(model, params))


def nar_bytes(model: NarModel, params: np.ndarray) -> bytes:
    return model_bytes("nar", model.config, model.spec, params)


def load_nar(path: str) -> tuple[NarModel, np.ndarray]:
    config_d, loader, _ = load_model_file(path, "nar")
    try:
        config = NarConfig(**config_d)
    except TypeError as e:
        raise FormatError(f"bad NAR config in {path}: {e}") from e
    model = NarModel(config)
    return model, loader(model.spec)
