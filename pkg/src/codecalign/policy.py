"""Autoregressive policy over text + layer-1 codec tokens.

Sequences are framed as ``[GOOD|BAD]? BOS text SEP response EOS`` and only
the response span is scored: the layer-1 tokens, plus the closing EOS when
the response ended before the generation cap l_ar.  A response cut off by
the cap carries no EOS factor because generation stops there regardless of
what the model would emit.  At scored positions the distribution is the
softmax of the logits restricted to the response support (the K_ar layer-1
tokens plus EOS), so the model defines a proper distribution over the
outcome space of generation: summing exp(seq_logprob) over every response
reachable by `sample` yields exactly 1.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import container, nn, rng
from .autodiff import Value
from .errors import ConfigError, ConvergenceError, FormatError, NumericError, ShapeError

CKPT_MAGIC = b"SALM"
CKPT_VERSION = 1

CONTROL_GOOD = "good"
CONTROL_BAD = "bad"


@dataclass(frozen=True)
class ArConfig:
    v_text: int = 16
    k_ar: int = 32
    l_text: int = 12
    l_ar: int = 24
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ffn: int = 256
    max_context: int = 64
    init_std: float = 0.02
    param_seed: int = 0

    @staticmethod
    def for_world(wc, **overrides) -> "ArConfig":
        base = ArConfig(v_text=wc.v_text, k_ar=wc.k_ar, l_text=wc.l_text, l_ar=wc.l_ar)
        return replace(base, **overrides)

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        need = 2 + self.l_text + 1 + self.l_ar + 1
        if self.max_context < need:
            raise ConfigError(
                f"max_context {self.max_context} below framed length {need}")
        for name in ("v_text", "k_ar", "l_text", "l_ar", "d_model", "n_layers",
                     "n_heads", "d_ffn"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.init_std > 0:
            raise ConfigError(f"init_std must be > 0, got {self.init_std}")


class Vocab:
    """Token-id layout: text, layer-1 tokens, then specials."""

    def __init__(self, v_text: int, k_ar: int):
        self.v_text = v_text
        self.k_ar = k_ar
        self.ar0 = v_text
        self.bos = v_text + k_ar
        self.sep = self.bos + 1
        self.eos = self.bos + 2
        self.good = self.bos + 3
        self.bad = self.bos + 4
        self.size = v_text + k_ar + 5
        # response support: layer-1 token ids then EOS
        self.resp_ids = np.concatenate(
            [np.arange(self.ar0, self.ar0 + k_ar), [self.eos]]).astype(np.int64)
        self.resp_index = np.full(self.size, -1, dtype=np.int64)
        self.resp_index[self.resp_ids] = np.arange(k_ar + 1)

    def control_id(self, control: str | None) -> int | None:
        if control is None:
            return None
        if control == CONTROL_GOOD:
            return self.good
        if control == CONTROL_BAD:
            return self.bad
        raise ConfigError(f"unknown control token {control!r}")


@dataclass
class Frames:
    """A rectangular batch of framed sequences with scoring masks."""
    tokens: np.ndarray     # (B, T) int64, right-padded with EOS
    resp_mask: np.ndarray  # (B, T) bool: scored positions (tokens + EOS if uncapped)
    y_mask: np.ndarray     # (B, T) bool: response tokens only
    y_lens: np.ndarray     # (B,) int64
    prefix_len: int

    def __len__(self):
        return len(self.tokens)


def build_frames(vocab: Vocab, xs: np.ndarray, ys: list[np.ndarray],
                 control, l_cap: int) -> Frames:
    """Frame a batch.  `control` is None, a control name, or a per-row list
    (all rows must agree on whether a control token is present).  `l_cap` is
    the generation cap: responses shorter than it end by emitting EOS, which
    is therefore a scored position, while responses of exactly `l_cap` tokens
    end by running out of budget and their trailing EOS is mere framing."""
    xs = np.asarray(xs, dtype=np.int64)
    if xs.ndim != 2:
        raise ShapeError(f"xs must be (B, l_text), got {xs.shape}")
    b = len(xs)
    if isinstance(control, (str, type(None))):
        controls = [control] * b
    else:
        controls = list(control)
    if len(controls) != b:
        raise ShapeError(f"{len(controls)} controls for batch of {b}")
    has_ctl = [c is not None for c in controls]
    if any(has_ctl) and not all(has_ctl):
        raise ShapeError("cannot mix framed rows with and without control tokens")
    ctl_ids = [vocab.control_id(c) for c in controls]
    l_text = xs.shape[1]
    prefix_len = (2 if has_ctl[0] else 1) + l_text + 1
    y_lens = np.array([len(y) for y in ys], dtype=np.int64)
    t_max = prefix_len + int(y_lens.max(initial=0)) + 1
    tokens = np.full((b, t_max), vocab.eos, dtype=np.int64)
    resp_mask = np.zeros((b, t_max), dtype=bool)
    y_mask = np.zeros((b, t_max), dtype=bool)
    for j in range(b):
        pos = 0
        if ctl_ids[j] is not None:
            tokens[j, 0] = ctl_ids[j]
            pos = 1
        tokens[j, pos] = vocab.bos
        tokens[j, pos + 1:pos + 1 + l_text] = xs[j]
        tokens[j, pos + 1 + l_text] = vocab.sep
        y = np.asarray(ys[j], dtype=np.int64)
        if len(y) > l_cap:
            raise ShapeError(f"response of {len(y)} tokens exceeds cap {l_cap}")
        if y.size and (y.min() < 0 or y.max() >= vocab.k_ar):
            raise ShapeError(f"response tokens must lie in [0, {vocab.k_ar})")
        start = prefix_len
        tokens[j, start:start + len(y)] = y + vocab.ar0
        y_mask[j, start:start + len(y)] = True
        scored = len(y) + (1 if len(y) < l_cap else 0)
        resp_mask[j, start:start + scored] = True
    return Frames(tokens=tokens, resp_mask=resp_mask, y_mask=y_mask,
                  y_lens=y_lens, prefix_len=prefix_len)


class ArModel:
    """Weights-agnostic model definition: shapes, forward, backward."""

    def __init__(self, config: ArConfig):
        config.validate()
        self.config = config
        self.vocab = Vocab(config.v_text, config.k_ar)
        self.dims = nn.CoreDims(config.n_layers, config.n_heads,
                                config.d_model, config.d_ffn)
        entries = [
            ("tok_emb", (self.vocab.size, config.d_model), "gauss"),
            ("pos_emb", (config.max_context, config.d_model), "gauss"),
        ] + nn.core_entries(self.dims) + [
            ("lm_head", (config.d_model, self.vocab.size), "gauss"),
        ]
        self.spec = nn.ParamSpec(entries)

    # -- parameters -----------------------------------------------------------

    def init_params(self) -> np.ndarray:
        gen = rng.generator(rng.mix64(self.config.param_seed, rng.STREAM_INIT))
        return self.spec.init(gen, self.config.init_std)

    # -- forward --------------------------------------------------------------

    def _forward(self, params: np.ndarray, tokens: np.ndarray, need_cache: bool):
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be (B, T), got {tokens.shape}")
        if tokens.shape[1] > self.config.max_context:
            raise ShapeError(
                f"sequence length {tokens.shape[1]} exceeds max_context "
                f"{self.config.max_context}")
        v = self.spec.views(params)
        x0 = v["tok_emb"][tokens] + v["pos_emb"][:tokens.shape[1]]
        hf, cache = nn.core_forward(v, self.dims, x0, causal=True, need_cache=need_cache)
        logits = hf @ v["lm_head"]
        return logits, hf, cache, v

    def forward_logits(self, params: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        logits, _, _, _ = self._forward(params, np.asarray(tokens, dtype=np.int64), False)
        return logits

    def _backward(self, params, tokens, hf, cache, dlogits, dhf_extra=None) -> np.ndarray:
        v = self.spec.views(params)
        gflat = np.zeros(self.spec.total)
        g = self.spec.views(gflat)
        b, t, _ = hf.shape
        dhf = np.zeros_like(hf)
        if dlogits is not None:
            d = self.config.d_model
            g["lm_head"] += hf.reshape(-1, d).T @ dlogits.reshape(-1, self.vocab.size)
            dhf += dlogits @ v["lm_head"].T
        if dhf_extra is not None:
            dhf += dhf_extra
        dx0 = nn.core_backward(v, g, self.dims, cache, dhf)
        np.add.at(g["tok_emb"], tokens, dx0)
        g["pos_emb"][:t] += dx0.sum(axis=0)
        return gflat

    # -- log-likelihood -------------------------------------------------------

    def _resp_rows(self, frames: Frames):
        bidx, tidx = np.nonzero(frames.resp_mask)
        return bidx, tidx - 1, frames.tokens[bidx, tidx]

    def seq_logprob_batch(self, params: np.ndarray, frames: Frames) -> np.ndarray:
        logits, _, _, _ = self._forward(params, frames.tokens, False)
        return self._gather_logprobs(logits, frames)

    def _gather_logprobs(self, logits: np.ndarray, frames: Frames) -> np.ndarray:
        bidx, pidx, targets = self._resp_rows(frames)
        rows = logits[bidx, pidx][:, self.vocab.resp_ids]
        lse = nn.log_softmax(rows)
        tgt = self.vocab.resp_index[targets]
        if (tgt < 0).any():
            raise ShapeError("scored target outside the response support")
        lp = lse[np.arange(len(rows)), tgt]
        out = np.zeros(len(frames))
        np.add.at(out, bidx, lp)
        return out

    def frames(self, xs: np.ndarray, ys: list[np.ndarray], control=None) -> Frames:
        return build_frames(self.vocab, xs, ys, control, self.config.l_ar)

    def seq_logprob(self, params, x, y, control=None) -> float:
        frames = self.frames(np.asarray(x)[None, :], [np.asarray(y)], control)
        return float(self.seq_logprob_batch(params, frames)[0])

    def logprob_pull(self, params: np.ndarray, frames: Frames):
        """Returns (per-sequence logprobs, pull) where pull(weights) is the
        gradient of sum_b weights[b] * logprob_b."""
        logits, hf, cache, _ = self._forward(params, frames.tokens, True)
        lps = self._gather_logprobs(logits, frames)
        bidx, pidx, targets = self._resp_rows(frames)
        rows = logits[bidx, pidx][:, self.vocab.resp_ids]
        probs = nn.softmax(rows)
        tgt = self.vocab.resp_index[targets]

        def pull(weights: np.ndarray) -> np.ndarray:
            w = np.asarray(weights, dtype=np.float64)[bidx]
            drows = -probs * w[:, None]
            drows[np.arange(len(drows)), tgt] += w
            dlogits = np.zeros_like(logits)
            np.add.at(dlogits, (bidx[:, None], pidx[:, None], self.vocab.resp_ids[None, :]),
                      drows)
            return self._backward(params, frames.tokens, hf, cache, dlogits)

        return lps, pull

    # -- representations ------------------------------------------------------

    def pooled_batch(self, params: np.ndarray, frames: Frames) -> np.ndarray:
        if (frames.y_lens == 0).any():
            raise ShapeError("pooled representation undefined for empty responses")
        _, hf, _, _ = self._forward(params, frames.tokens, False)
        out = np.zeros((len(frames), self.config.d_model))
        bidx, tidx = np.nonzero(frames.y_mask)
        np.add.at(out, bidx, hf[bidx, tidx])
        return out / frames.y_lens[:, None]

    def pooled_rep(self, params, x, y) -> np.ndarray:
        frames = self.frames(np.asarray(x)[None, :], [np.asarray(y)], None)
        return self.pooled_batch(params, frames)[0]

    def response_logits_batch(self, params: np.ndarray, frames: Frames) -> np.ndarray:
        """Model logits over the K_ar support at every response position
        (teacher-forced along the framed tokens).  Shape (sum y_lens, K_ar)."""
        logits, _, _, _ = self._forward(params, frames.tokens, False)
        bidx, tidx = np.nonzero(frames.y_mask)
        return logits[bidx, tidx - 1][:, self.vocab.resp_ids[:-1]]

    # -- sampling -------------------------------------------------------------

    def sample_batch(self, params: np.ndarray, xs: np.ndarray, control,
                     temperature: float, seeds: np.ndarray) -> list[np.ndarray]:
        if temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {temperature}")
        xs = np.asarray(xs, dtype=np.int64)
        b = len(xs)
        frames = self.frames(xs, [np.empty(0, dtype=np.int64)] * b, control)
        prefix = frames.tokens[:, :frames.prefix_len]
        l_ar = self.config.l_ar
        if temperature > 0:
            u = np.empty((b, l_ar))
            for j in range(b):
                u[j] = rng.generator(int(seeds[j])).random(l_ar)
        buf = np.full((b, frames.prefix_len + l_ar), self.vocab.eos, dtype=np.int64)
        buf[:, :frames.prefix_len] = prefix
        active = np.ones(b, dtype=bool)
        lens = np.zeros(b, dtype=np.int64)
        k = self.config.k_ar
        for t in range(l_ar):
            if not active.any():
                break
            pos = frames.prefix_len + t
            logits, _, _, _ = self._forward(params, buf[:, :pos], False)
            rows = logits[:, -1, :][:, self.vocab.resp_ids]
            if temperature == 0:
                choice = np.argmax(rows, axis=-1)
            else:
                cdf = np.cumsum(nn.softmax(rows / temperature), axis=-1)
                choice = np.minimum((cdf < u[:, t, None]).sum(axis=1), k)
            hit_eos = choice == k
            newly = active & ~hit_eos
            buf[newly, pos] = self.vocab.ar0 + choice[newly]
            lens[newly] += 1
            active &= ~hit_eos
        return [buf[j, frames.prefix_len:frames.prefix_len + lens[j]] - self.vocab.ar0
                for j in range(b)]

    def sample(self, params, x, control, temperature, sample_seed) -> np.ndarray:
        return self.sample_batch(params, np.asarray(x)[None, :], control,
                                 temperature, np.array([sample_seed], dtype=np.uint64))[0]


# --- objective differentiation ----------------------------------------------

class DiffContext:
    """Differentiable primitives bound to one (model, params) pair.

    Objectives call these to obtain scalar `Value` leaves; after the scalar
    graph is backpropagated, each registered pull maps leaf gradients back
    to a flat parameter gradient.
    """

    def __init__(self, model, params: np.ndarray):
        self.model = model
        self.params = params
        self._pending: list[tuple[list[Value], object]] = []

    def seq_logprob(self, frames: Frames) -> list[Value]:
        lps, pull = self.model.logprob_pull(self.params, frames)
        if not np.isfinite(lps).all():
            raise NumericError("non-finite sequence log-probability in forward pass")
        leaves = [Value(lp) for lp in lps]
        self._pending.append((leaves, pull))
        return leaves

    def reward(self, frames: Frames) -> list[Value]:
        if not hasattr(self.model, "reward_pull"):
            raise ConfigError("model exposes no reward head")
        scores, pull = self.model.reward_pull(self.params, frames)
        if not np.isfinite(scores).all():
            raise NumericError("non-finite reward in forward pass")
        leaves = [Value(s) for s in scores]
        self._pending.append((leaves, pull))
        return leaves

    def resolve(self, root: Value, n_params: int) -> np.ndarray:
        root.backward()
        grad = np.zeros(n_params)
        for leaves, pull in self._pending:
            weights = np.array([leaf.grad for leaf in leaves])
            if np.any(weights):
                grad += pull(weights)
        return grad


def loss_and_grad(model, params: np.ndarray, objective) -> tuple[float, np.ndarray]:
    """Evaluate a scalar objective built from DiffContext primitives and
    return (loss, flat gradient)."""
    ctx = DiffContext(model, params)
    root = objective(ctx)
    if not isinstance(root, Value):
        root = Value(float(root))
    if not np.isfinite(root.data):
        raise NumericError(f"objective evaluated to {root.data}")
    grad = ctx.resolve(root, model.spec.total)
    return root.data, grad


# --- training ----------------------------------------------------------------

class JsonlLogger:
    def __init__(self, path: str | None):
        self.path = path
        self._f = open(path, "w", encoding="utf-8") if path else None
        self._t0 = time.perf_counter()

    def log(self, **fields):
        if self._f is None:
            return
        fields.setdefault("wall_time", round(time.perf_counter() - self._t0, 6))
        self._f.write(json.dumps(fields, sort_keys=True) + "\n")

    def close(self):
        if self._f is not None:
            self._f.close()
            self._f = None


def _check_finite(loss: float, what: str, step: int):
    if not np.isfinite(loss):
        raise ConvergenceError(f"{what} diverged at step {step}: loss={loss}")


def sft_train(model: ArModel, params: np.ndarray, xs: np.ndarray, ys: np.ndarray,
              *, epochs: int, lr: float, batch: int, seed: int,
              control=None, log_path: str | None = None
              ) -> tuple[np.ndarray, list[float]]:
    """Minimize mean NLL per scored position over (x, y) pairs.

    Returns updated params and the per-epoch mean loss history.
    """
    n = len(xs)
    if n == 0:
        raise ShapeError("sft_train needs a non-empty dataset")
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
                frames = model.frames(xs[idx], [ys[i] for i in idx], control)
                lps, pull = model.logprob_pull(params, frames)
                n_pos = int(frames.resp_mask.sum())
                loss = float(-lps.sum() / n_pos)
                _check_finite(loss, "sft_train", step)
                grad = pull(np.full(len(idx), -1.0 / n_pos))
                params = nn.adam_step(params, grad, state, lr)
                losses.append(loss)
                logger.log(step=step, loss=loss, lr=lr, epoch=epoch)
                step += 1
            history.append(float(np.mean(losses)))
    finally:
        logger.close()
    return params, history


# --- checkpoints ---------------------------------------------------------------

def save_model_file(path: str, kind: str, config, spec: nn.ParamSpec,
                    params: np.ndarray, extra: dict | None = None) -> None:
    data = model_bytes(kind, config, spec, params, extra)
    with open(path, "wb") as f:
        f.write(data)


def model_bytes(kind: str, config, spec: nn.ParamSpec, params: np.ndarray,
                extra: dict | None = None) -> bytes:
    tensors = {name: spec.view(params, name) for name, _, _ in spec.entries}
    meta = dict(extra or {})
    meta["kind"] = kind
    return container.pack(CKPT_MAGIC, CKPT_VERSION, asdict(config), tensors, meta)


def load_model_file(path: str, kind: str):
    """Returns (config dict, loader) where loader(spec) -> flat params."""
    config_d, tensors, extra = container.read_file(path, CKPT_MAGIC, CKPT_VERSION)
    if extra.get("kind") != kind:
        raise FormatError(
            f"checkpoint {path} holds a {extra.get('kind')!r} model, expected {kind!r}")

    def loader(spec: nn.ParamSpec) -> np.ndarray:
        flat = np.empty(spec.total)
        for name, _, _ in spec.entries:
            if name not in tensors:
                raise FormatError(f"checkpoint {path} is missing tensor {name!r}")
            spec.view(flat, name)[...] = tensors[name]
        return flat

    return config_d, loader, extra


@dataclass
class Policy:
    """A concrete policy: model shape + weights + inference control token."""
    model: ArModel
    params: np.ndarray
    control: str | None = None

    @staticmethod
    def fresh(config: ArConfig) -> "Policy":
        model = ArModel(config)
        return Policy(model=model, params=model.init_params())

    def clone(self) -> "Policy":
        return Policy(model=self.model, params=self.params.copy(), control=self.control)

    def fingerprint(self) -> str:
        return container.sha256_hex(self.to_bytes())

    def to_bytes(self) -> bytes:
        return model_bytes("ar", self.model.config, self.model.spec, self.params,
                           {"control": self.control or ""})

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @staticmethod
    def load(path: str) -> "Policy":
        config_d, loader, extra = load_model_file(path, "ar")
        try:
            config = ArConfig(**config_d)
        except TypeError as e:
            raise FormatError(f"bad policy config in {path}: {e}") from e
        model = ArModel(config)
        params = loader(model.spec)
        return Policy(model=model, params=params, control=extra.get("control") or None)

    # convenience pass-throughs used across modules
    def sample_batch(self, xs, temperature, seeds, control="inherit"):
        ctl = self.control if control == "inherit" else control
        return self.model.sample_batch(self.params, xs, ctl, temperature, seeds)

    def seq_logprob_batch(self, frames: Frames) -> np.ndarray:
        return self.model.seq_logprob_batch(self.params, frames)

    def response_logits(self, xs, ys) -> np.ndarray:
        """Teacher-forced logits over the layer-1 support at every response
        position, framed with this policy's control token.  Rows are ordered
        by (item, position).  Shape (sum of len(y), K_ar)."""
        frames = self.model.frames(np.asarray(xs, dtype=np.int64),
                                   [np.asarray(y, dtype=np.int64) for y in ys],
                                   self.control)
        return self.model.response_logits_batch(self.params, frames)

    def pooled_batch(self, frames: Frames) -> np.ndarray:
        return self.model.pooled_batch(self.params, frames)
