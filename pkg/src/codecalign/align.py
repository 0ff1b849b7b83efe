"""Preference-optimization methods over the autoregressive policy.

Four ways to consume a preference dataset — control-token supervision
(good/bad framing), direct preference optimization against a frozen
reference, a pairwise reward model with PPO, and best-of-N reranking —
plus a control that simply continues supervised training on the golden
half.  Every gradient flows through the same differentiable primitives
as supervised training, so all objectives share one finite-difference
story.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container, nn, rng
from .autodiff import vmean
from .errors import (ConfigError, ConvergenceError, FormatError, NumericError,
                     ShapeError)
from .policy import (CONTROL_BAD, CONTROL_GOOD, ArConfig, ArModel, Frames,
                     JsonlLogger, Policy, load_model_file, model_bytes,
                     loss_and_grad, sft_train)
from .prefdata import PreferenceDataset, PreferenceTriple

METHODS = ("coh", "dpo", "ppo", "bon", "continue-sft")


@dataclass(frozen=True)
class AlignConfig:
    """Hyperparameters shared by the alignment methods; each method reads
    the general knobs (lr, batch, epochs, seed) plus its own section."""
    method: str = "dpo"
    lr: float = 1e-3
    batch: int = 16
    epochs: int = 1
    seed: int = 0
    temperature: float = 1.0
    dpo_beta: float = 1.0
    ppo_clip: float = 0.2
    ppo_kl_beta: float = 0.05
    ppo_kl_abort: float = 10.0
    ppo_steps: int = 30
    ppo_rollout_batch: int = 16
    ppo_inner_epochs: int = 2
    bon_n: int = 8

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; "
                              f"choose from {METHODS}")
        for name in ("lr", "dpo_beta", "temperature"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch", "epochs", "ppo_steps", "ppo_rollout_batch",
                     "ppo_inner_epochs", "bon_n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 < self.ppo_clip < 1:
            raise ConfigError(f"ppo_clip must lie in (0, 1), got {self.ppo_clip}")
        if self.ppo_kl_beta < 0 or self.ppo_kl_abort <= 0:
            raise ConfigError("ppo_kl_beta must be >= 0 and ppo_kl_abort > 0")


def _train_step(what: str, step: int, model, params: np.ndarray,
                objective) -> tuple[float, np.ndarray]:
    """One loss/grad evaluation with a uniform divergence contract: any
    non-finite value surfaces as ConvergenceError naming the step."""
    try:
        loss, grad = loss_and_grad(model, params, objective)
    except NumericError as e:
        raise ConvergenceError(f"{what} diverged at step {step}: {e}") from e
    if not np.isfinite(loss):
        raise ConvergenceError(f"{what} diverged at step {step}: loss={loss}")
    return loss, grad


def _batches(n: int, batch: int, seed: int, epochs: int):
    """Yield (epoch, step, indices) with a fresh permutation per epoch."""
    step = 0
    for epoch in range(epochs):
        order = rng.generator(rng.mix64(rng.mix64(seed, rng.STREAM_TRAIN), epoch)
                              ).permutation(n)
        for lo in range(0, n, batch):
            yield epoch, step, order[lo:lo + batch]
            step += 1


def _pair_frames(model: ArModel, triples: list[PreferenceTriple],
                 golden_control=None, synth_control=None
                 ) -> tuple[Frames, Frames]:
    xs = np.stack([t.text for t in triples])
    frames_g = model.frames(xs, [t.y_g for t in triples], golden_control)
    frames_s = model.frames(xs, [t.y_s for t in triples], synth_control)
    return frames_g, frames_s


# --- control-token supervision -------------------------------------------------


def coh_loss(policy: Policy, batch: list[PreferenceTriple]) -> float:
    """Mean over the batch of NLL(y_g | x, GOOD) + NLL(y_s | x, BAD)."""
    frames_g, frames_s = _pair_frames(policy.model, batch,
                                      CONTROL_GOOD, CONTROL_BAD)
    lp_g = policy.model.seq_logprob_batch(policy.params, frames_g)
    lp_s = policy.model.seq_logprob_batch(policy.params, frames_s)
    return float(-(lp_g + lp_s).mean())


def coh_train(policy: Policy, dataset: PreferenceDataset, config: AlignConfig,
              log_path: str | None = None) -> tuple[Policy, list[float]]:
    """Supervised training with quality labels in the prompt: golden
    responses behind the GOOD token, synthetic behind BAD.  The returned
    policy carries the GOOD control for inference."""
    config.validate()
    triples = list(dataset)
    if not triples:
        raise ShapeError("coh_train needs a non-empty dataset")
    model = policy.model
    params = policy.params.copy()
    state = nn.AdamState(model.spec.total)
    logger = JsonlLogger(log_path)
    per_epoch: dict[int, list[float]] = {}
    try:
        for epoch, step, idx in _batches(len(triples), config.batch,
                                         config.seed, config.epochs):
            batch = [triples[i] for i in idx]
            frames_g, frames_s = _pair_frames(model, batch,
                                              CONTROL_GOOD, CONTROL_BAD)

            def objective(ctx):
                lp_g = ctx.seq_logprob(frames_g)
                lp_s = ctx.seq_logprob(frames_s)
                return -vmean([g + s for g, s in zip(lp_g, lp_s)])

            loss, grad = _train_step("coh_train", step, model, params, objective)
            params = nn.adam_step(params, grad, state, config.lr)
            per_epoch.setdefault(epoch, []).append(loss)
            logger.log(step=step, loss=loss, lr=config.lr, epoch=epoch)
    finally:
        logger.close()
    history = [float(np.mean(per_epoch[e])) for e in sorted(per_epoch)]
    return Policy(model=model, params=params, control=CONTROL_GOOD), history


# --- direct preference optimization ----------------------------------------------


def _dpo_terms(policy: Policy, reference: Policy,
               batch: list[PreferenceTriple]) -> tuple[Frames, Frames,
                                                       np.ndarray, np.ndarray]:
    frames_g, frames_s = _pair_frames(policy.model, batch)
    ref_g = reference.model.seq_logprob_batch(reference.params, frames_g)
    ref_s = reference.model.seq_logprob_batch(reference.params, frames_s)
    return frames_g, frames_s, ref_g, ref_s


def dpo_loss(policy: Policy, reference: Policy, batch: list[PreferenceTriple],
             dpo_beta: float = 1.0) -> float:
    """-mean log sigmoid(beta * margin), margin = (lp_g - ref_g) - (lp_s - ref_s)."""
    frames_g, frames_s, ref_g, ref_s = _dpo_terms(policy, reference, batch)
    lp_g = policy.model.seq_logprob_batch(policy.params, frames_g)
    lp_s = policy.model.seq_logprob_batch(policy.params, frames_s)
    margin = dpo_beta * ((lp_g - ref_g) - (lp_s - ref_s))
    return float(np.logaddexp(0.0, -margin).mean())


def dpo_margin(policy: Policy, reference: Policy,
               batch: list[PreferenceTriple]) -> float:
    """Mean implicit-reward margin (lp_g - ref_g) - (lp_s - ref_s)."""
    frames_g, frames_s, ref_g, ref_s = _dpo_terms(policy, reference, batch)
    lp_g = policy.model.seq_logprob_batch(policy.params, frames_g)
    lp_s = policy.model.seq_logprob_batch(policy.params, frames_s)
    return float(((lp_g - ref_g) - (lp_s - ref_s)).mean())


def dpo_train(policy: Policy, dataset: PreferenceDataset, config: AlignConfig,
              log_path: str | None = None) -> tuple[Policy, list[dict]]:
    """Minimize the preference logistic loss against a reference frozen
    from the incoming policy.  History records per-step loss and margin;
    the margin starts at exactly zero and must trend positive."""
    config.validate()
    triples = list(dataset)
    if not triples:
        raise ShapeError("dpo_train needs a non-empty dataset")
    model = policy.model
    reference = policy.clone()
    params = policy.params.copy()
    state = nn.AdamState(model.spec.total)
    logger = JsonlLogger(log_path)
    history: list[dict] = []
    try:
        for epoch, step, idx in _batches(len(triples), config.batch,
                                         config.seed, config.epochs):
            batch = [triples[i] for i in idx]
            frames_g, frames_s, ref_g, ref_s = _dpo_terms(
                Policy(model, params), reference, batch)

            def objective(ctx):
                lp_g = ctx.seq_logprob(frames_g)
                lp_s = ctx.seq_logprob(frames_s)
                terms = [
                    -(config.dpo_beta * ((g - rg) - (s - rs))).logsigmoid()
                    for g, s, rg, rs in zip(lp_g, lp_s, ref_g, ref_s)]
                return vmean(terms)

            loss, grad = _train_step("dpo_train", step, model, params, objective)
            margin = dpo_margin(Policy(model, params), reference, batch)
            params = nn.adam_step(params, grad, state, config.lr)
            rec = {"step": step, "epoch": epoch, "loss": loss, "margin": margin}
            history.append(rec)
            logger.log(**rec, lr=config.lr)
    finally:
        logger.close()
    return Policy(model=model, params=params, control=policy.control), history


# --- reward model ---------------------------------------------------------------


class RewardNet:
    """Policy backbone plus a linear scalar head read at the hidden state of
    the last response token."""

    def __init__(self, config: ArConfig):
        self.backbone = ArModel(config)
        self.config = config
        self.vocab = self.backbone.vocab
        entries = list(self.backbone.spec.entries) + [
            ("reward_head.w", (config.d_model,), "zero"),
            ("reward_head.b", (1,), "zero"),
        ]
        self.spec = nn.ParamSpec(entries)

    def frames(self, xs, ys, control=None) -> Frames:
        return self.backbone.frames(xs, ys, control)

    def _split(self, params: np.ndarray):
        bb = params[:self.backbone.spec.total]
        w = self.spec.view(params, "reward_head.w")
        b = self.spec.view(params, "reward_head.b")
        return bb, w, b

    @staticmethod
    def _last_positions(frames: Frames) -> np.ndarray:
        if (frames.y_lens == 0).any():
            raise ShapeError("reward undefined for empty responses")
        return np.where(frames.y_mask,
                        np.arange(frames.tokens.shape[1]), -1).max(axis=1)

    def score_batch(self, params: np.ndarray, frames: Frames) -> np.ndarray:
        last = self._last_positions(frames)
        bb, w, b = self._split(params)
        _, hf, _, _ = self.backbone._forward(bb, frames.tokens, False)
        return hf[np.arange(len(frames)), last] @ w + b[0]

    def reward_pull(self, params: np.ndarray, frames: Frames):
        """Returns (scores, pull) where pull(weights) is the gradient of
        sum_b weights[b] * score_b in flat parameter coordinates."""
        last = self._last_positions(frames)
        bb, w, b = self._split(params)
        logits, hf, cache, _ = self.backbone._forward(bb, frames.tokens, True)
        rows = np.arange(len(frames))
        h_last = hf[rows, last]
        scores = h_last @ w + b[0]

        def pull(weights: np.ndarray) -> np.ndarray:
            ws = np.asarray(weights, dtype=np.float64)
            dhf = np.zeros_like(hf)
            dhf[rows, last] = ws[:, None] * w
            gflat = np.zeros(self.spec.total)
            gflat[:self.backbone.spec.total] = self.backbone._backward(
                bb, frames.tokens, hf, cache, dlogits=None, dhf_extra=dhf)
            self.spec.view(gflat, "reward_head.w")[...] = ws @ h_last
            self.spec.view(gflat, "reward_head.b")[...] = ws.sum()
            return gflat

        return scores, pull


@dataclass
class RewardModel:
    """A concrete reward model: net definition + weights."""
    net: RewardNet
    params: np.ndarray

    @staticmethod
    def from_policy(policy: Policy) -> "RewardModel":
        net = RewardNet(policy.model.config)
        params = np.zeros(net.spec.total)
        params[:policy.model.spec.total] = policy.params
        return RewardModel(net=net, params=params)

    def score_batch(self, frames: Frames) -> np.ndarray:
        return self.net.score_batch(self.params, frames)

    def score(self, x, y) -> float:
        frames = self.net.frames(np.asarray(x)[None, :], [np.asarray(y)])
        return float(self.score_batch(frames)[0])

    def fingerprint(self) -> str:
        return container.sha256_hex(self.to_bytes())

    def to_bytes(self) -> bytes:
        return model_bytes("reward", self.net.config, self.net.spec, self.params)

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @staticmethod
    def load(path: str) -> "RewardModel":
        config_d, loader, _ = load_model_file(path, "reward")
        try:
            config = ArConfig(**config_d)
        except TypeError as e:
            raise FormatError(f"bad reward config in {path}: {e}") from e
        net = RewardNet(config)
        return RewardModel(net=net, params=loader(net.spec))


def rm_loss(rm: RewardModel, batch: list[PreferenceTriple]) -> float:
    """-mean log sigmoid(r(x, y_g) - r(x, y_s))."""
    frames_g, frames_s = _pair_frames(rm.net.backbone, batch)
    diff = rm.score_batch(frames_g) - rm.score_batch(frames_s)
    return float(np.logaddexp(0.0, -diff).mean())


def pairwise_accuracy(rm: RewardModel, batch: list[PreferenceTriple]) -> float:
    """Fraction of pairs where the golden response outscores the synthetic."""
    frames_g, frames_s = _pair_frames(rm.net.backbone, batch)
    return float((rm.score_batch(frames_g) > rm.score_batch(frames_s)).mean())


def rm_train(policy_init: Policy, dataset: PreferenceDataset,
             config: AlignConfig, log_path: str | None = None
             ) -> tuple[RewardModel, list[float]]:
    """Fit the pairwise ranking loss, backbone and head jointly, starting
    from the current policy weights and a zero head."""
    config.validate()
    triples = list(dataset)
    if not triples:
        raise ShapeError("rm_train needs a non-empty dataset")
    rm = RewardModel.from_policy(policy_init)
    params = rm.params
    state = nn.AdamState(rm.net.spec.total)
    logger = JsonlLogger(log_path)
    per_epoch: dict[int, list[float]] = {}
    try:
        for epoch, step, idx in _batches(len(triples), config.batch,
                                         config.seed, config.epochs):
            batch = [triples[i] for i in idx]
            frames_g, frames_s = _pair_frames(rm.net.backbone, batch)

            def objective(ctx):
                r_g = ctx.reward(frames_g)
                r_s = ctx.reward(frames_s)
                return vmean([-(g - s).logsigmoid() for g, s in zip(r_g, r_s)])

            loss, grad = _train_step("rm_train", step, rm.net, params, objective)
            params = nn.adam_step(params, grad, state, config.lr)
            per_epoch.setdefault(epoch, []).append(loss)
            logger.log(step=step, loss=loss, lr=config.lr, epoch=epoch)
    finally:
        logger.close()
    rm.params = params
    history = [float(np.mean(per_epoch[e])) for e in sorted(per_epoch)]
    return rm, history


# --- PPO --------------------------------------------------------------------------


def _whiten(values: np.ndarray) -> np.ndarray:
    centered = values - values.mean()
    std = centered.std()
    if std < 1e-12:
        return np.zeros_like(values)
    return centered / std


def ppo_train(policy: Policy, reward_model: RewardModel, prompts: np.ndarray,
              config: AlignConfig, log_path: str | None = None
              ) -> tuple[Policy, list[dict]]:
    """Clipped-surrogate policy optimization of reward minus a KL penalty
    to the frozen incoming policy.

    Each step samples a rollout batch, scores it with the reward model,
    folds the per-sequence KL term into the score, subtracts a running-mean
    baseline, whitens advantages per batch, and applies the clipped update
    for a fixed number of inner epochs.  Empty rollouts are dropped from
    the update (their reward is undefined).
    """
    config.validate()
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.ndim != 2 or len(prompts) == 0:
        raise ShapeError(f"prompts must be a non-empty (N, l_text) array, "
                         f"got {prompts.shape}")
    model = policy.model
    reference = policy.clone()
    params = policy.params.copy()
    state = nn.AdamState(model.spec.total)
    logger = JsonlLogger(log_path)
    history: list[dict] = []
    base_sum = 0.0
    base_n = 0
    try:
        for step in range(config.ppo_steps):
            rows = (step * config.ppo_rollout_batch
                    + np.arange(config.ppo_rollout_batch)) % len(prompts)
            xs = prompts[rows]
            seeds = rng.derive_array(config.seed, rng.STREAM_POLICY,
                                     step * config.ppo_rollout_batch
                                     + np.arange(len(xs)))
            ys = model.sample_batch(params, xs, policy.control,
                                    config.temperature, seeds)
            kept = [j for j, y in enumerate(ys) if len(y) > 0]
            record = {"step": step, "n_kept": len(kept)}
            if not kept:
                record.update(loss=0.0, reward_mean=None, kl_mean=0.0)
                history.append(record)
                logger.log(**record)
                continue
            xs = xs[kept]
            ys = [ys[j] for j in kept]
            frames = model.frames(xs, ys, policy.control)
            rewards = reward_model.score_batch(frames)
            lp_old = model.seq_logprob_batch(params, frames)
            lp_ref = reference.seq_logprob_batch(frames)
            kl_terms = lp_old - lp_ref
            kl_mean = float(kl_terms.mean())
            if kl_mean > config.ppo_kl_abort:
                raise ConvergenceError(
                    f"ppo_train aborted at step {step}: mean KL {kl_mean:.3f} "
                    f"exceeds {config.ppo_kl_abort}")
            scores = rewards - config.ppo_kl_beta * kl_terms
            baseline = base_sum / base_n if base_n else 0.0
            adv = _whiten(scores - baseline)
            base_sum += float(scores.sum())
            base_n += len(scores)

            loss = 0.0
            for _ in range(config.ppo_inner_epochs):

                def objective(ctx):
                    lps = ctx.seq_logprob(frames)
                    terms = []
                    for j, lp in enumerate(lps):
                        ratio = (lp - lp_old[j]).exp()
                        clipped = ratio.clip(1 - config.ppo_clip,
                                             1 + config.ppo_clip)
                        terms.append((ratio * adv[j]).minimum(clipped * adv[j]))
                    return -vmean(terms)

                loss, grad = _train_step("ppo_train", step, model, params,
                                         objective)
                params = nn.adam_step(params, grad, state, config.lr)
            record.update(loss=loss, reward_mean=float(rewards.mean()),
                          kl_mean=kl_mean)
            history.append(record)
            logger.log(**record)
    finally:
        logger.close()
    return Policy(model=model, params=params, control=policy.control), history


# --- best-of-N -----------------------------------------------------------------------


def bon_sample_batch(policy: Policy, reward_model: RewardModel, xs: np.ndarray,
                     n: int, seeds: np.ndarray, *, temperature: float = 1.0
                     ) -> list[np.ndarray]:
    """For each prompt, sample n candidates on derived seeds and return the
    reward argmax (ties -> lowest candidate index).  Empty candidates score
    -inf; if every candidate is empty the first is returned."""
    if n < 1:
        raise ConfigError(f"candidate count must be >= 1, got {n}")
    xs = np.asarray(xs, dtype=np.int64)
    b = len(xs)
    cand_seeds = np.stack([rng.derive_array(int(s), rng.STREAM_BON, np.arange(n))
                           for s in seeds])
    flat_xs = np.repeat(xs, n, axis=0)
    ys = policy.sample_batch(flat_xs, temperature, cand_seeds.reshape(-1))
    scores = np.full(b * n, -np.inf)
    filled = [j for j, y in enumerate(ys) if len(y) > 0]
    if filled:
        frames = policy.model.frames(flat_xs[filled], [ys[j] for j in filled],
                                     policy.control)
        scores[filled] = reward_model.score_batch(frames)
    out = []
    for i in range(b):
        pool = scores[i * n:(i + 1) * n]
        pick = int(np.argmax(pool)) if np.isfinite(pool).any() else 0
        out.append(ys[i * n + pick])
    return out


def bon_select(policy: Policy, reward_model: RewardModel, x: np.ndarray,
               n: int, seed: int, *, temperature: float = 1.0) -> np.ndarray:
    return bon_sample_batch(policy, reward_model, np.asarray(x)[None, :], n,
                            np.array([seed], dtype=np.uint64),
                            temperature=temperature)[0]


# --- continued supervision control ------------------------------------------------------


def continue_sft(policy: Policy, dataset: PreferenceDataset,
                 config: AlignConfig, log_path: str | None = None
                 ) -> tuple[Policy, list[float]]:
    """Train on the golden half only, under the same budget the preference
    methods get; serves as the no-preference control."""
    config.validate()
    triples = list(dataset)
    if not triples:
        raise ShapeError("continue_sft needs a non-empty dataset")
    xs = np.stack([t.text for t in triples])
    ys = [t.y_g for t in triples]
    params, history = sft_train(policy.model, policy.params, xs, ys,
                                epochs=config.epochs, lr=config.lr,
                                batch=config.batch, seed=config.seed,
                                log_path=log_path)
    return Policy(model=policy.model, params=params,
                  control=policy.control), history
