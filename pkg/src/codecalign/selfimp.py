"""Iterative self-improvement driver.

Each iteration samples fresh preference pairs with the current policy,
merges them into the sliding training window, runs the configured
alignment method, evaluates the product on a fixed held-out set, and
appends a provenance record.  The ledger is append-only and every
artifact is content-addressed, so an interrupted run can resume and
reproduce the uninterrupted result bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import container, rng
from .align import (AlignConfig, RewardModel, bon_sample_batch, coh_train,
                    continue_sft, dpo_train, ppo_train, rm_train)
from .errors import (CodecAlignError, ConfigError, FormatError,
                     ProvenanceError)
from .metrics import EvalSet, build_eval_set, kl_gap, oracle_judge, rep_gap
from .nar import NarModel, load_nar, reconstruct_batch
from .policy import Policy
from .prefdata import (PreferenceDataset, build_pref_dataset, load_pref,
                       merge_iterations, pref_bytes, save_pref)
from .world import World

EVAL_REPS = 10


@dataclass(frozen=True)
class IterationPlan:
    """Everything needed to run (and re-run) a self-improvement experiment."""
    iterations: int                 # number of improvement rounds
    fresh_per_iter: int             # new preference pairs sampled each round
    align: AlignConfig
    world: World
    policy_path: str                # starting checkpoint; also the win-rate baseline
    nar_path: str
    base_seed: int
    out_dir: str
    eval_n: int = 64
    eval_seed: int = 0
    eval_temperature: float = 1.0

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError(f"iteration count must be >= 1, got {self.iterations}")
        if self.fresh_per_iter < 1:
            raise ConfigError(
                f"pairs per iteration must be >= 1, got {self.fresh_per_iter}")
        if self.eval_temperature < 0:
            raise ConfigError("eval_temperature must be >= 0")
        self.align.validate()


@dataclass(frozen=True)
class IterationRecord:
    """One append-only ledger entry.  Hashes name files under iter_<t>/."""
    t: int
    status: str                     # "ok" or "failed"
    pre: str                        # policy fingerprint entering the iteration
    post: str | None = None         # policy fingerprint leaving it
    dataset: str | None = None      # sha256 of the merged training dataset
    summary: dict | None = None     # held-out evaluation of the product
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"t": self.t, "status": self.status, "pre": self.pre,
             "post": self.post, "dataset": self.dataset,
             "summary": self.summary, "error": self.error}
        d.update(self.extra)
        return d

    @staticmethod
    def from_dict(d: dict) -> "IterationRecord":
        known = {"t", "status", "pre", "post", "dataset", "summary", "error"}
        return IterationRecord(
            t=int(d["t"]), status=d["status"], pre=d["pre"],
            post=d.get("post"), dataset=d.get("dataset"),
            summary=d.get("summary"), error=d.get("error"),
            extra={k: v for k, v in d.items() if k not in known})


@dataclass
class BonSampler:
    """Presents best-of-n reranking through the plain sampler interface."""
    policy: Policy
    reward_model: RewardModel
    n: int

    def sample_batch(self, xs, temperature, seeds, control="inherit"):
        return bon_sample_batch(self.policy, self.reward_model,
                                np.asarray(xs, dtype=np.int64), self.n,
                                np.asarray(seeds, dtype=np.uint64),
                                temperature=temperature)


# --- evaluation battery ----------------------------------------------------------


def eval_battery(world: World, nar_model: NarModel, nar_params: np.ndarray,
                 eval_set: EvalSet, policy: Policy, baseline: Policy, *,
                 seed: int, temperature: float = 1.0, sampler=None,
                 baseline_sampler=None) -> dict:
    """Score one policy snapshot on the held-out set.

    Returns generation quality (ter/sim via the reconstruction path),
    the exact distribution gap (kl_gap), the pooled-representation gap,
    and the oracle-judge win/tie/lose rates against the baseline policy.
    All sampling uses seeds derived from `seed`, so the battery is a pure
    function of (weights, eval_set, seed).
    """
    sampler = sampler if sampler is not None else policy
    baseline_sampler = (baseline_sampler if baseline_sampler is not None
                        else baseline)
    n = len(eval_set)
    gen_seeds = rng.derive_array(seed, rng.STREAM_POLICY, np.arange(n))
    ys = sampler.sample_batch(eval_set.texts, temperature, gen_seeds)
    ters, sims = reconstruct_batch(world, nar_model, nar_params,
                                   eval_set.texts, eval_set.speakers,
                                   eval_set.prompts, ys)
    # the baseline sees the same prompts and seeds; a policy evaluated
    # against itself therefore ties on every item
    ys_b = baseline_sampler.sample_batch(eval_set.texts, temperature, gen_seeds)
    ters_b, sims_b = reconstruct_batch(world, nar_model, nar_params,
                                       eval_set.texts, eval_set.speakers,
                                       eval_set.prompts, ys_b)
    verdicts = np.array([oracle_judge((ters[i], sims[i]), (ters_b[i], sims_b[i]))
                         for i in range(n)])
    gap = rep_gap(policy, eval_set, sampler, seed=seed, temperature=temperature)
    return {
        "ter": float(ters.mean()),
        "sim": float(sims.mean()),
        "kl_gap": kl_gap(world, policy, eval_set),
        "rep_gap": gap.centroid_dist,
        "win_rate": float((verdicts > 0).mean() * 100.0),
        "tie_rate": float((verdicts == 0).mean() * 100.0),
        "lose_rate": float((verdicts < 0).mean() * 100.0),
    }


def snapshot_eval(world: World, nar_model: NarModel, nar_params: np.ndarray,
                  eval_set: EvalSet, policy: Policy, baseline: Policy,
                  eval_seed: int, *, reps: int = EVAL_REPS,
                  temperature: float = 1.0, sampler=None,
                  baseline_sampler=None) -> dict:
    """Run the battery `reps` times on derived seeds; report mean and
    standard deviation per metric.  Deterministic metrics (and everything,
    at temperature 0) come back with standard deviation exactly 0."""
    if reps < 1:
        raise ConfigError(f"repetition count must be >= 1, got {reps}")
    rep_seeds = rng.derive_array(eval_seed, rng.STREAM_EVAL, np.arange(reps))
    runs = [eval_battery(world, nar_model, nar_params, eval_set, policy,
                         baseline, seed=int(s), temperature=temperature,
                         sampler=sampler, baseline_sampler=baseline_sampler)
            for s in rep_seeds]
    out: dict[str, float] = {"reps": reps}
    for key in runs[0]:
        vals = np.array([r[key] for r in runs], dtype=np.float64)
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_sd"] = float(vals.std())
    return out


# --- the iteration loop ----------------------------------------------------------


def _append_ledger(path: str, record: IterationRecord) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        f.flush()
        os.fsync(f.fileno())


def _read_ledger(path: str) -> dict[int, dict]:
    """Latest record per iteration.  A torn final line (crash artifact) is
    dropped so subsequent appends stay well-formed; torn interior lines are
    corruption and rejected."""
    if not os.path.exists(path):
        return {}
    with open(path, "r", encoding="utf-8") as f:
        raw = f.read()
    lines = raw.splitlines()
    valid: list[str] = []
    records: dict[int, dict] = {}
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        last = i == len(lines) - 1
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            if last:
                break
            raise FormatError(f"{path}:{i + 1}: unreadable ledger line: {e}") from e
        if last and not raw.endswith("\n"):
            break  # complete json but no newline: also a torn tail
        valid.append(line)
        records[int(d["t"])] = d
    if len(valid) != len([l for l in lines if l.strip()]):
        with open(path, "w", encoding="utf-8") as f:
            f.write("".join(l + "\n" for l in valid))
    return records


def _iter_dir(out_dir: str, t: int) -> str:
    return os.path.join(out_dir, f"iter_{t}")


def _align_step(policy: Policy, dataset: PreferenceDataset,
                config: AlignConfig, it_dir: str) -> tuple[Policy, object]:
    """Dispatch one alignment round.  Returns the updated policy and the
    sampler that represents the iteration's product at inference time
    (identical to the policy except for best-of-n, which reranks with a
    freshly trained reward model while leaving the weights untouched)."""
    method = config.method
    if method == "coh":
        tuned, _ = coh_train(policy, dataset, config)
        return tuned, tuned
    if method == "dpo":
        tuned, _ = dpo_train(policy, dataset, config)
        return tuned, tuned
    if method == "continue-sft":
        tuned, _ = continue_sft(policy, dataset, config)
        return tuned, tuned
    if method == "ppo":
        reward, _ = rm_train(policy, dataset, config)
        reward.save(os.path.join(it_dir, "reward.ckpt"))
        prompts = np.stack([t.text for t in dataset])
        tuned, _ = ppo_train(policy, reward, prompts, config)
        return tuned, tuned
    if method == "bon":
        reward, _ = rm_train(policy, dataset, config)
        reward.save(os.path.join(it_dir, "reward.ckpt"))
        return policy, BonSampler(policy, reward, config.bon_n)
    raise ConfigError(f"unknown method {method!r}")


def _guard_heldout(eval_set: EvalSet, dataset: PreferenceDataset) -> None:
    taken = {int(t.sample_seed) for t in dataset.triples}
    overlap = taken.intersection(int(s) for s in eval_set.seeds)
    if overlap:
        raise ProvenanceError(
            f"held-out items leaked into the preference data: seeds {sorted(overlap)[:4]}")


def run_iterations(plan: IterationPlan) -> list[IterationRecord]:
    """Run (or resume) the self-improvement loop.

    Directory layout: `<out>/iter_<t>/{dataset.jsonl, policy.ckpt,
    metrics.json}` plus an append-only `<out>/ledger.jsonl`.  Iterations
    whose latest ledger record is "ok" are verified by hash and skipped;
    a failed stage appends a failed record and halts the loop."""
    plan.validate()
    os.makedirs(plan.out_dir, exist_ok=True)
    world = plan.world
    policy = Policy.load(plan.policy_path)
    baseline = policy
    nar_model, nar_params = load_nar(plan.nar_path)
    eval_set = build_eval_set(world, plan.eval_n, plan.eval_seed,
                              prompt_len=nar_model.config.prompt_len)
    ledger_path = os.path.join(plan.out_dir, "ledger.jsonl")
    seen = _read_ledger(ledger_path)
    records: list[IterationRecord] = []
    prev_ds: PreferenceDataset | None = None

    for t in range(plan.iterations):
        it_dir = _iter_dir(plan.out_dir, t)
        done = seen.get(t)
        if done is not None and done.get("status") == "ok":
            record, prev_ds, policy = _resume_iteration(t, it_dir, done, policy)
            records.append(record)
            continue

        os.makedirs(it_dir, exist_ok=True)
        pre = policy.fingerprint()
        ds_hash = None
        try:
            fresh = build_pref_dataset(world, policy, plan.fresh_per_iter, t,
                                       base_seed=rng.mix64(plan.base_seed, t))
            merged = merge_iterations(prev_ds, fresh)
            _guard_heldout(eval_set, merged)
            save_pref(merged, os.path.join(it_dir, "dataset.jsonl"))
            ds_hash = container.sha256_hex(pref_bytes(merged))
            tuned, sampler = _align_step(policy, merged, plan.align, it_dir)
            tuned.save(os.path.join(it_dir, "policy.ckpt"))
            summary = eval_battery(world, nar_model, nar_params, eval_set,
                                   tuned, baseline, seed=plan.eval_seed,
                                   temperature=plan.eval_temperature,
                                   sampler=sampler)
            with open(os.path.join(it_dir, "metrics.json"), "w",
                      encoding="utf-8") as f:
                json.dump(summary, f, sort_keys=True, indent=2)
                f.write("\n")
        except CodecAlignError as e:
            failed = IterationRecord(t=t, status="failed", pre=pre,
                                     dataset=ds_hash, error=str(e))
            _append_ledger(ledger_path, failed)
            raise
        record = IterationRecord(t=t, status="ok", pre=pre,
                                 post=tuned.fingerprint(), dataset=ds_hash,
                                 summary=summary)
        _append_ledger(ledger_path, record)
        records.append(record)
        policy = tuned
        prev_ds = merged
    return records


def _resume_iteration(t: int, it_dir: str, done: dict, policy: Policy
                      ) -> tuple[IterationRecord, PreferenceDataset, Policy]:
    """Verify a completed iteration's artifacts before skipping it."""
    record = IterationRecord.from_dict(done)
    if record.pre != policy.fingerprint():
        raise ProvenanceError(
            f"iteration {t}: ledger expects incoming policy {record.pre[:12]}, "
            f"found {policy.fingerprint()[:12]}")
    ds_path = os.path.join(it_dir, "dataset.jsonl")
    ckpt_path = os.path.join(it_dir, "policy.ckpt")
    for path in (ds_path, ckpt_path):
        if not os.path.exists(path):
            raise ProvenanceError(f"iteration {t}: missing artifact {path}")
    dataset = load_pref(ds_path)
    ds_hash = container.sha256_hex(pref_bytes(dataset))
    if ds_hash != record.dataset:
        raise ProvenanceError(
            f"iteration {t}: dataset hash {ds_hash[:12]} does not match "
            f"ledger {str(record.dataset)[:12]}")
    tuned = Policy.load(ckpt_path)
    if tuned.fingerprint() != record.post:
        raise ProvenanceError(
            f"iteration {t}: checkpoint hash {tuned.fingerprint()[:12]} does "
            f"not match ledger {str(record.post)[:12]}")
    return record, dataset, tuned
