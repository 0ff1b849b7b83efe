"""Command-line entry point.

Wires worlds, training, alignment, iteration, and evaluation into
file-based experiments.  Every command resolves one configuration
(defaults < config file < flags), takes an exclusive lock on its output
directory, writes a `config.ini` snapshot next to its outputs, and
reports diagnostics on stderr.  Exit codes: 0 success, 1 usage error,
2 configuration error, 3 runtime failure (divergence, provenance,
locked directory).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import rng
from .align import (RewardModel, coh_train, continue_sft, dpo_train,
                    ppo_train, rm_train)
from .config import ExperimentConfig
from .errors import (CodecAlignError, ConfigError, FormatError, LockError)
from .metrics import build_eval_set, rep_gap
from .nar import NarModel, build_nar_items, load_nar, nar_train, save_nar
from .policy import Policy, sft_train
from .prefdata import (build_pref_dataset, load_pref, merge_iterations,
                       save_pref)
from .report import emit_report, reconstruction_experiment, render_figures
from .selfimp import (IterationPlan, eval_battery, run_iterations,
                      snapshot_eval)
from .world import sample_batch, world_fingerprint, world_init


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _say(message: str) -> None:
    print(message, file=sys.stderr)


# --- output-directory ownership ----------------------------------------------------


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextlib.contextmanager
def dir_lock(out_dir: str):
    """Own `out_dir` exclusively for the duration; stale locks left by dead
    processes are reclaimed."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ".lock")
    while True:
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                with open(path, "r", encoding="utf-8") as f:
                    owner = int(f.read().strip() or "0")
            except (OSError, ValueError):
                owner = 0
            if owner and owner != os.getpid() and _pid_alive(owner):
                raise LockError(
                    f"output directory {out_dir} is locked by pid {owner}")
            try:
                os.unlink(path)  # stale lock: owner is gone
            except FileNotFoundError:
                pass
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass


# --- shared command plumbing -------------------------------------------------------


def _resolve_config(ns, **arg_paths) -> ExperimentConfig:
    overrides = list(ns.set or [])
    if getattr(ns, "seed", None) is not None:
        overrides.append(f"run.seed={ns.seed}")
    if getattr(ns, "workers", None) is not None:
        if ns.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {ns.workers}")
        overrides.append(f"run.workers={ns.workers}")
    cfg = ExperimentConfig.load(ns.config, overrides)
    for key, value in arg_paths.items():
        if value:
            cfg = cfg.override("args", key, os.path.abspath(value))
    return cfg


def _require(ns, flag: str) -> str:
    value = getattr(ns, flag, None)
    if not value:
        raise ConfigError(f"--{flag} is required for this command")
    return value


def _load_policy(path: str) -> Policy:
    if not os.path.exists(path):
        raise ConfigError(f"policy checkpoint not found: {path}")
    return Policy.load(path)


def _load_nar(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"nar checkpoint not found: {path}")
    return load_nar(path)


def _corpus(world, cfg: ExperimentConfig, n: int):
    """The shared supervised corpus: n seeded utterances, speakers cycling."""
    speakers = np.arange(n, dtype=np.int64) % world.config.speakers
    seeds = rng.derive_array(cfg.get("run", "seed"), rng.STREAM_SFT,
                             np.arange(n))
    texts, stacks = sample_batch(world, speakers, seeds)
    return texts, stacks, speakers


# --- commands ----------------------------------------------------------------------


def cmd_world_gen(ns) -> None:
    cfg = _resolve_config(ns)
    out = ns.out
    with dir_lock(out):
        cfg.write_snapshot(os.path.join(out, "config.ini"))
        world = world_init(cfg.world_config())
        payload = {"config": asdict(world.config),
                   "fingerprint": world_fingerprint(world)}
        with open(os.path.join(out, "world.json"), "w", encoding="utf-8",
                  newline="") as f:
            json.dump(payload, f, sort_keys=True, indent=2)
            f.write("\n")
    _say(f"world {payload['fingerprint'][:12]} -> {out}/world.json")


def cmd_sft(ns) -> None:
    cfg = _resolve_config(ns)
    out = ns.out
    with dir_lock(out):
        cfg.write_snapshot(os.path.join(out, "config.ini"))
        world = world_init(cfg.world_config())
        n = cfg.get("data", "sft_n")
        texts, stacks, _ = _corpus(world, cfg, n)
        policy = Policy.fresh(cfg.ar_config())
        _say(f"supervised training on {n} utterances")
        params, history = sft_train(
            policy.model, policy.params, texts, list(stacks[:, 0, :]),
            epochs=cfg.get("data", "sft_epochs"),
            lr=cfg.get("data", "sft_lr"), batch=cfg.get("data", "sft_batch"),
            seed=cfg.get("run", "seed"),
            log_path=os.path.join(out, "sft_log.jsonl"))
        tuned = Policy(model=policy.model, params=params)
        tuned.save(os.path.join(out, "policy.ckpt"))
    _say(f"final epoch loss {history[-1]:.4f}; "
         f"policy {tuned.fingerprint()[:12]} -> {out}/policy.ckpt")


def cmd_nar_train(ns) -> None:
    cfg = _resolve_config(ns)
    out = ns.out
    with dir_lock(out):
        cfg.write_snapshot(os.path.join(out, "config.ini"))
        world = world_init(cfg.world_config())
        n = cfg.get("data", "nar_n")
        _, stacks, speakers = _corpus(world, cfg, n)
        nar_cfg = cfg.nar_config()
        items = build_nar_items(stacks, speakers, nar_cfg.prompt_len)
        model = NarModel(nar_cfg)
        _say(f"layer-expansion training on {n} utterances")
        params, history = nar_train(
            model, model.init_params(), items,
            epochs=cfg.get("data", "nar_epochs"),
            lr=cfg.get("data", "nar_lr"), batch=cfg.get("data", "nar_batch"),
            seed=cfg.get("run", "seed"),
            log_path=os.path.join(out, "nar_log.jsonl"))
        save_nar(os.path.join(out, "nar.ckpt"), model, params)
    _say(f"final epoch loss {history[-1]:.4f} -> {out}/nar.ckpt")


def cmd_prefs_build(ns) -> None:
    policy_path = _require(ns, "policy")
    cfg = _resolve_config(ns, policy=policy_path,
                          prefs=getattr(ns, "merge", None))
    out = ns.out
    with dir_lock(out):
        cfg.write_snapshot(os.path.join(out, "config.ini"))
        world = world_init(cfg.world_config())
        policy = _load_policy(policy_path)
        t = ns.iteration
        base = rng.mix64(cfg.get("run", "seed"), t)
        dataset = build_pref_dataset(world, policy, cfg.get("data", "pref_n"),
                                     t, base_seed=base)
        if ns.merge:
            dataset = merge_iterations(load_pref(ns.merge), dataset)
        save_pref(dataset, os.path.join(out, "prefs.jsonl"))
    _say(f"{len(dataset)} preference pairs ({dataset.degenerate} degenerate "
         f"skips) -> {out}/prefs.jsonl")


def cmd_rm_train(ns) -> None:
    policy_path = _require(ns, "policy")
    prefs_path = _require(ns, "prefs")
    cfg = _resolve_config(ns, policy=policy_path, prefs=prefs_path)
    out = ns.out
    with dir_lock(out):
        cfg.write_snapshot(os.path.join(out, "config.ini"))
        policy = _load_policy(policy_path)
        dataset = load_pref(prefs_path)
        reward, history = rm_train(policy, dataset, cfg.align_config(),
                                   log_path=os.path.join(out, "rm_log.jsonl"))
        reward.save(os.path.join(out, "reward.ckpt"))
    _say(f"final epoch loss {history[-1]:.4f} -> {out}/reward.ckpt")


def cmd_align(ns) -> None:
    policy_path = _require(ns, "policy")
    prefs_path = _require(ns, "prefs")
    cfg = _resolve_config(ns, policy=policy_path, prefs=prefs_path)
    align_cfg = cfg.align_config(method=ns.method)
    out = ns.out
    with dir_lock(out):
        cfg = cfg.override("align", "method", align_cfg.method)
        cfg.write_snapshot(os.path.join(out, "config.ini"))
        policy = _load_policy(policy_path)
        dataset = load_pref(prefs_path)
        log = os.path.join(out, "align_log.jsonl")
        _say(f"aligning with {align_cfg.method} on {len(dataset)} pairs")
        if align_cfg.method == "coh":
            tuned, _ = coh_train(policy, dataset, align_cfg, log_path=log)
        elif align_cfg.method == "dpo":
            tuned, _ = dpo_train(policy, dataset, align_cfg, log_path=log)
        elif align_cfg.method == "continue-sft":
            tuned, _ = continue_sft(policy, dataset, align_cfg, log_path=log)
        elif align_cfg.method in ("ppo", "bon"):
            reward, _ = rm_train(policy, dataset, align_cfg,
                                 log_path=os.path.join(out, "rm_log.jsonl"))
            reward.save(os.path.join(out, "reward.ckpt"))
            if align_cfg.method == "ppo":
                prompts = np.stack([t.text for t in dataset])
                tuned, _ = ppo_train(policy, reward, prompts, align_cfg,
                                     log_path=log)
            else:
                tuned = policy  # best-of-n reranks at decode time
        else:  # pragma: no cover - align_config already validated
            raise ConfigError(f"unknown method {align_cfg.method!r}")
        tuned.save(os.path.join(out, "aligned.ckpt"))
    _say(f"policy {tuned.fingerprint()[:12]} -> {out}/aligned.ckpt")


def cmd_iterate(ns) -> None:
    policy_path = _require(ns, "policy")
    nar_path = _require(ns, "nar")
    cfg = _resolve_config(ns, policy=policy_path, nar=nar_path)
    if ns.iterations is not None:
        cfg = cfg.override("iterate", "iterations", ns.iterations)
    align_cfg = cfg.align_config(method=ns.method)
    cfg = cfg.override("align", "method", align_cfg.method)
    out = ns.out
    with dir_lock(out):
        cfg.write_snapshot(os.path.join(out, "config.ini"))
        plan = IterationPlan(
            iterations=cfg.get("iterate", "iterations"),
            fresh_per_iter=cfg.get("data", "pref_n"),
            align=align_cfg, world=world_init(cfg.world_config()),
            policy_path=policy_path, nar_path=nar_path,
            base_seed=cfg.get("run", "seed"), out_dir=out,
            eval_n=cfg.get("data", "eval_n"),
            eval_seed=cfg.get("run", "seed"),
            eval_temperature=cfg.get("data", "eval_temperature"))
        records = run_iterations(plan)
    for rec in records:
        _say(f"iter {rec.t}: ter {rec.summary['ter']:.4f} "
             f"sim {rec.summary['sim']:.4f} "
             f"win {rec.summary['win_rate']:.1f}%")
    _say(f"{len(records)} iterations -> {out}/ledger.jsonl")


def cmd_eval(ns) -> None:
    policy_path = _require(ns, "policy")
    nar_path = _require(ns, "nar")
    baseline_path = ns.baseline or policy_path
    cfg = _resolve_config(ns, policy=policy_path, nar=nar_path,
                          baseline=ns.baseline or "")
    out = ns.out
    with dir_lock(out):
        cfg.write_snapshot(os.path.join(out, "config.ini"))
        world = world_init(cfg.world_config())
        policy = _load_policy(policy_path)
        baseline = _load_policy(baseline_path)
        nar_model, nar_params = _load_nar(nar_path)
        eval_set = build_eval_set(world, cfg.get("data", "eval_n"),
                                  cfg.get("run", "seed"),
                                  prompt_len=nar_model.config.prompt_len)
        temperature = cfg.get("data", "eval_temperature")
        _say(f"evaluating on {len(eval_set)} held-out items, "
             f"{cfg.get('data', 'eval_reps')} repetitions")
        snap = snapshot_eval(world, nar_model, nar_params, eval_set, policy,
                             baseline, cfg.get("run", "seed"),
                             reps=cfg.get("data", "eval_reps"),
                             temperature=temperature)
        recon = reconstruction_experiment(world, nar_model, nar_params,
                                          eval_set, policy,
                                          seed=cfg.get("run", "seed"),
                                          temperature=temperature)
        gap = rep_gap(policy, eval_set, policy, seed=cfg.get("run", "seed"),
                      temperature=temperature)
        results = {
            "metrics": {"snapshot": snap, "reconstruction": recon,
                        "rep_gap": {"centroid_dist": gap.centroid_dist,
                                    "centroid_se": gap.centroid_se,
                                    "n_items": gap.n_items,
                                    "n_dropped": gap.n_dropped}},
            "tables": recon,
            "scatter": {"coords": gap.coords, "labels": gap.labels},
        }
        written = emit_report(results, out)
    for path in written:
        _say(f"wrote {path}")


def cmd_report(ns) -> None:
    run_dir = _require(ns, "run")
    snap_path = os.path.join(run_dir, "config.ini")
    ledger_path = os.path.join(run_dir, "ledger.jsonl")
    for path in (snap_path, ledger_path):
        if not os.path.exists(path):
            raise ConfigError(f"not an iteration run directory: missing {path}")
    cfg = ExperimentConfig.load(snap_path, list(ns.set or []))
    cfg = cfg.override("args", "run", os.path.abspath(run_dir))
    out = ns.out
    with open(ledger_path, "r", encoding="utf-8") as f:
        entries = [json.loads(line) for line in f if line.strip()]
    latest: dict[int, dict] = {}
    for entry in entries:
        latest[int(entry["t"])] = entry
    completed = [latest[t] for t in sorted(latest) if latest[t]["status"] == "ok"]
    if not completed:
        raise FormatError(f"{ledger_path}: no completed iterations to report")

    with dir_lock(out):
        cfg.write_snapshot(os.path.join(out, "config.ini"))
        world = world_init(cfg.world_config())
        baseline = _load_policy(cfg.get("args", "policy"))
        nar_model, nar_params = _load_nar(cfg.get("args", "nar"))
        eval_set = build_eval_set(world, cfg.get("data", "eval_n"),
                                  cfg.get("run", "seed"),
                                  prompt_len=nar_model.config.prompt_len)
        temperature = cfg.get("data", "eval_temperature")
        _say("scoring the starting policy for the baseline row")
        base_row = eval_battery(world, nar_model, nar_params, eval_set,
                                baseline, baseline,
                                seed=cfg.get("run", "seed"),
                                temperature=temperature)
        metric_keys = ["ter", "sim", "kl_gap", "rep_gap"]
        tables = [{"model": "SFT", **{k: base_row[k] for k in metric_keys}}]
        winrate = []
        for entry in completed:
            label = f"Iter{int(entry['t']) + 1}"
            summary = entry["summary"]
            tables.append({"model": label,
                           **{k: summary[k] for k in metric_keys}})
            winrate.append({"model": label,
                            "win_rate": summary["win_rate"],
                            "tie_rate": summary["tie_rate"],
                            "lose_rate": summary["lose_rate"]})
        final_t = int(completed[-1]["t"])
        final = _load_policy(os.path.join(run_dir, f"iter_{final_t}",
                                          "policy.ckpt"))
        gap = rep_gap(final, eval_set, final, seed=cfg.get("run", "seed"),
                      temperature=temperature)
        results = {
            "metrics": {"baseline": base_row, "iterations": completed},
            "tables": tables,
            "winrate": winrate,
            "scatter": {"coords": gap.coords, "labels": gap.labels},
        }
        written = emit_report(results, out)
        written += render_figures(results, out)
    for path in written:
        _say(f"wrote {path}")


# --- parser ------------------------------------------------------------------------


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="experiment config file (INI); defaults apply "
                             "to anything unset")
    common.add_argument("--out", metavar="DIR", default="out",
                        help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override [run] seed")
    common.add_argument("--workers", type=int, metavar="N",
                        help="cap worker count (results are identical at any "
                             "setting)")
    common.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                        help="override any config entry; repeatable")

    parser = _Parser(prog="codecalign",
                     description="Desk-scale preference-alignment laboratory "
                                 "over a synthetic codec world.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                                parser_class=_Parser)

    world = sub.add_parser("world", help="world utilities",
                           parents=[common])
    world_sub = world.add_subparsers(dest="subcommand", metavar="SUBCOMMAND",
                                     parser_class=_Parser)
    gen = world_sub.add_parser("gen", parents=[common],
                               help="materialize the seeded world and write "
                                    "its fingerprint")
    gen.set_defaults(func=cmd_world_gen)

    sft = sub.add_parser("sft", parents=[common],
                         help="supervised training of the token policy")
    sft.set_defaults(func=cmd_sft)

    nar = sub.add_parser("nar", help="layer-expansion model", parents=[common])
    nar_sub = nar.add_subparsers(dest="subcommand", metavar="SUBCOMMAND",
                                 parser_class=_Parser)
    ntrain = nar_sub.add_parser("train", parents=[common],
                                help="train the layer-expansion model")
    ntrain.set_defaults(func=cmd_nar_train)

    prefs = sub.add_parser("prefs", help="preference data", parents=[common])
    prefs_sub = prefs.add_subparsers(dest="subcommand", metavar="SUBCOMMAND",
                                     parser_class=_Parser)
    pbuild = prefs_sub.add_parser("build", parents=[common],
                                  help="sample golden/synthetic pairs from a "
                                       "policy")
    pbuild.add_argument("--policy", metavar="CKPT",
                        help="policy checkpoint to sample from")
    pbuild.add_argument("--iteration", type=int, default=0, metavar="T",
                        help="iteration tag for the pairs (default 0)")
    pbuild.add_argument("--merge", metavar="JSONL",
                        help="previous dataset to slide the window over")
    pbuild.set_defaults(func=cmd_prefs_build)

    rm = sub.add_parser("rm", help="reward model", parents=[common])
    rm_sub = rm.add_subparsers(dest="subcommand", metavar="SUBCOMMAND",
                               parser_class=_Parser)
    rtrain = rm_sub.add_parser("train", parents=[common],
                               help="fit the pairwise reward model")
    rtrain.add_argument("--policy", metavar="CKPT",
                        help="policy checkpoint to initialize from")
    rtrain.add_argument("--prefs", metavar="JSONL",
                        help="preference dataset to fit")
    rtrain.set_defaults(func=cmd_rm_train)

    align = sub.add_parser("align", parents=[common],
                           help="run one preference-optimization method")
    align.add_argument("--method",
                       choices=["coh", "dpo", "ppo", "bon", "continue-sft"],
                       help="override [align] method")
    align.add_argument("--policy", metavar="CKPT",
                       help="starting policy checkpoint")
    align.add_argument("--prefs", metavar="JSONL",
                       help="preference dataset to train on")
    align.set_defaults(func=cmd_align)

    iterate = sub.add_parser("iterate", parents=[common],
                             help="run the iterated self-improvement loop")
    iterate.add_argument("--method",
                         choices=["coh", "dpo", "ppo", "bon", "continue-sft"],
                         help="override [align] method")
    iterate.add_argument("-T", "--iterations", type=int, metavar="T",
                         help="override [iterate] iterations")
    iterate.add_argument("--policy", metavar="CKPT",
                         help="starting policy checkpoint")
    iterate.add_argument("--nar", metavar="CKPT",
                         help="trained layer-expansion checkpoint")
    iterate.set_defaults(func=cmd_iterate)

    evalp = sub.add_parser("eval", parents=[common],
                           help="evaluate a policy checkpoint on held-out "
                                "prompts")
    evalp.add_argument("--policy", metavar="CKPT",
                       help="policy checkpoint to evaluate")
    evalp.add_argument("--nar", metavar="CKPT",
                       help="trained layer-expansion checkpoint")
    evalp.add_argument("--baseline", metavar="CKPT",
                       help="baseline for win rates (default: the policy "
                            "itself)")
    evalp.set_defaults(func=cmd_eval)

    report = sub.add_parser("report", parents=[common],
                            help="tables, CSVs, and figures for an iteration "
                                 "run")
    report.add_argument("--run", metavar="DIR",
                        help="directory produced by `iterate`")
    report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not hasattr(ns, "func"):
            parser.print_usage(sys.stderr)
            _say("codecalign: error: a command is required")
            return 1
        ns.func(ns)
        return 0
    except _UsageError as e:
        _say(str(e))
        return 1
    except SystemExit as e:  # --help and friends
        return int(e.code or 0)
    except (ConfigError, FormatError) as e:
        _say(f"codecalign: config error: {e}")
        return 2
    except CodecAlignError as e:
        _say(f"codecalign: runtime error: {e}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
