"""Result tables, report files, and figures.

Everything here is a pure function of already-computed results: the
reconstruction comparison produces averaged rows, `emit_report` writes
the delimited/JSON artifacts with round-trip-exact floats and stable
field order (re-emitting the same results yields byte-identical files),
and `render_figures` draws the matching plots to PNG files.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import rng  # noqa: E402
from .errors import ShapeError  # noqa: E402
from .metrics import EvalSet, sim, ter, transcription  # noqa: E402
from .nar import NarModel, reconstruct_batch  # noqa: E402
from .policy import Policy  # noqa: E402
from .world import World  # noqa: E402


def reconstruction_experiment(world: World, nar_model: NarModel,
                              nar_params: np.ndarray, eval_set: EvalSet,
                              policy: Policy, *, seed: int = 0,
                              temperature: float = 1.0) -> list[dict]:
    """Compare three decoding conditions on one held-out set.

    groundtruth scores the golden stacks directly (no models in the path);
    golden_input rebuilds the upper layers from golden first-layer tokens;
    synthetic_input rebuilds them from policy-sampled first-layer tokens.
    Returns one averaged {condition, ter, sim} row per condition.
    """
    n = len(eval_set)
    g_ters = np.empty(n)
    g_sims = np.empty(n)
    for i in range(n):
        spk = int(eval_set.speakers[i])
        hyp = transcription(world, spk, eval_set.golden_l1[i])
        g_ters[i] = ter(hyp, eval_set.texts[i])
        g_sims[i] = sim(world, eval_set.golden[i], spk)

    ters_g, sims_g = reconstruct_batch(world, nar_model, nar_params,
                                       eval_set.texts, eval_set.speakers,
                                       eval_set.prompts,
                                       list(eval_set.golden_l1))
    seeds = rng.derive_array(seed, rng.STREAM_POLICY, np.arange(n))
    ys = policy.sample_batch(eval_set.texts, temperature, seeds)
    ters_s, sims_s = reconstruct_batch(world, nar_model, nar_params,
                                       eval_set.texts, eval_set.speakers,
                                       eval_set.prompts, ys)
    return [
        {"condition": "groundtruth",
         "ter": float(g_ters.mean()), "sim": float(g_sims.mean())},
        {"condition": "golden_input",
         "ter": float(ters_g.mean()), "sim": float(sims_g.mean())},
        {"condition": "synthetic_input",
         "ter": float(ters_s.mean()), "sim": float(sims_s.mean())},
    ]


# --- file emission ---------------------------------------------------------------


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)  # shortest representation that parses back exactly
    return str(value)


def _write_csv(path: str, rows: list[dict]) -> None:
    if not rows:
        raise ShapeError(f"refusing to write empty table {path}")
    header = list(rows[0])
    for i, row in enumerate(rows):
        if list(row) != header:
            raise ShapeError(
                f"{path}: row {i} fields {list(row)} differ from {header}")
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(row[k]) for k in header])


def emit_report(results: dict, out_dir: str) -> list[str]:
    """Write the delimited/JSON artifacts for whichever result sections are
    present and return the paths written.

    Sections: "metrics" (nested dict -> metrics.json), "tables" (list of
    uniform dicts -> tables.csv), "scatter" ({"coords": (n, 2), "labels":
    [n]} -> scatter.csv), "winrate" (list of uniform dicts -> winrate.csv).
    """
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []

    if "metrics" in results:
        path = os.path.join(out_dir, "metrics.json")
        with open(path, "w", encoding="utf-8", newline="") as f:
            json.dump(results["metrics"], f, sort_keys=True, indent=2)
            f.write("\n")
        written.append(path)

    if "tables" in results:
        path = os.path.join(out_dir, "tables.csv")
        _write_csv(path, results["tables"])
        written.append(path)

    if "scatter" in results:
        coords = np.asarray(results["scatter"]["coords"], dtype=np.float64)
        labels = list(results["scatter"]["labels"])
        if coords.ndim != 2 or coords.shape[1] != 2 or len(labels) != len(coords):
            raise ShapeError(
                f"scatter needs (n, 2) coords with n labels, got "
                f"{coords.shape} and {len(labels)} labels")
        rows = [{"label": lab, "x": float(x), "y": float(y)}
                for lab, (x, y) in zip(labels, coords)]
        path = os.path.join(out_dir, "scatter.csv")
        _write_csv(path, rows)
        written.append(path)

    if "winrate" in results:
        path = os.path.join(out_dir, "winrate.csv")
        _write_csv(path, results["winrate"])
        written.append(path)

    return written


# --- figures ---------------------------------------------------------------------


def _save(fig, path: str) -> None:
    # suppress the library version stamp so identical figures are
    # byte-identical on disk
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def render_figures(results: dict, out_dir: str) -> list[str]:
    """Draw PNG companions for the report sections present in `results`."""
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []

    if "scatter" in results:
        coords = np.asarray(results["scatter"]["coords"], dtype=np.float64)
        labels = np.asarray(results["scatter"]["labels"])
        fig, ax = plt.subplots(figsize=(5, 4))
        for name, marker in (("golden", "o"), ("synthetic", "x")):
            pts = coords[labels == name]
            if len(pts):
                ax.scatter(pts[:, 0], pts[:, 1], s=12, marker=marker,
                           label=name, alpha=0.7)
        ax.set_xlabel("pc 1")
        ax.set_ylabel("pc 2")
        ax.set_title("pooled representations")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, "scatter.png")
        _save(fig, path)
        written.append(path)

    if "tables" in results:
        rows = results["tables"]
        numeric = [k for k in rows[0] if isinstance(rows[0][k], (int, float))]
        x = np.arange(len(rows))
        names = [str(next(iter(r.values()))) for r in rows]
        fig, axes = plt.subplots(1, max(len(numeric), 1),
                                 figsize=(3.2 * max(len(numeric), 1), 3.2))
        if len(numeric) == 1:
            axes = [axes]
        for ax, key in zip(np.atleast_1d(axes).ravel(), numeric):
            ax.plot(x, [r[key] for r in rows], marker="o")
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=45, ha="right")
            ax.set_title(key)
        fig.tight_layout()
        path = os.path.join(out_dir, "iterations.png")
        _save(fig, path)
        written.append(path)

    if "winrate" in results:
        rows = results["winrate"]
        names = [str(next(iter(r.values()))) for r in rows]
        wins = np.array([r.get("win_rate", 0.0) for r in rows])
        ties = np.array([r.get("tie_rate", 0.0) for r in rows])
        loses = np.array([r.get("lose_rate", 0.0) for r in rows])
        y = np.arange(len(rows))
        fig, ax = plt.subplots(figsize=(5, 0.6 * len(rows) + 1.6))
        ax.barh(y, wins, label="win")
        ax.barh(y, ties, left=wins, label="tie")
        ax.barh(y, loses, left=wins + ties, label="lose")
        ax.set_yticks(y)
        ax.set_yticklabels(names)
        ax.invert_yaxis()
        ax.set_xlabel("percent")
        ax.set_title("judge outcomes vs baseline")
        ax.legend(loc="lower right")
        fig.tight_layout()
        path = os.path.join(out_dir, "winrate.png")
        _save(fig, path)
        written.append(path)

    return written
