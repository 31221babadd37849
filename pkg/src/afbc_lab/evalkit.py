"""Post-hoc analysis: curve smoothing, multi-seed scoring, advantage
histograms, and report emission (CSV tables plus SVG figures).

Reports are byte-deterministic: figures are rendered as SVG with a fixed
hash salt and no embedded date, so re-running a seeded experiment regenerates
identical files.
"""

import csv
import glob
import json
import os
from dataclasses import dataclass

import matplotlib
import numpy as np

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "afbc-lab"
import matplotlib.pyplot as plt  # noqa: E402

from .errors import UsageError  # noqa: E402

SMOOTH_COEFF = 0.65
SCORE_WINDOW = 10
HISTOGRAM_BINS = 61


@dataclass
class LearningCurve:
    steps: np.ndarray
    returns: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.steps = np.asarray(self.steps)
        self.returns = np.asarray(self.returns, dtype=np.float64)
        if len(self.steps) != len(self.returns):
            raise UsageError("curve steps and returns must have equal length")
        if len(self.steps) and np.any(np.diff(self.steps) <= 0):
            raise UsageError("curve steps must be strictly increasing")


@dataclass
class ScoreReport:
    mean: float
    spread: float  # two standard deviations over the score window
    ci95: float    # 95% confidence half-width across seeds, labeled distinctly
    n_seeds: int
    window: int


def smooth(curve, coeff=SMOOTH_COEFF):
    """Polyak smoothing: y'_0 = y_0, y'_t = c*y'_{t-1} + (1-c)*y_t."""
    if len(curve.returns) == 0:
        raise UsageError("cannot smooth an empty curve")
    out = np.empty_like(curve.returns)
    out[0] = curve.returns[0]
    for t in range(1, len(out)):
        out[t] = coeff * out[t - 1] + (1.0 - coeff) * curve.returns[t]
    return LearningCurve(steps=curve.steps, returns=out, seed=curve.seed)


def score(curves, window=SCORE_WINDOW, coeff=SMOOTH_COEFF):
    """Three-step scoring: smooth per seed, average pointwise across seeds,
    then report the mean and two standard deviations of the cross-seed curve
    over its final ``window`` evaluations.
    """
    if not curves:
        raise UsageError("score needs at least one curve")
    steps = curves[0].steps
    for c in curves[1:]:
        if len(c.steps) != len(steps) or np.any(c.steps != steps):
            raise UsageError("curves have misaligned evaluation steps")
    smoothed = np.stack([smooth(c, coeff).returns for c in curves])
    mean_curve = smoothed.mean(axis=0)
    seed_std_curve = smoothed.std(axis=0)
    tail = mean_curve[-window:]
    seed_tail_std = seed_std_curve[-window:]
    return ScoreReport(
        mean=float(tail.mean()),
        spread=float(2.0 * tail.std()),
        ci95=float(1.96 * seed_tail_std.mean() / np.sqrt(len(curves))),
        n_seeds=len(curves),
        window=min(window, len(tail)),
    )


def advantage_histogram(agent, probe, rng, bins=HISTOGRAM_BINS):
    """Histogram of advantage estimates over a fixed probe sample.

    Bin edges are uniform over a symmetric range fit to the 1st-99th
    percentile of the observed advantages. Returns (counts, edges, advantages).
    """
    adv = agent.advantage(probe.s, probe.a, rng)
    lo, hi = np.percentile(adv, [1, 99])
    half = max(abs(lo), abs(hi), 1e-12)
    edges = np.linspace(-half, half, bins + 1)
    clipped = np.clip(adv, -half, half)
    counts, _ = np.histogram(clipped, bins=edges)
    return counts, edges, adv


# --- run-directory report emission -----------------------------------------


def load_run_log(run_dir):
    path = os.path.join(run_dir, "train_log.jsonl")
    if not os.path.exists(path):
        raise UsageError(f"missing training log: {path}")
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def curve_from_records(records, seed=0):
    pts = [(r["step"], r["eval_return"]) for r in records if r.get("eval_return") is not None]
    steps = np.array([p[0] for p in pts])
    returns = np.array([p[1] for p in pts])
    return LearningCurve(steps=steps, returns=returns, seed=seed)


def _seed_dirs(run_dir):
    if os.path.exists(os.path.join(run_dir, "train_log.jsonl")):
        return [run_dir]
    subs = sorted(glob.glob(os.path.join(run_dir, "seed_*")))
    subs = [d for d in subs if os.path.exists(os.path.join(d, "train_log.jsonl"))]
    if not subs:
        raise UsageError(f"no train_log.jsonl found under {run_dir}")
    return subs


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _save_figure(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(run_dir, out_dir=None):
    """Writes score tables, curve/approval columns, histogram snapshots, and
    SVG renders into ``run_dir`` (or ``out_dir``). Idempotent byte-for-byte.
    Returns the list of files written.
    """
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    seed_dirs = _seed_dirs(run_dir)
    per_seed_records = [load_run_log(d) for d in seed_dirs]
    curves = [curve_from_records(recs, seed=i) for i, recs in enumerate(per_seed_records)]
    report = score(curves)
    written = []

    score_path = os.path.join(out_dir, "score.csv")
    _write_csv(
        score_path,
        ["mean", "spread_2std", "ci95_across_seeds", "n_seeds", "window"],
        [[f"{report.mean:.6f}", f"{report.spread:.6f}", f"{report.ci95:.6f}", report.n_seeds, report.window]],
    )
    written.append(score_path)

    smoothed = [smooth(c) for c in curves]
    mean_curve = np.mean([c.returns for c in smoothed], axis=0)
    curve_path = os.path.join(out_dir, "curves.csv")
    header = ["step"] + [f"return_seed{i}" for i in range(len(curves))] + [
        f"smoothed_seed{i}" for i in range(len(curves))
    ] + ["cross_seed_mean"]
    rows = []
    for j, step in enumerate(curves[0].steps):
        row = [int(step)]
        row += [f"{c.returns[j]:.6f}" for c in curves]
        row += [f"{c.returns[j]:.6f}" for c in smoothed]
        row += [f"{mean_curve[j]:.6f}"]
        rows.append(row)
    _write_csv(curve_path, header, rows)
    written.append(curve_path)

    approval_path = os.path.join(out_dir, "approval.csv")
    rows = []
    for i, recs in enumerate(per_seed_records):
        for r in recs:
            frac = r.get("approval_fraction")
            if frac is not None:
                rows.append([i, r["step"], f"{frac:.6f}"])
    _write_csv(approval_path, ["seed", "step", "approval_fraction"], rows)
    written.append(approval_path)

    hist_rows = []
    for i, recs in enumerate(per_seed_records):
        for r in recs:
            counts = r.get("adv_hist_counts")
            if counts:
                edges = r["adv_hist_edges"]
                for b, count in enumerate(counts):
                    hist_rows.append([i, r["step"], b, f"{edges[b]:.6f}", f"{edges[b + 1]:.6f}", count])
    if hist_rows:
        hist_path = os.path.join(out_dir, "advantage_histograms.csv")
        _write_csv(hist_path, ["seed", "step", "bin", "edge_low", "edge_high", "count"], hist_rows)
        written.append(hist_path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for c in curves:
        ax.plot(c.steps, c.returns, alpha=0.3, lw=0.8)
    ax.plot(curves[0].steps, mean_curve, color="black", lw=1.8, label="cross-seed smoothed mean")
    ax.set_xlabel("training step")
    ax.set_ylabel("evaluation return")
    ax.legend(loc="best")
    fig.tight_layout()
    curve_fig = os.path.join(out_dir, "curves.svg")
    _save_figure(fig, curve_fig)
    written.append(curve_fig)

    if rows:
        fig, ax = plt.subplots(figsize=(6, 4))
        for i, recs in enumerate(per_seed_records):
            pts = [(r["step"], r["approval_fraction"]) for r in recs if r.get("approval_fraction") is not None]
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=0.8, label=f"seed {i}")
        ax.set_xlabel("training step")
        ax.set_ylabel("actor batch approval fraction")
        ax.set_ylim(0, 1)
        ax.legend(loc="best")
        fig.tight_layout()
        approval_fig = os.path.join(out_dir, "approval.svg")
        _save_figure(fig, approval_fig)
        written.append(approval_fig)

    if hist_rows:
        last = [r for r in per_seed_records[0] if r.get("adv_hist_counts")][-1]
        edges = np.asarray(last["adv_hist_edges"])
        counts = np.asarray(last["adv_hist_counts"])
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(0.5 * (edges[:-1] + edges[1:]), counts, width=np.diff(edges), color="tab:blue")
        ax.set_xlabel("advantage estimate")
        ax.set_ylabel("probe count")
        fig.tight_layout()
        hist_fig = os.path.join(out_dir, "advantage_histogram.svg")
        _save_figure(fig, hist_fig)
        written.append(hist_fig)

    return written
