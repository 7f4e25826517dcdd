"""Metrics tables (CSV/JSON) and matplotlib figures."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import CVResult, GridRow  # noqa: E402
from .kdf import atomic_write  # noqa: E402

FOLD_FIELDS = ["user", "fold", "accuracy", "eer", "threshold", "model", "layout", "encoding",
               "rnn", "cutout", "epochs", "lr", "optimizer", "schedule", "seed"]
SUMMARY_FIELDS = ["user", "folds", "accuracy", "eer"]
GRID_FIELDS = ["user", "rank", "epochs", "lr", "optimizer", "schedule", "mean_eer", "mean_accuracy", "repeats"]


def _cell(v):
    # repr round-trips floats exactly, which keeps repeated runs byte-identical
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def format_csv(rows, fields) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row.get(k, "")) for k in fields})
    return buf.getvalue()


def write_csv(path, rows, fields) -> None:
    atomic_write(path, format_csv(rows, fields).encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def fold_rows(result: CVResult, meta: dict) -> list[dict]:
    rows = []
    for f in result.folds:
        m = f.metrics
        rows.append({**meta, "user": result.user_id, "fold": f.fold, "accuracy": m.accuracy,
                     "eer": m.eer, "threshold": m.eer_threshold})
    return rows


def roc_record(result: CVResult) -> dict:
    """Per-fold ROC points keyed by fold, as lists of [fpr, fnr, threshold]."""
    return {str(f.fold): [list(p) for p in f.metrics.roc] for f in result.folds}


def grid_rows(user: str, rows: list[GridRow]) -> list[dict]:
    return [{"user": user, "rank": i + 1, "epochs": r.epochs, "lr": r.lr, "optimizer": r.optimizer,
             "schedule": r.schedule, "mean_eer": r.mean_eer, "mean_accuracy": r.mean_accuracy,
             "repeats": r.repeats} for i, r in enumerate(rows)]


def summarize(rows: list[dict]) -> list[dict]:
    """Mean accuracy and EER per user, then an ``ALL`` row averaging users unweighted."""
    by_user: dict[str, list[dict]] = {}
    for r in rows:
        by_user.setdefault(r["user"], []).append(r)
    out = []
    for user, rs in by_user.items():
        out.append({"user": user, "folds": len(rs),
                    "accuracy": float(np.mean([float(r["accuracy"]) for r in rs])),
                    "eer": float(np.mean([float(r["eer"]) for r in rs]))})
    if out:
        out.append({"user": "ALL", "folds": sum(r["folds"] for r in out),
                    "accuracy": float(np.mean([r["accuracy"] for r in out])),
                    "eer": float(np.mean([r["eer"] for r in out]))})
    return out


def plot_roc(roc_by_user: dict, path) -> None:
    """FNR against FPR for every fold, one colour per user, with the EER diagonal."""
    fig, ax = plt.subplots(figsize=(5, 5))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, (user, folds) in enumerate(sorted(roc_by_user.items())):
        for j, pts in enumerate(folds.values()):
            arr = np.asarray(pts, dtype=float).reshape(-1, 3)
            ax.plot(arr[:, 0], arr[:, 1], color=colors[i % len(colors)], alpha=0.7,
                    label=user if j == 0 else None)
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("false negative rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_user_eer(summary: list[dict], path) -> None:
    users = [r for r in summary if r["user"] != "ALL"]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(users) + 2), 3.5))
    x = np.arange(len(users))
    ax.bar(x - 0.2, [r["eer"] for r in users], width=0.4, label="EER")
    ax.bar(x + 0.2, [r["accuracy"] for r in users], width=0.4, label="accuracy")
    ax.set_xticks(x, [r["user"] for r in users], rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(metrics_csv, out_dir, roc_json=None) -> list[Path]:
    """Write summary.csv and the figures into ``out_dir``; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(read_csv(metrics_csv))
    written = [out_dir / "summary.csv", out_dir / "user_eer.png"]
    write_csv(written[0], summary, SUMMARY_FIELDS)
    plot_user_eer(summary, written[1])
    if roc_json is not None:
        doc = json.loads(Path(roc_json).read_text(encoding="utf-8"))
        path = out_dir / "roc.png"
        plot_roc(doc["roc"], path)
        written.append(path)
    return written
