"""Render training/evaluation reports from a metrics log.

Reads the append-only JSONL written by the trainer and produces, in one
output directory: loss and logit curves (and a Fréchet curve when present) as
PNG figures, a flat `summary.csv` of the raw rows, and a `report.json` with
headline numbers.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CORE_FIELDS = ("step", "d_loss", "g_loss", "r1", "logit_real", "logit_fake")


def load_metrics(path: str | Path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append(json.loads(line))
    if not rows:
        raise ValueError(f"no metric rows in {path}")
    return rows


def _series(rows: list[dict], key: str) -> tuple[list[int], list[float]]:
    steps, values = [], []
    for row in rows:
        if key in row:
            steps.append(row["step"])
            values.append(row[key])
    return steps, values


def _smooth(values: list[float], window: int = 25) -> list[float]:
    if len(values) <= window:
        return values
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(sum(values[lo : i + 1]) / (i + 1 - lo))
    return out


def render_report(metrics_path: str | Path, out_dir: str | Path) -> dict:
    rows = load_metrics(metrics_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    figures = []

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for key, color in (("d_loss", "tab:red"), ("g_loss", "tab:blue")):
        steps, values = _series(rows, key)
        ax.plot(steps, values, color=color, alpha=0.25, linewidth=0.8)
        ax.plot(steps, _smooth(values), color=color, label=key, linewidth=1.6)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "losses.png", dpi=150)
    plt.close(fig)
    figures.append("losses.png")

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for key, color in (("logit_real", "tab:green"), ("logit_fake", "tab:orange")):
        steps, values = _series(rows, key)
        ax.plot(steps, _smooth(values), color=color, label=key, linewidth=1.4)
    steps, real = _series(rows, "logit_real")
    _, fake = _series(rows, "logit_fake")
    ax.plot(steps, _smooth([r - f for r, f in zip(real, fake)]), "k--", label="gap", linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("discriminator logit")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "logits.png", dpi=150)
    plt.close(fig)
    figures.append("logits.png")

    fid_steps, fid_values = _series(rows, "fid_eval")
    if fid_values:
        fig, ax = plt.subplots(figsize=(8, 4.5))
        ax.plot(fid_steps, fid_values, "o-", color="tab:purple")
        ax.set_xlabel("step")
        ax.set_ylabel("Fréchet distance")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_dir / "frechet.png", dpi=150)
        plt.close(fig)
        figures.append("frechet.png")

    columns = [k for k in CORE_FIELDS if any(k in r for r in rows)]
    if fid_values:
        columns.append("fid_eval")
    with (out_dir / "summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})

    last = rows[-1]
    summary = {
        "steps": last["step"] + 1 if "step" in last else len(rows),
        "rows": len(rows),
        "final": {k: last.get(k) for k in CORE_FIELDS if k in last},
        "figures": figures,
    }
    if fid_values:
        summary["frechet"] = {
            "first": fid_values[0],
            "last": fid_values[-1],
            "best": min(fid_values),
        }
    (out_dir / "report.json").write_text(json.dumps(summary, indent=2))
    return summary
