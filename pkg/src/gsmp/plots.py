"""SVG plots for the CSV tables the CLI writes."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402

SCHEMAS = {
    "convexity": ("lambda", "F", "right", "left"),
    "descent": ("iter", "J", "step", "residual"),
    "gamma": ("eps", "gamma"),
}


class SchemaError(ValueError):
    pass


def read_table(path, kind: str) -> dict[str, list[float]]:
    if kind not in SCHEMAS:
        raise SchemaError(f"unknown plot kind {kind!r}; choose from {sorted(SCHEMAS)}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    want = SCHEMAS[kind]
    if tuple(header) != want:
        raise SchemaError(f"{path} has columns {header}, a {kind} plot needs {list(want)}")
    if not body:
        raise SchemaError(f"{path} has a header but no rows")
    return {name: [float(r[i]) for r in body] for i, name in enumerate(header)}


def emit_plot(csv_path, kind: str, out=None) -> Path:
    """Render ``csv_path`` as an SVG next to it (or at ``out``); nothing is written on error."""
    data = read_table(csv_path, kind)
    out = Path(csv_path).with_suffix(".svg") if out is None else Path(out)
    fig, ax = plt.subplots(figsize=(6, 4))
    if kind == "convexity":
        lam, F = data["lambda"], data["F"]
        i0 = min(range(len(lam)), key=lambda i: abs(lam[i]))
        right, left = data["right"][i0], data["left"][i0]
        ax.plot(lam, F, "k-", label="F(lambda)")
        pos = [x for x in lam if x >= lam[i0]]
        neg = [x for x in lam if x <= lam[i0]]
        ax.plot(pos, [F[i0] + right * (x - lam[i0]) for x in pos], "r--", label=f"right slope {right:.4g}")
        ax.plot(neg, [F[i0] + left * (x - lam[i0]) for x in neg], "b--", label=f"left slope {left:.4g}")
        ax.set_xlabel("lambda")
    elif kind == "descent":
        ax.plot(data["iter"], data["J"], "o-", ms=3)
        ax.set_xlabel("iteration")
        ax.set_ylabel("J")
    else:
        ax.semilogx(data["eps"], data["gamma"], "o-", ms=3)
        ax.set_xlabel("eps")
        ax.set_ylabel("Gamma")
    if kind == "convexity":
        ax.legend()
    fig.tight_layout()
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out
