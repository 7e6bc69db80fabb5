"""Markdown summary of a run directory, rendered only from stored result files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .scores import ALL_CRITERIA, CRITERIA

METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"
ZOOM_CSV = "zoom.csv"
ZOOM_PNG = "zoom.png"
SELF_JSON = "self_identity.json"
SELF_CSV = "self_identity.csv"
PAIR_VAR_CSV = "pair_variation.csv"
CORR_CSV = "criterion_correlation.csv"
ABLATION_CSV = "ablation.csv"
REPORT_MD = "report.md"


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _num(value: str, digits: int = 3) -> str:
    if value in ("", None):
        return "n/a"
    return f"{float(value):.{digits}f}"


def _pvalue(value: str) -> str:
    if value in ("", None):
        return "n/a"
    return f"{float(value):.2e}"


def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return lines


def write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_correlation_csv(path: Path, matrix: np.ndarray, config_hash: str) -> None:
    rows = [
        {"criterion": a, **{b: float(matrix[i, j]) for j, b in enumerate(CRITERIA)}, "config_hash": config_hash}
        for i, a in enumerate(CRITERIA)
    ]
    write_csv(path, ["criterion", *CRITERIA, "config_hash"], rows)


def write_zoom_plot(path: Path, zoom_rows: list[dict]) -> None:
    """m_c versus PCC per criterion; the no-box setting is a horizontal reference line."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    boxed = [r for r in zoom_rows if r["m_c"] not in ("", None)]
    for name in ALL_CRITERIA:
        pts = sorted((float(r["m_c"]), float(r["pcc"])) for r in boxed if r["criterion"] == name and r["pcc"] != "")
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", label=name, linewidth=2.5 if name == "MS" else 1.2)
    for r in zoom_rows:
        if r["m_c"] in ("", None) and r["criterion"] == "MS" and r["pcc"] != "":
            ax.axhline(float(r["pcc"]), color="grey", linestyle="--", label="MS no box")
    ax.set_xlabel("zoom m_c")
    ax.set_ylabel("PCC")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def _metrics_section(run: Path) -> list[str]:
    data = json.loads((run / METRICS_JSON).read_text())
    rows = []
    for name in ALL_CRITERIA:
        row = data["criteria"].get(name)
        if row is None:
            continue
        rows.append([
            name,
            _num(row["mae"]), _num(row["pcc"]), _num(row["t"], 2), _pvalue(row["p"]), _num(row["accuracy"]),
        ])
    lines = [f"## Test metrics ({data['label']}, {data['n_pairs']} pairs)", ""]
    lines += _table(["criterion", "MAE", "PCC", "t", "p", "accuracy"], rows)
    for note in data.get("notes", []):
        lines.append(f"\nNote: {note}")
    return lines


def _correlation_section(run: Path) -> list[str]:
    rows = read_csv(run / CORR_CSV)
    body = [[r["criterion"], *(_num(r[c], 2) for c in CRITERIA)] for r in rows]
    return ["## Criterion correlation", ""] + _table(["", *CRITERIA], body)


def _zoom_section(run: Path) -> list[str]:
    rows = read_csv(run / ZOOM_CSV)
    labels = list(dict.fromkeys(r["label"] for r in rows))
    body = []
    for label in labels:
        by_c = {r["criterion"]: r for r in rows if r["label"] == label}
        body.append([label, *(_num(by_c[c]["pcc"]) if c in by_c else "n/a" for c in ALL_CRITERIA)])
    lines = ["## Zoom sweep (PCC)", ""] + _table(["setting", *ALL_CRITERIA], body)
    if (run / ZOOM_PNG).is_file():
        lines += ["", f"![PCC against zoom]({ZOOM_PNG})"]
    return lines


def _self_section(run: Path) -> list[str]:
    rows = read_csv(run / SELF_CSV)
    body = [[r["set"], r["n_pairs"], *(_num(r[c]) for c in ALL_CRITERIA)] for r in rows]
    return ["## Identity and self matching (MAE to a perfect score)", ""] + _table(
        ["set", "pairs", *ALL_CRITERIA], body
    )


def _pair_variation_section(run: Path) -> list[str]:
    rows = read_csv(run / PAIR_VAR_CSV)
    body = [[r["mode"], r["image_pairs"], r["n_user_pairs"], *(_num(r[c]) for c in ALL_CRITERIA)] for r in rows]
    return ["## Prediction variation across image pairs of the same two users", ""] + _table(
        ["mode", "image pairs", "user pairs", *ALL_CRITERIA], body
    )


def _ablation_section(run: Path) -> list[str]:
    rows = read_csv(run / ABLATION_CSV)
    body = [
        [r["variant"], r["n_parameters"], *(_num(r[f"pcc_{c}"]) for c in ALL_CRITERIA), _num(r["mae_MS"])]
        for r in rows
    ]
    return ["## Architecture comparison (test PCC)", ""] + _table(
        ["variant", "parameters", *ALL_CRITERIA, "MS MAE"], body
    )


SECTIONS = (
    (CORR_CSV, _correlation_section),
    (METRICS_JSON, _metrics_section),
    (ABLATION_CSV, _ablation_section),
    (ZOOM_CSV, _zoom_section),
    (SELF_CSV, _self_section),
    (PAIR_VAR_CSV, _pair_variation_section),
)


def render_report(run: Path) -> str:
    """Markdown for every analysis present in `run`; absent ones are left out."""
    run = Path(run)
    meta_path = run / "checkpoint.json"
    config_hash = ""
    if meta_path.is_file():
        config_hash = json.loads(meta_path.read_text()).get("config_hash", "")
    lines = [f"# Run report: {run.name}", ""]
    if config_hash:
        lines += [f"Config hash: `{config_hash}`", ""]
    present = 0
    for filename, section in SECTIONS:
        if (run / filename).is_file():
            lines += section(run) + [""]
            present += 1
    if not present:
        lines += ["No stored results found.", ""]
    return "\n".join(lines)


def write_report(run: Path) -> Path:
    path = Path(run) / REPORT_MD
    path.write_text(render_report(run), encoding="utf-8")
    return path
