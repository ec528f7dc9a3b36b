"""Static figures from metric reports.

Every plot writes its exact source data as a CSV first, then renders the
figure from that same data, so numbers are auditable without matplotlib.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InputError  # noqa: E402
from .evaluation import MetricReport  # noqa: E402

ORACLE_METHOD = "oracle"


def _sorted_reports(reports: list[MetricReport]) -> list[MetricReport]:
    if not reports:
        raise InputError("empty report set; nothing to plot")
    return sorted(reports, key=lambda r: (r.method == ORACLE_METHOD, r.method))


def _line_style(method: str) -> dict:
    if method == ORACLE_METHOD:
        return {"color": "black", "linestyle": "--", "linewidth": 2.0}
    return {}


def _write_curve_csv(path: Path, reports: list[MetricReport], attr: str):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "k", attr])
        for rep in reports:
            for k, v in zip(rep.k_values, getattr(rep, attr)):
                if v is not None:
                    writer.writerow([rep.method, k, v])


def _curve_plot(reports: list[MetricReport], attr: str, ylabel: str, title: str,
                out_dir: Path, stem: str) -> list[Path]:
    csv_path = out_dir / f"{stem}.csv"
    _write_curve_csv(csv_path, reports, attr)

    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for rep in reports:
        ks = [k for k, v in zip(rep.k_values, getattr(rep, attr)) if v is not None]
        vs = [v for v in getattr(rep, attr) if v is not None]
        if ks:
            ax.plot(ks, vs, marker="o", markersize=3, label=rep.method,
                    **_line_style(rep.method))
    ax.set_xlabel("recovery rate k")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    png_path = out_dir / f"{stem}.png"
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def _ratio_k_index(report: MetricReport) -> int:
    """Index of the trigger-ratio k when recorded, else the middle grid point."""
    ratio = report.extras.get("conventions", {}).get("trigger_ratio")
    if ratio is not None:
        diffs = [abs(k - ratio) for k in report.k_values]
        return diffs.index(min(diffs))
    return len(report.k_values) // 2


def plot_asr_curves(reports: list[MetricReport], out_dir: Path) -> list[Path]:
    """Attack success rate against k; lower curves are better methods."""
    return _curve_plot(_sorted_reports(reports), "asr_curve",
                       "attack success rate", "ASR vs recovery rate (lower is better)",
                       out_dir, "asr_curves")


def plot_tr_curves(reports: list[MetricReport], out_dir: Path) -> list[Path]:
    """Trigger recall against k, for reports where TR is defined."""
    with_tr = [r for r in _sorted_reports(reports)
               if any(v is not None for v in r.tr_curve)]
    if not with_tr:
        return []
    return _curve_plot(with_tr, "tr_curve", "trigger recall",
                       "Trigger recall vs recovery rate", out_dir, "tr_curves")


def plot_flc_bubble(reports: list[MetricReport], out_dir: Path) -> list[Path]:
    """Per-method marker at the trigger-ratio k in the fractional-change
    plane; marker area scales with FLC (top-left corner is perfect)."""
    reports = _sorted_reports(reports)
    csv_path = out_dir / "flc_bubble.csv"
    rows = []
    for rep in reports:
        i = _ratio_k_index(rep)
        rows.append([rep.method, rep.k_values[i], rep.delta_logit_target[i],
                     rep.delta_logit_y[i], rep.flc[i]])
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "k", "delta_logit_target", "delta_logit_y", "flc"])
        writer.writerows(rows)

    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    for method, _, dt, dy, flc in rows:
        ax.scatter(dt, dy, s=60 + 400 * flc / 2.0, alpha=0.55,
                   color="black" if method == ORACLE_METHOD else None)
        ax.annotate(method, (dt, dy), fontsize=8,
                    textcoords="offset points", xytext=(4, 4))
    ax.set_xlim(-0.05, 1.05)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("fractional change, target class (0 = fully suppressed)")
    ax.set_ylabel("fractional change, true class (1 = fully restored)")
    ax.set_title("Recovery quality at the trigger-ratio k (area = FLC)")
    ax.grid(True, alpha=0.3)
    png_path = out_dir / "flc_bubble.png"
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def plot_parameter_lines(reports: list[MetricReport], out_dir: Path,
                         parameter: str) -> list[Path]:
    """Metric-vs-parameter lines when the report set spans several runs.

    parameter names a key of extras["conventions"] (e.g. "alpha" or
    "poisoning_rate"); the y value is each report's FLC at the trigger-ratio
    k. Returns [] when fewer than two distinct parameter values exist.
    """
    tagged = [(r.extras.get("conventions", {}).get(parameter), r) for r in reports]
    tagged = [(p, r) for p, r in tagged if p is not None]
    if len({p for p, _ in tagged}) < 2:
        return []

    by_method: dict[str, list] = {}
    for p, rep in tagged:
        i = _ratio_k_index(rep)
        by_method.setdefault(rep.method, []).append((p, rep.flc[i]))

    csv_path = out_dir / f"flc_vs_{parameter}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", parameter, "flc"])
        for method in sorted(by_method):
            for p, v in sorted(by_method[method]):
                writer.writerow([method, p, v])

    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for method in sorted(by_method):
        pairs = sorted(by_method[method])
        ax.plot([p for p, _ in pairs], [v for _, v in pairs], marker="o",
                label=method, **_line_style(method))
    ax.set_xlabel(parameter)
    ax.set_ylabel("FLC at trigger-ratio k")
    ax.set_title(f"Recovery quality vs {parameter}")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    png_path = out_dir / f"flc_vs_{parameter}.png"
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def summary_table(reports: list[MetricReport], out_dir: Path) -> list[Path]:
    """One row per method at the trigger-ratio k, as CSV and a table figure."""
    reports = _sorted_reports(reports)
    header = ["method", "k", "asr", "tr", "flc", "delta_logit_y",
              "delta_logit_target", "samples"]
    rows = []
    for rep in reports:
        i = _ratio_k_index(rep)
        tr = rep.tr_curve[i]
        rows.append([
            rep.method, f"{rep.k_values[i]:.4f}", f"{rep.asr_curve[i]:.4f}",
            "n/a" if tr is None else f"{tr:.4f}", f"{rep.flc[i]:.4f}",
            f"{rep.delta_logit_y[i]:.4f}", f"{rep.delta_logit_target[i]:.4f}",
            str(rep.sample_count),
        ])

    csv_path = out_dir / "summary.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)

    fig, ax = plt.subplots(figsize=(8.5, 0.5 + 0.35 * len(rows)))
    ax.axis("off")
    table = ax.table(cellText=rows, colLabels=header, loc="center")
    table.auto_set_font_size(False)
    table.set_fontsize(8)
    table.scale(1.0, 1.3)
    ax.set_title("Metrics at the trigger-ratio recovery rate", pad=12)
    png_path = out_dir / "summary_table.png"
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return [csv_path, png_path]


def render_all(reports: list[MetricReport], out_dir) -> list[Path]:
    """All standard figures for one report set; errors on an empty set."""
    if not reports:
        raise InputError("empty report set; nothing to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    paths += plot_asr_curves(reports, out_dir)
    paths += plot_tr_curves(reports, out_dir)
    paths += plot_flc_bubble(reports, out_dir)
    paths += summary_table(reports, out_dir)
    for parameter in ("alpha", "poisoning_rate"):
        paths += plot_parameter_lines(reports, out_dir, parameter)
    return paths
