"""Accuracy metrics, confusion matrices, exports and supervised-vs-SSL comparisons.

Overall accuracy counts only samples whose true class is anatomical.
Background stays a legal prediction, so anatomy predicted as background is
an error. Grouped accuracy also accepts any prediction inside the confusable
cluster for a cluster sample.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import model as M


class ComparisonError(ValueError):
    pass


@dataclass
class MetricsReport:
    confusion: np.ndarray
    class_names: list[str]
    overall_accuracy_anatomical: float
    grouped_cluster_accuracy: float
    per_class_recall: list  # float, or None for classes absent from the test set
    background_included: bool
    cluster: list[int] = field(default_factory=list)
    background: int | None = None
    test_hash: str = ""

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def distinct_recall(self) -> float:
        """Mean recall over anatomical classes outside the cluster."""
        idx = [i for i in range(len(self.class_names)) if i not in self.cluster and i != self.background]
        vals = [self.per_class_recall[i] for i in idx if self.per_class_recall[i] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "confusion": self.confusion.astype(int).tolist(),
            "overall_accuracy_anatomical": self.overall_accuracy_anatomical,
            "grouped_cluster_accuracy": self.grouped_cluster_accuracy,
            "per_class_recall": list(self.per_class_recall),
            "background_included": self.background_included,
            "cluster": list(self.cluster),
            "background": self.background,
            "test_hash": self.test_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            class_names=list(d["class_names"]),
            overall_accuracy_anatomical=d["overall_accuracy_anatomical"],
            grouped_cluster_accuracy=d["grouped_cluster_accuracy"],
            per_class_recall=list(d["per_class_recall"]),
            background_included=d["background_included"],
            cluster=list(d.get("cluster", [])),
            background=d.get("background"),
            test_hash=d.get("test_hash", ""),
        )


def report_from_predictions(y_true, y_pred, class_names, cluster=(), background=None, test_hash="") -> MetricsReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    c = len(class_names)
    if len(y_true) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    totals = confusion.sum(axis=1)
    recall = [float(confusion[i, i] / totals[i]) if totals[i] else None for i in range(c)]

    anatomical = y_true != background if background is not None else np.ones(len(y_true), bool)
    correct = y_true == y_pred
    in_cluster = np.isin(y_true, list(cluster)) & np.isin(y_pred, list(cluster))
    n = int(anatomical.sum())
    overall = float(correct[anatomical].sum() / n) if n else float("nan")
    grouped = float((correct | in_cluster)[anatomical].sum() / n) if n else float("nan")
    return MetricsReport(
        confusion=confusion,
        class_names=list(class_names),
        overall_accuracy_anatomical=overall,
        grouped_cluster_accuracy=grouped,
        per_class_recall=recall,
        background_included=background is not None,
        cluster=[int(i) for i in cluster],
        background=background,
        test_hash=test_hash,
    )


def evaluate(params: M.ModelParams, test, cluster=None, background="auto", test_hash: str | None = None) -> MetricsReport:
    """Eval-mode predictions on ``test`` (a data.Dataset) summarised as a report."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if cluster is None:
        cluster = test.cluster_indices
    if background == "auto":
        background = test.background_index
    logits = M.predict(params, test.images)
    return report_from_predictions(
        test.labels, logits.argmax(axis=1), test.class_names, cluster, background,
        test_hash if test_hash is not None else test.content_hash(),
    )


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------
def write_confusion_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["truth", *report.class_names])
        for name, row in zip(report.class_names, report.confusion):
            writer.writerow([name, *map(int, row)])


def read_confusion_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return names, np.asarray([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)


def confusion_svg(report: MetricsReport, cell: int = 26) -> str:
    names = report.class_names
    c = len(names)
    margin = 110
    size = margin + c * cell + 10
    rows = report.confusion.sum(axis=1, keepdims=True)
    frac = np.divide(report.confusion, rows, out=np.zeros(report.confusion.shape), where=rows > 0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="9">',
        f'<text x="{margin}" y="12">predicted</text>',
    ]
    for i, name in enumerate(names):
        parts.append(f'<text x="4" y="{margin + i * cell + cell * 0.65:.1f}">{escape(name)}</text>')
        parts.append(
            f'<text transform="translate({margin + i * cell + cell * 0.65:.1f},{margin - 4}) rotate(-60)">{escape(name)}</text>'
        )
    for i in range(c):
        for j in range(c):
            shade = int(255 - 215 * frac[i, j])
            parts.append(
                f'<rect class="cell" x="{margin + j * cell}" y="{margin + i * cell}" width="{cell}" height="{cell}" '
                f'fill="rgb({shade},{shade},255)" stroke="#ccc"/>'
            )
            parts.append(
                f'<text x="{margin + j * cell + cell / 2:.1f}" y="{margin + i * cell + cell * 0.62:.1f}" '
                f'text-anchor="middle">{int(report.confusion[i, j])}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts)


def bars_svg(groups: list[tuple[str, list[tuple[str, float]]]], title: str = "") -> str:
    """Grouped vertical bars; each group is (label, [(series, value in [0, 1]), ...])."""
    palette = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b"]
    series = []
    for _, bars in groups:
        for name, _ in bars:
            if name not in series:
                series.append(name)
    bar_w, gap, height, base = 18, 14, 200, 230
    width = 60 + sum(len(b) * bar_w + gap for _, b in groups) + 140
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{base + 60}" font-family="sans-serif" font-size="10">',
        f'<text x="10" y="14">{escape(title)}</text>',
        f'<line x1="50" y1="{base}" x2="{width - 130}" y2="{base}" stroke="black"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = base - tick * height
        parts.append(f'<text x="20" y="{y + 3:.1f}">{tick:.2f}</text>')
    x = 60
    for label, bars in groups:
        start = x
        for name, value in bars:
            v = 0.0 if value is None or not np.isfinite(value) else float(value)
            colour = palette[series.index(name) % len(palette)]
            parts.append(
                f'<rect class="bar" x="{x}" y="{base - v * height:.1f}" width="{bar_w - 2}" height="{v * height:.1f}" fill="{colour}"/>'
            )
            x += bar_w
        parts.append(f'<text x="{start}" y="{base + 14}">{escape(label)}</text>')
        x += gap
    for k, name in enumerate(series):
        colour = palette[k % len(palette)]
        parts.append(f'<rect x="{width - 120}" y="{30 + 14 * k}" width="10" height="10" fill="{colour}"/>')
        parts.append(f'<text x="{width - 105}" y="{39 + 14 * k}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def export(report: MetricsReport, run_record=None, out_dir=".") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_confusion_csv(report, out / "confusion.csv")
    summary = report.to_dict()
    if run_record is not None:
        summary["run"] = {
            "config_hash": run_record.config_hash,
            "status": run_record.status,
            "epochs": len(run_record.epochs),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "confusion.svg").write_text(confusion_svg(report))
    recall_bars = [
        (name, [("recall", r)]) for name, r in zip(report.class_names, report.per_class_recall)
    ]
    recall_bars += [
        ("overall", [("recall", report.overall_accuracy_anatomical)]),
        ("grouped", [("recall", report.grouped_cluster_accuracy)]),
    ]
    (out / "accuracy_bars.svg").write_text(bars_svg(recall_bars, "per-class recall"))
    return [out / n for n in ("confusion.csv", "summary.json", "confusion.svg", "accuracy_bars.svg")]


def load_summary(path) -> MetricsReport:
    d = json.loads(Path(path).read_text())
    d.pop("run", None)
    return MetricsReport.from_dict(d)


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------
COMPARE_COLUMNS = (
    "labelled_per_class", "include_background", "variant", "seeds",
    "supervised_overall", "ssl_overall", "delta_overall",
    "supervised_grouped", "ssl_grouped", "delta_grouped", "detrimental",
)


def compare(records) -> list[dict]:
    """Mean SSL minus supervised deltas per (budget, background) cell.

    Records are :class:`ssl_lab.train.RunRecord` instances. Failed runs are
    skipped. A negative overall delta is flagged as ``detrimental``.
    """
    done = [r for r in records if r.status == "ok" and r.report is not None]
    if len(done) < 2:
        raise ComparisonError("need at least two completed runs to compare")
    hashes = {r.report.test_hash for r in done}
    if len(hashes) > 1:
        raise ComparisonError(f"runs were evaluated on different test sets: {sorted(hashes)}")

    cells: dict[tuple, dict] = {}
    for r in done:
        cfg = r.config
        key = (cfg["labelled_per_class"], cfg["include_background"])
        cell = cells.setdefault(key, {"supervised": [], "ssl": {}})
        if cfg["mode"] == "supervised":
            cell["supervised"].append(r.report)
        else:
            cell["ssl"].setdefault(variant_label(cfg), []).append(r.report)

    rows = []
    for key in sorted(cells):
        cell = cells[key]
        sup = cell["supervised"]
        sup_o = float(np.mean([m.overall_accuracy_anatomical for m in sup])) if sup else None
        sup_g = float(np.mean([m.grouped_cluster_accuracy for m in sup])) if sup else None
        for variant in sorted(cell["ssl"]):
            reps = cell["ssl"][variant]
            ssl_o = float(np.mean([m.overall_accuracy_anatomical for m in reps]))
            ssl_g = float(np.mean([m.grouped_cluster_accuracy for m in reps]))
            d_o = None if sup_o is None else ssl_o - sup_o
            d_g = None if sup_g is None else ssl_g - sup_g
            rows.append({
                "labelled_per_class": key[0],
                "include_background": key[1],
                "variant": variant,
                "seeds": len(reps),
                "supervised_overall": sup_o,
                "ssl_overall": ssl_o,
                "delta_overall": d_o,
                "supervised_grouped": sup_g,
                "ssl_grouped": ssl_g,
                "delta_grouped": d_g,
                "detrimental": bool(d_o is not None and d_o < 0),
            })
        if not cell["ssl"] and sup:
            rows.append({
                "labelled_per_class": key[0], "include_background": key[1], "variant": "", "seeds": len(sup),
                "supervised_overall": sup_o, "ssl_overall": None, "delta_overall": None,
                "supervised_grouped": sup_g, "ssl_grouped": None, "delta_grouped": None, "detrimental": False,
            })
    return rows


def variant_label(cfg: dict) -> str:
    ssl = cfg.get("ssl", {})
    opt = cfg.get("optimizer", {})
    per_class = ssl.get("eta_cbm_per_class", {})
    cbm = ",".join(f"{k}={v:g}" for k, v in sorted(per_class.items())) or "uniform"
    return f"{opt.get('name', '?')}/{ssl.get('tsa_schedule', '?')}/cbm:{ssl.get('eta_cbm_default', 0):g}[{cbm}]"


def write_comparison_csv(rows: list[dict], path) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARE_COLUMNS)
        for row in rows:
            writer.writerow([fmt(row[c]) for c in COMPARE_COLUMNS])


def format_comparison(rows: list[dict]) -> str:
    lines = [f"{'budget':>6} {'bg':>3} {'variant':<40} {'sup':>6} {'ssl':>6} {'delta':>7} {'sup_g':>6} {'ssl_g':>6} {'delta_g':>7}"]
    f = lambda v, s="": "   -  " if v is None else format(v, s or ".3f")  # noqa: E731
    for r in rows:
        flag = "  <- detrimental" if r["detrimental"] else ""
        lines.append(
            f"{r['labelled_per_class']:>6} {'yes' if r['include_background'] else 'no':>3} {r['variant']:<40} "
            f"{f(r['supervised_overall'])} {f(r['ssl_overall'])} {f(r['delta_overall'], '+.3f'):>7} "
            f"{f(r['supervised_grouped'])} {f(r['ssl_grouped'])} {f(r['delta_grouped'], '+.3f'):>7}{flag}"
        )
    return "\n".join(lines)
