"""Report persistence: a delimited table and a hierarchical text document.

The table is one report per line with a fixed column order, tab-separated,
'.' decimal separator, floats written with shortest round-trip repr so the
values parse back exactly. The document is the same content, indented, for
human reading. Both are stable across runs, so downstream plots diff cleanly.
"""

from __future__ import annotations

import os

import numpy as np

from .protocol import ExperimentReport

REPORT_COLUMNS = (
    "plan", "pretrain_mode", "retrain_mode", "trainable",
    "clean_acc", "robust_acc", "eval_epsilon", "eval_iterations",
    "seed", "wall_time_s",
)

_FLOAT_COLUMNS = {"clean_acc", "robust_acc", "eval_epsilon", "wall_time_s"}
_INT_COLUMNS = {"eval_iterations", "seed"}


def _trainable_tag(trainable: dict) -> str:
    chosen = [name for name, flag in trainable.items() if flag]
    return "+".join(chosen) if chosen else "-"


def report_row(report: ExperimentReport) -> dict:
    return {
        "plan": report.plan,
        "pretrain_mode": report.pretrain_mode or "-",
        "retrain_mode": report.retrain_mode,
        "trainable": _trainable_tag(report.trainable_segments),
        "clean_acc": float(report.clean_acc),
        "robust_acc": float(report.robust_acc),
        "eval_epsilon": float(report.eval_epsilon),
        "eval_iterations": int(report.eval_iterations),
        "seed": int(report.seed),
        "wall_time_s": float(report.wall_time),
    }


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_table(rows, path) -> None:
    """One report per line, fixed column order; accepts reports or row dicts."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write("\t".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            if isinstance(row, ExperimentReport):
                row = report_row(row)
            f.write("\t".join(_format_value(row[c]) for c in REPORT_COLUMNS) + "\n")


def read_report_table(path) -> list:
    """Parse a report table back to row dicts, numeric fields typed."""
    with open(path) as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines:
        return []
    header = lines[0].split("\t")
    if tuple(header) != REPORT_COLUMNS:
        raise ValueError(f"unexpected report columns {header}; expected {list(REPORT_COLUMNS)}")
    rows = []
    for line in lines[1:]:
        values = line.split("\t")
        row = dict(zip(header, values))
        for c in _FLOAT_COLUMNS:
            row[c] = float(row[c])
        for c in _INT_COLUMNS:
            row[c] = int(row[c])
        rows.append(row)
    return rows


def write_report_document(rows, path, title: str = "experiment reports") -> None:
    """Hierarchical text rendering of the same report rows."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(f"{title}\n")
        for row in rows:
            if isinstance(row, ExperimentReport):
                row = report_row(row)
            f.write("report:\n")
            for c in REPORT_COLUMNS:
                f.write(f"  {c}: {_format_value(row[c])}\n")


def write_history(history, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write("epoch\ttrain_loss\tclean_acc\tlr\n")
        for rec in history.records:
            f.write(f"{rec.epoch}\t{rec.train_loss!r}\t{rec.clean_acc!r}\t{rec.lr!r}\n")


def write_median_summary(medians, path) -> None:
    """Aggregated with/without medians from a combination sweep."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    cols = ("segment", "clean_with", "clean_without", "robust_with",
            "robust_without", "n_with", "n_without")
    with open(path, "w") as f:
        f.write("\t".join(cols) + "\n")
        for m in medians:
            f.write("\t".join(_format_value(m[c]) for c in cols) + "\n")


def write_divergence_summary(results, path) -> None:
    """Per-segment JS divergence table from the analysis pipeline."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write("segment\tjs_divergence\tkl_final\tn_clean\tn_adv\n")
        for seg in results:
            r = results[seg]
            f.write(f"{seg}\t{r.divergence!r}\t{r.kl_final!r}"
                    f"\t{r.metadata['n_clean']}\t{r.metadata['n_adv']}\n")


def save_samples(samples, path) -> None:
    """Persist harvested activation samples for one segment as an npz archive."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    np.savez(
        path,
        vectors=np.stack([s.channel_vector for s in samples]),
        image_ids=np.array([s.image_id for s in samples], dtype=np.int64),
        positions=np.array([s.spatial_position for s in samples], dtype=np.int64),
        is_adversarial=np.array([s.is_adversarial for s in samples], dtype=bool),
        labels=np.array([s.true_label for s in samples], dtype=np.int64),
        segment=np.array([s.segment_name for s in samples]),
    )


def load_samples(path):
    from .analysis import ActivationSample

    data = np.load(path, allow_pickle=False)
    out = []
    for i in range(len(data["labels"])):
        out.append(ActivationSample(
            segment_name=str(data["segment"][i]),
            channel_vector=data["vectors"][i],
            image_id=int(data["image_ids"][i]),
            spatial_position=tuple(int(v) for v in data["positions"][i]),
            is_adversarial=bool(data["is_adversarial"][i]),
            true_label=int(data["labels"][i]),
        ))
    return out


def save_coords(result, path) -> None:
    """2-D embedding coordinates with group tags, tab-separated."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write("x\ty\tgroup\tlabel\n")
        for (x, y), adv, label in zip(result.coords, result.is_adversarial, result.labels):
            group = "adversarial" if adv else "clean"
            f.write(f"{float(x)!r}\t{float(y)!r}\t{group}\t{int(label)}\n")


def save_grids(result, path) -> None:
    np.savez(
        path,
        clean=result.clean_grid.values,
        adversarial=result.adv_grid.values,
        bounds=np.array(result.clean_grid.bounds),
        cell_area=np.array([result.clean_grid.cell_area]),
        js_divergence=np.array([result.divergence]),
    )
