"""Writers for history/report/sweep/attention/embedding files and run manifests."""
from __future__ import annotations

import csv
import json
import platform
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__


def _num(x):
    if x is None:
        return ""
    return repr(float(x))


def write_history_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_accuracy"])
        for h in history:
            w.writerow([h["epoch"], _num(h["train_loss"]), _num(h["val_accuracy"])])
    return Path(path)


def read_history_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]), "val_accuracy": float(r["val_accuracy"])}
            for r in csv.DictReader(fh)
        ]


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return Path(path)


def write_report_json(report, path, wall_time_s=None):
    return write_json(report.to_dict(wall_time_s), path)


SWEEP_COLUMNS = ("proportion", "n_train", "f", "dropout", "params", "accuracy", "precision", "recall", "val_trimmed")


def write_sweep_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], int) else _num(r[c]) for c in SWEEP_COLUMNS])
    return Path(path)


def write_matrix_csv(matrix, path):
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), delimiter=",", fmt="%.10g")
    return Path(path)


def write_embeddings_csv(features, labels, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"e{i}" for i in range(features.shape[1])] + ["label"])
        for row, lab in zip(features, labels):
            w.writerow([f"{v:.8g}" for v in row] + [int(lab)])
    return Path(path)


def manifest_path_for(output):
    output = Path(output)
    return output / "manifest.json" if output.is_dir() else output.with_name(output.name + ".manifest.json")


def write_run_manifest(output, command, config, seed, outputs, started, wall_time_s=None):
    """One manifest per artifact-producing command, next to its primary output."""
    record = {
        "command": command,
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "wall_time_s": wall_time_s,
        "outputs": [str(p) for p in outputs],
    }
    return write_json(record, manifest_path_for(output))
