"""Collect a run's metric logs and evaluation outputs into one JSON summary plus plot-ready CSVs.

Output is a pure function of the inputs: keys are sorted, floats are written
with ``repr`` and missing results appear as explicit ``null`` values, so
re-running the report on the same inputs produces identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
from pathlib import Path
from typing import Any

from . import __version__
from .errors import DataError
from .trainer import EPOCH_FIELDS, METRIC_FIELDS

SCHEMA_VERSION = 1
RECALL_KEYS = ("R@1", "R@5", "R@10", "R@20")
EVAL_FILES = ("probe", "retrieval", "fewshot", "nnquality", "cooccur")

# Curve name -> (source log, columns).
CURVES = {
    "loss_curve": ("metrics", ("step", "loss_total", "loss_intra", "loss_nn")),
    "schedule_curve": ("metrics", ("step", "lr", "m")),
    "queue_curve": ("metrics", ("step", "qintra_len", "qnn_len")),
    "nn_pick_curve": ("metrics", ("step", "nn_same_class_frac")),
    "epoch_curve": ("epochs", EPOCH_FIELDS),
}


def version_string(repo: str | Path | None = None) -> str:
    """``git describe``-style version; falls back to ``v<package version>`` outside a work tree."""
    cwd = Path(repo) if repo is not None else Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=cwd, capture_output=True, text=True, timeout=10, check=True,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        out = ""
    return f"v{__version__}-g{out}" if out and not out.startswith("v") else (out or f"v{__version__}")


# ---------------------------------------------------------------------------
# parsing


def _cell(raw: str, name: str, line: int) -> float | int | None:
    if raw == "":
        return None
    try:
        if name in ("step", "epoch", "qintra_len", "qnn_len"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise DataError(f"bad value {raw!r} in column {name!r}", line=line) from None


def read_log(path: str | Path, expected: tuple[str, ...]) -> list[dict]:
    """Parse a metrics/epochs CSV, checking the header and every cell."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise DataError(f"{path} is empty", line=1)
    if tuple(rows[0]) != expected:
        raise DataError(f"{path.name}: expected header {','.join(expected)}", line=1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(expected):
            raise DataError(f"{path.name}: expected {len(expected)} fields, got {len(row)}", line=lineno)
        out.append({name: _cell(raw, name, lineno) for name, raw in zip(expected, row)})
    return out


def read_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path.name}: {exc.msg}", line=exc.lineno) from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return path


def _clean(value: Any) -> Any:
    # NaN/inf are not valid JSON; report them as null.
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# summary


def _get(payload: dict | None, key: str) -> Any:
    return None if payload is None else payload.get(key)


def summarize(metrics: list[dict], epochs: list[dict], evals: dict[str, dict | None],
              config_hash: str | None, version: str) -> dict:
    first = epochs[0] if epochs else None
    last = epochs[-1] if epochs else None
    probe, retrieval = evals.get("probe"), evals.get("retrieval")
    fewshot, nnq, cooc = evals.get("fewshot"), evals.get("nnquality"), evals.get("cooccur")
    return {
        "schema_version": SCHEMA_VERSION,
        "version": version,
        "config_hash": config_hash,
        "pretrain": {
            "steps": metrics[-1]["step"] + 1 if metrics else None,
            "epochs": last["epoch"] if last else None,
            "first_epoch_loss_total": _get(first, "loss_total"),
            "final_epoch_loss_total": _get(last, "loss_total"),
            "first_epoch_nn_same_class_frac": _get(first, "nn_same_class_frac"),
            "final_epoch_nn_same_class_frac": _get(last, "nn_same_class_frac"),
            "first_epoch_nn_top5_same_class": _get(first, "nn_top5_same_class"),
            "final_epoch_nn_top5_same_class": _get(last, "nn_top5_same_class"),
            "all_losses_finite": all(math.isfinite(r["loss_total"]) for r in metrics) if metrics else None,
        },
        "probe": {"top1": _get(probe, "top1"), "untrained_top1": _get(probe, "untrained_top1")},
        "retrieval": {k: _get(_get(retrieval, "recall"), k) for k in RECALL_KEYS},
        "fewshot": _get(fewshot, "mean_top1"),
        "nn_quality": _get(nnq, "top5_same_class"),
        "cooccurrence": {"n_classes": _get(cooc, "n_classes"), "queue_size": _get(cooc, "queue_size"),
                         "probability": _get(cooc, "probability")},
    }


def _write_curve(path: Path, columns: tuple[str, ...], rows: list[dict]) -> None:
    def fmt(v):
        return "" if v is None else repr(v) if isinstance(v, float) else str(v)

    lines = [",".join(columns)] + [",".join(fmt(r.get(c)) for c in columns) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_report(run_dir: str | Path | None, eval_dir: str | Path | None, out_dir: str | Path,
                 config_hash: str | None, version: str | None = None) -> dict:
    """Read ``metrics.csv``/``epochs.csv`` from ``run_dir`` and ``<name>.json`` eval outputs
    from ``eval_dir``; write ``summary.json`` and one CSV per curve to ``out_dir``.
    Missing inputs are tolerated and become nulls.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []
    epochs: list[dict] = []
    if run_dir is not None:
        run = Path(run_dir)
        if (run / "metrics.csv").exists():
            metrics = read_log(run / "metrics.csv", METRIC_FIELDS)
        if (run / "epochs.csv").exists():
            epochs = read_log(run / "epochs.csv", EPOCH_FIELDS)
    evals: dict[str, dict | None] = {}
    for name in EVAL_FILES:
        path = Path(eval_dir) / f"{name}.json" if eval_dir is not None else None
        evals[name] = read_json(path) if path is not None and path.exists() else None
    summary = summarize(metrics, epochs, evals, config_hash, version or version_string())
    write_json(out / "summary.json", summary)
    sources = {"metrics": metrics, "epochs": epochs}
    for name, (source, columns) in CURVES.items():
        _write_curve(out / f"{name}.csv", columns, sources[source])
    return summary
