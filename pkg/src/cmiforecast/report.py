"""Text and JSON renderings of evaluation results.

Numbers are rounded once (accuracy and gap to 2 decimals, MCC to 4) and the
same rounded values go into both files.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping

from .downstream import EvalReport

DECIMALS = {"accuracy": 2, "train_accuracy": 2, "gap": 2, "generalization_gap": 2, "mcc": 4,
            "final_loss": 5, "accuracy_mean": 2, "accuracy_std": 2, "mcc_mean": 4, "mcc_std": 4,
            "gap_mean": 2}


def _round(key: str, value):
    if value is None or key not in DECIMALS:
        return value
    return round(float(value), DECIMALS[key])


def _fmt(key: str, value) -> str:
    if value is None:
        return "undefined"
    if key in DECIMALS:
        return f"{float(value):.{DECIMALS[key]}f}"
    return str(value)


def normalize_row(row) -> dict:
    if isinstance(row, EvalReport):
        row = row.to_dict()
    return {k: _round(k, v) for k, v in row.items()}


def format_kv(row) -> str:
    """``key = value`` lines, one per field."""
    row = normalize_row(row)
    width = max(len(k) for k in row)
    return "\n".join(f"{k.ljust(width)} = {_fmt(k, v)}" for k, v in row.items()) + "\n"


def format_table(rows: Iterable[Mapping], columns: list[str] | None = None) -> str:
    rows = [normalize_row(r) for r in rows]
    if not rows:
        return ""
    columns = columns or list(rows[0])
    cells = [[_fmt(c, r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    numeric = [all(_is_number(row[i]) for row in cells) for i in range(len(columns))]

    def line(values):
        return "  ".join(v.rjust(w) if num else v.ljust(w) for v, w, num in zip(values, widths, numeric)).rstrip()
    out = [line(columns), "  ".join("-" * w for w in widths)]
    out += [line(row) for row in cells]
    return "\n".join(out) + "\n"


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return text == "undefined"
    return True


def write_report(reports, path, columns: list[str] | None = None) -> tuple[Path, Path]:
    """Write ``<path>.txt`` (aligned table, or key/value for one report) and ``<path>.json``."""
    rows = [normalize_row(r) for r in reports]
    if not rows:
        raise ValueError("write_report needs at least one report")
    base = Path(path)
    if base.suffix in (".txt", ".json"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    # append rather than swap, so "run.eval" becomes "run.eval.txt"
    txt, js = base.with_name(base.name + ".txt"), base.with_name(base.name + ".json")
    text = format_kv(rows[0]) if len(rows) == 1 and columns is None else format_table(rows, columns)
    txt.write_text(text)
    js.write_text(json.dumps(rows if len(rows) > 1 else rows[0], indent=2, sort_keys=False) + "\n")
    return txt, js


def summarize(rows: list[Mapping]) -> list[dict]:
    """Mean and spread over seeds for each variant, in first-seen order."""
    import numpy as np

    groups: dict[str, list[Mapping]] = {}
    for r in rows:
        groups.setdefault(r["variant"], []).append(r)
    out = []
    for name, rs in groups.items():
        acc = [r["accuracy"] for r in rs if r.get("accuracy") is not None]
        mcc = [r["mcc"] for r in rs if r.get("mcc") is not None]
        gap = [r["gap"] for r in rs if r.get("gap") is not None]
        out.append({
            "variant": name, "seeds": len(rs),
            "accuracy_mean": float(np.mean(acc)) if acc else None,
            "accuracy_std": float(np.std(acc)) if acc else None,
            "mcc_mean": float(np.mean(mcc)) if mcc else None,
            "mcc_std": float(np.std(mcc)) if mcc else None,
            "gap_mean": float(np.mean(gap)) if gap else None,
        })
    return out
