"""Quantitative evaluation of a trained generator on held-out glyphs."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import ndgrad
from .glyphdata import ValidationError, as_view, stack_batch
from .ndgrad import ShapeError

EVAL_BATCH = 16

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["count", "aggregate", "rows"],
    "additionalProperties": False,
    "properties": {
        "count": {"type": "integer", "minimum": 1},
        "aggregate": {
            "type": "object",
            "required": ["l1", "rmse"],
            "additionalProperties": False,
            "properties": {
                "l1": {"$ref": "#/$defs/stats"},
                "rmse": {"$ref": "#/$defs/stats"},
            },
        },
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["codepoint", "l1", "rmse"],
                "additionalProperties": False,
                "properties": {
                    "codepoint": {"type": "string", "pattern": "^U\\+[0-9A-F]{4,6}$"},
                    "l1": {"type": "number", "minimum": 0, "maximum": 2},
                    "rmse": {"type": "number", "minimum": 0, "maximum": 2},
                },
            },
        },
    },
    "$defs": {
        "stats": {
            "type": "object",
            "required": ["mean", "median", "worst"],
            "additionalProperties": False,
            "properties": {
                "mean": {"type": "number"},
                "median": {"type": "number"},
                "worst": {"type": "number"},
            },
        }
    },
}


def pixel_metrics(generated, target):
    """Mean absolute difference and RMSE between two same-shape tensors."""
    if generated.shape != target.shape:
        raise ShapeError(f"pixel_metrics: shapes {generated.shape} and {target.shape} differ")
    diff = np.asarray(generated.data, dtype=np.float64) - np.asarray(target.data, dtype=np.float64)
    return {
        "l1": float(np.mean(np.abs(diff))),
        "rmse": float(np.sqrt(np.mean(diff * diff))),
    }


@dataclass
class EvalReport:
    rows: list  # (codepoint, l1, rmse), sorted by descending l1
    count: int

    def _column(self, idx):
        return [r[idx] for r in self.rows]

    def aggregate(self):
        out = {}
        for name, idx in (("l1", 1), ("rmse", 2)):
            vals = np.array(self._column(idx), dtype=np.float64)
            out[name] = {
                "mean": float(vals.mean()),
                "median": float(np.median(vals)),
                "worst": float(vals.max()),
            }
        return out

    def mean_l1(self):
        return self.aggregate()["l1"]["mean"]

    def to_json_dict(self):
        return {
            "count": self.count,
            "aggregate": self.aggregate(),
            "rows": [
                {"codepoint": f"U+{cp:04X}", "l1": l1, "rmse": rmse}
                for cp, l1, rmse in self.rows
            ],
        }

    def to_tsv(self):
        lines = ["codepoint\tl1\trmse"]
        for cp, l1, rmse in self.rows:
            lines.append(f"U+{cp:04X}\t{l1:.10g}\t{rmse:.10g}")
        return "\n".join(lines) + "\n"


def evaluate(state, holdout):
    """Score eval-mode generations against targets, worst glyphs first."""
    view = as_view(holdout)
    if len(view) == 0:
        raise ValidationError("cannot evaluate an empty holdout view")
    rows = []
    for start in range(0, len(view), EVAL_BATCH):
        idx = range(start, min(start + EVAL_BATCH, len(view)))
        samples = [view.sample(i) for i in idx]
        src, tgt = stack_batch(samples)
        with ndgrad.no_grad():
            out, _ = state.generator.generate(src, "eval")
        for j, s in enumerate(samples):
            diff = out.data[j].astype(np.float64) - tgt.data[j].astype(np.float64)
            rows.append(
                (
                    s.codepoint,
                    float(np.mean(np.abs(diff))),
                    float(np.sqrt(np.mean(diff * diff))),
                )
            )
    rows.sort(key=lambda r: (-r[1], r[0]))
    return EvalReport(rows, len(rows))


def write_eval_report(report, tsv_path, json_path):
    with open(tsv_path, "w") as fh:
        fh.write(report.to_tsv())
    with open(json_path, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
