"""Evaluation metrics, attention-weight dumps, and prediction-map emission."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from .bags import TractBag
from .errors import DataError
from .geodata import TractBoundary
from .milcore import GatedAttentionModel, forward, sigmoid

logger = logging.getLogger(__name__)

__all__ = [
    "EvalReport",
    "AttentionRecord",
    "f1_score",
    "evaluate",
    "dump_attention",
    "write_attention_csv",
    "emit_prediction_map",
]


def f1_score(tp: int, fp: int, fn: int) -> float:
    """F1 = TP / (TP + (FP + FN) / 2), defined as 0 on a zero denominator."""
    denom = tp + 0.5 * (fp + fn)
    if denom == 0:
        return 0.0
    return tp / denom


@dataclass
class EvalReport:
    """Confusion counts plus accuracy and per-class / macro F1 for one partition."""

    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    f1_insecure: float
    f1_secure: float
    f1_average: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "EvalReport":
        total = tp + fp + fn + tn
        accuracy = (tp + tn) / total if total else 0.0
        f1_insecure = f1_score(tp, fp, fn)
        # class 0 as positive: its TP is tn, false positives are fn, misses are fp
        f1_secure = f1_score(tn, fn, fp)
        return cls(
            tp=tp,
            fp=fp,
            fn=fn,
            tn=tn,
            accuracy=accuracy,
            f1_insecure=f1_insecure,
            f1_secure=f1_secure,
            f1_average=0.5 * (f1_insecure + f1_secure),
        )

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "accuracy": self.accuracy,
            "f1_insecure": self.f1_insecure,
            "f1_secure": self.f1_secure,
            "f1_average": self.f1_average,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class AttentionRecord:
    """One image's attention weight inside its tract, with its rank (1 = highest)."""

    tract_id: str
    image_id: str
    weight: float
    rank: int


def bag_probability(model: GatedAttentionModel, bag: TractBag) -> float:
    """Predicted probability of food insecurity for one bag (dropout disabled)."""
    return float(sigmoid(forward(bag, model).logit))


def evaluate(model: GatedAttentionModel, bags: list[TractBag], threshold: float = 0.5) -> EvalReport:
    """Confusion counts and metrics over labeled bags; prediction is
    1 iff sigmoid(logit) >= threshold."""
    tp = fp = fn = tn = 0
    for bag in bags:
        if bag.label is None:
            raise DataError(f"tract {bag.tract_id} has no label; cannot evaluate")
        predicted = 1 if bag_probability(model, bag) >= threshold else 0
        if predicted == 1 and bag.label == 1:
            tp += 1
        elif predicted == 1 and bag.label == 0:
            fp += 1
        elif predicted == 0 and bag.label == 1:
            fn += 1
        else:
            tn += 1
    return EvalReport.from_counts(tp, fp, fn, tn)


def dump_attention(
    model: GatedAttentionModel, bags: list[TractBag], top_k: int | None = None
) -> list[AttentionRecord]:
    """Per-tract attention weights sorted descending; ties keep input order."""
    records: list[AttentionRecord] = []
    for bag in bags:
        weights = forward(bag, model).attention
        order = sorted(range(bag.size), key=lambda i: (-weights[i], i))
        for rank, idx in enumerate(order, start=1):
            if top_k is not None and rank > top_k:
                break
            records.append(
                AttentionRecord(
                    tract_id=bag.tract_id,
                    image_id=bag.instances[idx].image_id,
                    weight=float(weights[idx]),
                    rank=rank,
                )
            )
    return records


def write_attention_csv(records: list[AttentionRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tract_id", "image_id", "weight", "rank"])
        for rec in records:
            writer.writerow([rec.tract_id, rec.image_id, repr(rec.weight), rec.rank])


def emit_prediction_map(
    model: GatedAttentionModel,
    bags: list[TractBag],
    boundaries: list[TractBoundary],
    path,
    threshold: float = 0.5,
) -> dict:
    """Write a GeoJSON feature collection of per-tract predictions.

    Each feature copies its tract's boundary geometry and carries the predicted
    probability (rounded to 6 decimals), the thresholded class, the atlas label
    when known, and up to three top-attention image ids. Bags without a
    boundary are skipped with a warning.
    """
    by_id = {b.tract_id: b for b in boundaries}
    features = []
    skipped = 0
    for bag in bags:
        boundary = by_id.get(bag.tract_id)
        if boundary is None:
            skipped += 1
            logger.warning("tract %s has no boundary; skipped in prediction map", bag.tract_id)
            continue
        result = forward(bag, model)
        probability = float(sigmoid(result.logit))
        order = sorted(range(bag.size), key=lambda i: (-result.attention[i], i))
        top_ids = [bag.instances[i].image_id for i in order[:3]]
        features.append(
            {
                "type": "Feature",
                "geometry": boundary.geometry,
                "properties": {
                    "geoid": bag.tract_id,
                    "p_insecure": round(probability, 6),
                    "predicted": 1 if probability >= threshold else 0,
                    "label": bag.label,
                    "top_image_ids": top_ids,
                },
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return {"written": len(features), "skipped": skipped}
