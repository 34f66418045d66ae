"""Separation accuracy by clump size, with error attribution."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

BUCKETS = ("2", "3", ">3")
LABELS = {"2": "2 RBCs", "3": "3 RBCs", ">3": ">3 RBCs"}


@dataclass(frozen=True)
class ContourPrediction:
    n_cells: int
    n_concave: int


@dataclass(frozen=True)
class ContourTruth:
    count: int
    intersections: int | None = None


@dataclass
class BucketStats:
    correct: int = 0
    incorrect_concave: int = 0
    incorrect_fitting: int = 0
    unattributed: int = 0

    @property
    def total(self) -> int:
        return self.correct + self.incorrect_concave + self.incorrect_fitting + self.unattributed

    def add(self, other: "BucketStats") -> None:
        self.correct += other.correct
        self.incorrect_concave += other.incorrect_concave
        self.incorrect_fitting += other.incorrect_fitting
        self.unattributed += other.unattributed


@dataclass
class EvalReport:
    buckets: dict[str, BucketStats] = field(default_factory=lambda: {b: BucketStats() for b in BUCKETS})
    single_cell_contours: int = 0

    @property
    def overall(self) -> BucketStats:
        tot = BucketStats()
        for b in BUCKETS:
            tot.add(self.buckets[b])
        return tot

    @property
    def accuracy(self) -> float:
        tot = self.overall
        return tot.correct / tot.total if tot.total else 0.0

    def to_dict(self) -> dict:
        def row(s: BucketStats) -> dict:
            return {"correct": s.correct, "incorrect_concave": s.incorrect_concave,
                    "incorrect_fitting": s.incorrect_fitting, "unattributed": s.unattributed,
                    "total": s.total}
        return {
            "buckets": {b: row(self.buckets[b]) for b in BUCKETS},
            "overall": row(self.overall),
            "accuracy": self.accuracy,
            "single_cell_contours": self.single_cell_contours,
        }

    def to_table(self) -> str:
        """Fixed-width text table, one row per clump size plus totals."""
        show_un = self.overall.unattributed > 0
        head = ["Contour", "Correct", "Incorrect (Concave)", "Incorrect (Fitting)"]
        if show_un:
            head.append("Unattributed")
        head.append("Total")
        rows = []
        for name, s in [(LABELS[b], self.buckets[b]) for b in BUCKETS] + [("Total", self.overall)]:
            cells = [name, s.correct, s.incorrect_concave, s.incorrect_fitting]
            if show_un:
                cells.append(s.unattributed)
            cells.append(s.total)
            rows.append([str(c) for c in cells])
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]

        def fmt(r):
            return "  ".join(c.ljust(widths[i]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r))

        rule = "-" * len(fmt(head))
        lines = [fmt(head), rule] + [fmt(r) for r in rows[:-1]] + [rule, fmt(rows[-1]), rule]
        lines.append(f"Overall accuracy: {self.accuracy:.3f}")
        return "\n".join(lines) + "\n"


def bucket_of(count: int) -> str | None:
    if count < 2:
        return None
    return str(count) if count <= 3 else ">3"


def eval_separation(predictions: Mapping, truth: Mapping) -> EvalReport:
    """Tally per-contour count accuracy into 2 / 3 / >3 cell buckets.

    Both mappings are keyed by ``(image, contour_id)``. A miscount is blamed
    on concave points when the detected concave-point count differs from the
    true number of boundary intersections, otherwise on fitting; without
    intersection truth it stays unattributed. Contours with fewer than two
    true cells are not bucketed.
    """
    missing_truth = sorted(set(predictions) - set(truth))
    missing_pred = sorted(set(truth) - set(predictions))
    if missing_truth or missing_pred:
        raise KeyError(f"orphan contours: no truth for {missing_truth}, no prediction for {missing_pred}")
    rep = EvalReport()
    for key in sorted(truth):
        t = truth[key]
        p = predictions[key]
        b = bucket_of(t.count)
        if b is None:
            rep.single_cell_contours += 1
            continue
        s = rep.buckets[b]
        if p.n_cells == t.count:
            s.correct += 1
        elif t.intersections is None:
            s.unattributed += 1
        elif p.n_concave != t.intersections:
            s.incorrect_concave += 1
        else:
            s.incorrect_fitting += 1
    return rep


def read_truth_csv(path) -> dict:
    """``image,contour_id,true_count`` rows, optional ``true_intersections``."""
    out = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        need = {"image", "contour_id", "true_count"}
        if rd.fieldnames is None or not need <= set(rd.fieldnames):
            raise ValueError(f"{path}: header must contain {sorted(need)}")
        for row in rd:
            inter = row.get("true_intersections")
            key = (row["image"], int(row["contour_id"]))
            if key in out:
                raise ValueError(f"{path}: duplicate row for {key}")
            out[key] = ContourTruth(int(row["true_count"]), int(inter) if inter not in (None, "") else None)
    return out


def write_truth_csv(path, truth: Mapping) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["image", "contour_id", "true_count", "true_intersections"])
        for (image, cid) in sorted(truth):
            t = truth[(image, cid)]
            wr.writerow([image, cid, t.count, "" if t.intersections is None else t.intersections])


def read_predictions(folder) -> dict:
    """Per-contour predictions from a folder of annotation JSON files."""
    out = {}
    for path in sorted(Path(folder).glob("*.json")):
        doc = json.loads(path.read_text())
        if "contours" not in doc or "image" not in doc:
            continue
        for c in doc["contours"]:
            out[(doc["image"], int(c["id"]))] = ContourPrediction(int(c["n_cells"]), int(c["n_concave"]))
    return out
