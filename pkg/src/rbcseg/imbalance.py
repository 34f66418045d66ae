"""Class-imbalance statistics for training a cell classifier on per-cell crops."""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class WeightScheme(str, enum.Enum):
    uniform = "uniform"
    inverse = "inverse"
    inverse_sqrt = "inverse_sqrt"
    inverse_cbrt = "inverse_cbrt"


_ROOT = {
    WeightScheme.inverse: float,
    WeightScheme.inverse_sqrt: math.sqrt,
    WeightScheme.inverse_cbrt: lambda f: float(np.cbrt(f)),
}


@dataclass(frozen=True)
class ClassDistribution:
    classes: tuple[tuple[str, int], ...]

    def __post_init__(self):
        classes = tuple((str(n), int(c)) for n, c in self.classes)
        object.__setattr__(self, "classes", classes)
        if not classes:
            raise ValueError("distribution needs at least one class")
        names = [n for n, _ in classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if any(c < 0 for _, c in classes):
            raise ValueError("counts must be non-negative")
        if not any(c > 0 for _, c in classes):
            raise ValueError("at least one count must be positive")

    @classmethod
    def from_mapping(cls, counts: dict) -> "ClassDistribution":
        return cls(tuple(counts.items()))

    @classmethod
    def from_csv(cls, source) -> "ClassDistribution":
        """Read ``class,count`` rows; ``source`` is a path or CSV text."""
        if isinstance(source, Path) or "\n" not in str(source):
            text = Path(source).read_text()
        else:
            text = source
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["class", "count"]:
            raise ValueError("expected header 'class,count'")
        return cls(tuple((row["class"].strip(), int(row["count"])) for row in reader))

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.classes]

    def count(self, name: str) -> int:
        for n, c in self.classes:
            if n == name:
                return c
        raise KeyError(f"unknown class {name!r}")

    @property
    def total(self) -> int:
        return sum(c for _, c in self.classes)


def class_weights(d: ClassDistribution, scheme: WeightScheme | str = WeightScheme.inverse) -> dict[str, float]:
    """Raw per-class loss weights: 1, 1/f, 1/sqrt(f) or 1/cbrt(f). Not renormalized."""
    scheme = WeightScheme(scheme)
    if scheme is WeightScheme.uniform:
        return {n: 1.0 for n in d.names}
    root = _ROOT[scheme]
    out = {}
    for n, c in d.classes:
        if c <= 0:
            raise ValueError(f"class {n!r} has zero samples; cannot weight by {scheme.value}")
        out[n] = 1.0 / root(c)
    return out


def focal_loss(p_t, gamma: float = 2.0):
    """-(1 - p_t)**gamma * ln(p_t); works elementwise on arrays."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = np.asarray(p_t, dtype=float)
    if np.any(~(p > 0)) or np.any(p > 1):
        raise ValueError("p_t must lie in (0, 1]")
    loss = -((1.0 - p) ** gamma) * np.log(p)
    loss = loss + 0.0  # turn -0.0 at p_t = 1 into 0.0
    return float(loss) if loss.ndim == 0 else loss


def imbalance_ratio(d: ClassDistribution) -> float:
    """Majority count over minority count."""
    counts = [c for _, c in d.classes]
    if min(counts) <= 0:
        raise ValueError("minority class has zero samples")
    return max(counts) / min(counts)


@dataclass(frozen=True)
class UpsamplePlan:
    target: int
    entries: tuple[tuple[str, int, int, int], ...]  # (name, count, copies, remainder)

    def as_dict(self) -> dict:
        return {n: {"count": f, "copies": k, "remainder": r, "total": k * f + r}
                for n, f, k, r in self.entries}

    def indices(self, name: str, seed: int | None = None) -> np.ndarray:
        """Sample indices realising the plan for one class.

        Full copies come first; the remainder takes the first ``remainder``
        items in dataset order, or a seeded random subset when ``seed`` is given.
        """
        for n, f, k, r in self.entries:
            if n == name:
                base = np.tile(np.arange(f), k)
                if seed is None:
                    extra = np.arange(r)
                else:
                    extra = np.sort(np.random.default_rng(seed).choice(f, size=r, replace=False))
                return np.concatenate([base, extra])
        raise KeyError(f"unknown class {name!r}")


def upsample_plan(d: ClassDistribution, target_class: str) -> UpsamplePlan:
    """Replicate every class up to the size of ``target_class``."""
    target = d.count(target_class)
    entries = []
    for n, f in d.classes:
        if f <= 0:
            raise ValueError(f"class {n!r} has zero samples; cannot upsample")
        copies, remainder = divmod(target, f)
        if copies < 1:
            raise ValueError(f"class {n!r} ({f}) is larger than the target class ({target})")
        entries.append((n, f, copies, remainder))
    return UpsamplePlan(target, tuple(entries))


def summary_json(d: ClassDistribution, target_class: str | None = None) -> str:
    doc = {
        "counts": dict(d.classes),
        "imbalance_ratio": imbalance_ratio(d),
        "weights": {s.value: class_weights(d, s) for s in WeightScheme},
    }
    if target_class is not None:
        doc["upsample"] = upsample_plan(d, target_class).as_dict()
    return json.dumps(doc, indent=2)
