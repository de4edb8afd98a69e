"""Memorization taxonomy, test accuracy and the per-round metrics stream."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .data import ClientShard, Dataset
from .model import ModelParams, predict

CLEAN_CORRECT = "clean_correct"
CLEAN_WRONG = "clean_wrong"
NOISY_CORRECT = "noisy_correct"
NOISY_WRONG = "noisy_wrong"
NOISY_MEMORIZED = "noisy_memorized"
CATEGORIES = (CLEAN_CORRECT, CLEAN_WRONG, NOISY_CORRECT, NOISY_WRONG, NOISY_MEMORIZED)

CSV_HEADER = ["round", "phase", "scope", *CATEGORIES, "test_acc", "train_loss"]


def classify_example(pred: int, given: int, true: int) -> str:
    if given == true:
        return CLEAN_CORRECT if pred == true else CLEAN_WRONG
    if pred == true:
        return NOISY_CORRECT
    if pred == given:
        return NOISY_MEMORIZED
    return NOISY_WRONG


@dataclass
class MemorizationBreakdown:
    """Category fractions. Clean fractions share one denominator, noisy ones another.

    A fraction is NaN when its group is empty.
    """

    clean_correct: float
    clean_wrong: float
    noisy_correct: float
    noisy_wrong: float
    noisy_memorized: float
    scope: str = "global"
    round: int = -1

    def values(self) -> np.ndarray:
        return np.array([getattr(self, c) for c in CATEGORIES])


def category_counts(pred: np.ndarray, given: np.ndarray, true: np.ndarray) -> Dict[str, int]:
    clean = given == true
    noisy = ~clean
    return {
        CLEAN_CORRECT: int(np.sum(clean & (pred == true))),
        CLEAN_WRONG: int(np.sum(clean & (pred != true))),
        NOISY_CORRECT: int(np.sum(noisy & (pred == true))),
        NOISY_MEMORIZED: int(np.sum(noisy & (pred == given))),
        NOISY_WRONG: int(np.sum(noisy & (pred != true) & (pred != given))),
    }


def _fractions(counts: Dict[str, int]) -> Dict[str, float]:
    n_clean = counts[CLEAN_CORRECT] + counts[CLEAN_WRONG]
    n_noisy = counts[NOISY_CORRECT] + counts[NOISY_WRONG] + counts[NOISY_MEMORIZED]
    out = {}
    for c in CATEGORIES:
        denom = n_clean if c.startswith("clean") else n_noisy
        out[c] = counts[c] / denom if denom else float("nan")
    return out


def breakdown_from_predictions(pred, given, true, scope="global", round_=-1) -> MemorizationBreakdown:
    return MemorizationBreakdown(**_fractions(category_counts(pred, given, true)), scope=scope, round=round_)


def global_breakdown(server_params: ModelParams, shards: Sequence[ClientShard], round_: int = -1) -> MemorizationBreakdown:
    """Server-model predictions over every client's training data, pooled."""
    total = dict.fromkeys(CATEGORIES, 0)
    for shard in sorted(shards, key=lambda s: s.client_id):
        pred = predict(server_params, shard.data.features)
        for c, v in category_counts(pred, shard.data.given, shard.data.true).items():
            total[c] += v
    return MemorizationBreakdown(**_fractions(total), scope="global", round=round_)


def local_breakdown(
    local_params: Dict[int, ModelParams],
    shards: Dict[int, ClientShard],
    round_: int = -1,
    weighting: str = "unweighted",
) -> Optional[MemorizationBreakdown]:
    """Average of per-client breakdowns over participating noisy clients.

    ``local_params`` maps client id to that client's freshly updated model.
    Returns None when no noisy client participated. ``weighting="size"``
    weights clients by ``n_k`` instead of uniformly.
    """
    per_client, weights = [], []
    for k in sorted(local_params):
        shard = shards[k]
        if not shard.is_noisy:
            continue
        pred = predict(local_params[k], shard.data.features)
        per_client.append(breakdown_from_predictions(pred, shard.data.given, shard.data.true).values())
        weights.append(float(shard.n) if weighting == "size" else 1.0)
    if not per_client:
        return None
    vals = np.array(per_client)
    w = np.array(weights)
    avg = []
    for j in range(vals.shape[1]):
        ok = ~np.isnan(vals[:, j])
        avg.append(float(np.sum(w[ok] * vals[ok, j]) / np.sum(w[ok])) if ok.any() else float("nan"))
    return MemorizationBreakdown(*avg, scope="local", round=round_)


def test_accuracy(server_params: ModelParams, test: Dataset) -> float:
    return float(np.mean(predict(server_params, test.features) == test.true))


test_accuracy.__test__ = False  # keep pytest from collecting it


@dataclass
class RoundMetrics:
    round: int
    phase: str
    global_: MemorizationBreakdown
    local: Optional[MemorizationBreakdown]
    test_acc: float
    train_loss: float

    def rows(self) -> List[List[str]]:
        out = []
        for b in (self.global_, self.local):
            if b is None:
                continue
            out.append(
                [str(self.round), self.phase, b.scope]
                + [f"{v:.6f}" for v in b.values()]
                + [f"{self.test_acc:.6f}", f"{self.train_loss:.6f}"]
            )
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RoundMetrics":
        loc = d["local"]
        return cls(
            d["round"],
            d["phase"],
            MemorizationBreakdown(**d["global_"]),
            MemorizationBreakdown(**loc) if loc is not None else None,
            d["test_acc"],
            d["train_loss"],
        )


class MetricsWriter:
    """Streams RoundMetrics to CSV, one row per (round, scope)."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(CSV_HEADER)

    def write(self, rm: RoundMetrics) -> None:
        self._w.writerows(rm.rows())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics_csv(path: Path, metrics: Iterable[RoundMetrics]) -> None:
    with MetricsWriter(path) as w:
        for rm in metrics:
            w.write(rm)


def read_metrics_csv(path: Path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["round"] = int(r["round"])
        for key in CSV_HEADER[3:]:
            r[key] = float(r[key])
    return rows
