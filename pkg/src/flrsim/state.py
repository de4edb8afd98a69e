"""Per-example pseudo-label state and the coefficient schedules."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, StateError


@dataclass
class ScheduleParams:
    """FLR coefficients and their round schedules.

    ``warmup_rounds`` is both the CE-only phase length and the round at which
    gamma switches on, unless ``gamma_start`` overrides the latter.
    ``alpha_schedule`` is ``"linear"`` (alpha * r / R) or ``"constant"``.
    """

    alpha: float = 0.9
    beta: float = 0.7
    gamma: float = 0.5
    lam: float = 2.0
    rounds: int = 300
    warmup_rounds: int = 50
    alpha_schedule: str = "linear"
    gamma_start: Optional[int] = None

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"schedule.{name} must lie in [0, 1], got {v}")
        if self.lam < 0:
            raise ConfigurationError(f"schedule.lam must be >= 0, got {self.lam}")
        if self.rounds < 1:
            raise ConfigurationError("schedule.rounds must be >= 1")
        if not 0 <= self.warmup_rounds <= self.rounds:
            raise ConfigurationError("schedule.warmup_rounds must lie in [0, rounds]")
        if self.alpha_schedule not in ("linear", "constant"):
            raise ConfigurationError("schedule.alpha_schedule must be linear or constant")
        if self.gamma_start is not None and self.gamma_start < 0:
            raise ConfigurationError("schedule.gamma_start must be >= 0")


def alpha_at(r: int, sp: ScheduleParams) -> float:
    if sp.alpha_schedule == "constant":
        return sp.alpha
    return sp.alpha * r / sp.rounds


def beta_at(r: int, sp: ScheduleParams) -> float:
    return 0.0 if r < sp.rounds / 2 else sp.beta


def gamma_at(r: int, sp: ScheduleParams) -> float:
    start = sp.warmup_rounds if sp.gamma_start is None else sp.gamma_start
    return 0.0 if r < start else sp.gamma


def mix(s: np.ndarray, m: np.ndarray, alpha: float) -> np.ndarray:
    """Pseudo-label target ``alpha * s + (1 - alpha) * m``."""
    if s is None or m is None:
        raise StateError("mix requires initialized global and local averages")
    return alpha * s + (1.0 - alpha) * m


class PseudoLabelStore:
    """Running averages ``s`` (server predictions) and ``m`` (local predictions).

    One store per client, indexed by example id. Rows start uninitialized and
    are set to the first prediction they receive.
    """

    def __init__(self, example_ids: np.ndarray, n_classes: int):
        self.example_ids = np.asarray(example_ids, dtype=np.int64)
        self.n_classes = n_classes
        self._row = {int(e): i for i, e in enumerate(self.example_ids)}
        n = self.example_ids.size
        self.s = np.zeros((n, n_classes))
        self.m = np.zeros((n, n_classes))
        self.s_init = np.zeros(n, dtype=bool)
        self.m_init = np.zeros(n, dtype=bool)

    def rows(self, example_ids) -> np.ndarray:
        try:
            return np.array([self._row[int(e)] for e in np.atleast_1d(example_ids)], dtype=np.int64)
        except KeyError as exc:
            raise StateError(f"example {exc.args[0]} is not held by this store") from None

    @staticmethod
    def _ema(cur, fresh, init, coef):
        upd = coef * cur + (1.0 - coef) * fresh
        return np.where(init[:, None], upd, fresh)

    def update_global_avg(self, example_ids, p_server: np.ndarray, beta: float) -> np.ndarray:
        idx = self.rows(example_ids)
        p_server = np.atleast_2d(p_server)
        new = self._ema(self.s[idx], p_server, self.s_init[idx], beta)
        self.s[idx] = new
        self.s_init[idx] = True
        return new

    def update_local_avg(self, example_ids, p: np.ndarray, gamma: float) -> np.ndarray:
        idx = self.rows(example_ids)
        p = np.atleast_2d(p)
        new = self._ema(self.m[idx], p, self.m_init[idx], gamma)
        self.m[idx] = new
        self.m_init[idx] = True
        return new

    def get(self, example_ids):
        """``(s, m)`` rows; raises if any requested row is uninitialized."""
        idx = self.rows(example_ids)
        if not (self.s_init[idx].all() and self.m_init[idx].all()):
            raise StateError("pseudo-label state read before initialization")
        return self.s[idx], self.m[idx]

    def target(self, example_ids, alpha: float) -> np.ndarray:
        s, m = self.get(example_ids)
        return mix(s, m, alpha)

    def copy(self) -> "PseudoLabelStore":
        out = PseudoLabelStore(self.example_ids, self.n_classes)
        out.s, out.m = self.s.copy(), self.m.copy()
        out.s_init, out.m_init = self.s_init.copy(), self.m_init.copy()
        return out

    def equals(self, other: "PseudoLabelStore") -> bool:
        return (
            np.array_equal(self.example_ids, other.example_ids)
            and np.array_equal(self.s_init, other.s_init)
            and np.array_equal(self.m_init, other.m_init)
            and self.s.tobytes() == other.s.tobytes()
            and self.m.tobytes() == other.m.tobytes()
        )

    def save(self, path: Path) -> None:
        """CSV snapshot ``example_id, s_0..s_{C-1}, m_0..m_{C-1}``; blank cells mean uninitialized."""
        C = self.n_classes
        header = ["example_id"] + [f"s_{c}" for c in range(C)] + [f"m_{c}" for c in range(C)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i, eid in enumerate(self.example_ids):
                s = [repr(float(v)) for v in self.s[i]] if self.s_init[i] else [""] * C
                m = [repr(float(v)) for v in self.m[i]] if self.m_init[i] else [""] * C
                w.writerow([int(eid)] + s + m)

    @classmethod
    def load(cls, path: Path) -> "PseudoLabelStore":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        C = (len(header) - 1) // 2
        store = cls(np.array([int(r[0]) for r in rows], dtype=np.int64), C)
        for i, r in enumerate(rows):
            if r[1] != "":
                store.s[i] = [float(v) for v in r[1 : 1 + C]]
                store.s_init[i] = True
            if r[1 + C] != "":
                store.m[i] = [float(v) for v in r[1 + C :]]
                store.m_init[i] = True
        return store
