"""Synthetic datasets, client partitioning and label-noise injection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError

MAX_RESAMPLE = 1000


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def seeded_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the stream ``key`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass
class Dataset:
    """Column-oriented collection of examples.

    ``given`` is the (possibly corrupted) label used for training, ``true``
    the hidden ground truth.
    """

    features: np.ndarray
    given: np.ndarray
    true: np.ndarray
    example_ids: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return int(self.example_ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            self.features[idx].copy(),
            self.given[idx].copy(),
            self.true[idx].copy(),
            self.example_ids[idx].copy(),
            self.n_classes,
        )

    def class_counts(self, labels: str = "true") -> np.ndarray:
        return np.bincount(getattr(self, labels), minlength=self.n_classes)


@dataclass
class ClientShard:
    client_id: int
    data: Dataset
    noise_rate: float = 0.0

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def is_noisy(self) -> bool:
        return self.noise_rate > 0.0


@dataclass
class PartitionSpec:
    mode: str = "iid"
    n_clients: int = 10
    p: float = 1.0
    alpha_dir: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("iid", "noniid"):
            raise ConfigurationError(f"partition.mode must be iid or noniid, got {self.mode!r}")
        if self.n_clients < 1:
            raise ConfigurationError("partition.n_clients must be >= 1")
        if self.mode == "noniid":
            if not 0.0 < self.p <= 1.0:
                raise ConfigurationError("partition.p must lie in (0, 1]")
            if not self.alpha_dir > 0.0:
                raise ConfigurationError("partition.alpha_dir must be > 0")


@dataclass
class NoiseSpec:
    kind: str = "symmetric"
    rho: float = 0.0
    tau: float = 0.0
    pair_map: Optional[Dict[int, int]] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("symmetric", "asymmetric"):
            raise ConfigurationError(f"noise.kind must be symmetric or asymmetric, got {self.kind!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError("noise.rho must lie in [0, 1]")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigurationError("noise.tau must lie in [0, 1)")


def cyclic_pair_map(n_classes: int, classes: Optional[Sequence[int]] = None) -> Dict[int, int]:
    """``c -> (c + 1) mod C`` for ``c`` in ``classes``; identity elsewhere."""
    active = set(range(n_classes) if classes is None else classes)
    return {c: (c + 1) % n_classes if c in active else c for c in range(n_classes)}


@dataclass
class CorruptionLog:
    n_classes: int
    entries: List[Tuple[int, int, int, int]] = field(default_factory=list)  # (example_id, old, new, client_id)
    selected: Dict[int, int] = field(default_factory=dict)  # client_id -> selected count

    def extend(self, other: "CorruptionLog") -> None:
        self.entries.extend(other.entries)
        self.selected.update(other.selected)

    def transition_matrix(self) -> np.ndarray:
        mat = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        for _, old, new, _ in self.entries:
            mat[old, new] += 1
        return mat


def generate_synthetic(
    n_classes: int,
    dim: int,
    n_per_class: int,
    spread: float,
    seed: int,
    split: str = "train",
    id_offset: int = 0,
) -> Dataset:
    """Isotropic unit-variance Gaussian clusters around random centers.

    Centers are unit vectors scaled by ``spread`` and depend only on ``seed``;
    ``split`` selects a disjoint sampling stream, so train and test share
    centers but not samples.
    """
    if n_classes < 2 or dim < 2:
        raise ConfigurationError("need at least 2 classes and 2 dimensions")
    if n_per_class < 1 or spread <= 0:
        raise ConfigurationError("n_per_class must be >= 1 and spread > 0")
    streams = {"train": 1, "test": 2}
    if split not in streams:
        raise ConfigurationError(f"unknown split {split!r}")
    centers = seeded_rng(seed, 0).standard_normal((n_classes, dim))
    centers *= spread / np.linalg.norm(centers, axis=1, keepdims=True)
    rng = seeded_rng(seed, streams[split])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = centers[labels] + rng.standard_normal((labels.size, dim))
    ids = np.arange(id_offset, id_offset + labels.size, dtype=np.int64)
    return Dataset(features, labels.copy(), labels.copy(), ids, n_classes)


def partition_iid(data: Dataset, n_clients: int, seed: int) -> List[ClientShard]:
    """Equal-size shards with equal per-class counts."""
    per_client: List[List[np.ndarray]] = [[] for _ in range(n_clients)]
    rng = seeded_rng(seed, 0)
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.true == c)
        if idx.size % n_clients:
            raise ConfigurationError(
                f"class {c} has {idx.size} examples, not divisible by {n_clients} clients"
            )
        idx = rng.permutation(idx)
        for k, chunk in enumerate(np.split(idx, n_clients)):
            per_client[k].append(chunk)
    return [ClientShard(k, data.subset(np.concatenate(parts))) for k, parts in enumerate(per_client)]


def _sample_presence(n_clients: int, n_classes: int, p: float, rng: np.random.Generator) -> np.ndarray:
    phi = rng.random((n_clients, n_classes)) < p
    for c in range(n_classes):
        tries = 0
        while not phi[:, c].any():
            tries += 1
            if tries > MAX_RESAMPLE:
                raise ConfigurationError(f"p={p} too small: class {c} has no eligible client")
            phi[:, c] = rng.random(n_clients) < p
    for k in range(n_clients):
        tries = 0
        while not phi[k].any():
            tries += 1
            if tries > MAX_RESAMPLE:
                raise ConfigurationError(f"p={p} too small: client {k} holds no class")
            phi[k] = rng.random(n_classes) < p
    return phi


def apportion(total: int, shares: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total``, each at least 1.

    Largest-remainder rounding of ``total * shares``; any zero count is lifted
    to 1 by taking from the currently largest count.
    """
    k = shares.size
    if total < k:
        raise ConfigurationError(f"cannot give {k} clients at least one of {total} samples")
    quota = total * shares / shares.sum()
    counts = np.floor(quota).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        # stable sort keeps ties at the lowest index
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:short]] += 1
    for i in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[i] = 1
    return counts


def partition_noniid(data: Dataset, spec: PartitionSpec) -> Tuple[List[ClientShard], np.ndarray]:
    """Bernoulli class presence plus Dirichlet split of each class.

    Returns the shards and the presence matrix ``phi`` (clients x classes).
    """
    if spec.mode != "noniid":
        raise ConfigurationError("partition_noniid requires mode='noniid'")
    n, C = spec.n_clients, data.n_classes
    rng = seeded_rng(spec.seed, 0)
    phi = _sample_presence(n, C, spec.p, rng)
    per_client: List[List[np.ndarray]] = [[] for _ in range(n)]
    for c in range(C):
        owners = np.flatnonzero(phi[:, c])
        idx = rng.permutation(np.flatnonzero(data.true == c))
        q = rng.dirichlet(np.full(owners.size, spec.alpha_dir))
        counts = apportion(idx.size, q)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j, k in enumerate(owners):
            per_client[k].append(idx[bounds[j] : bounds[j + 1]])
    shards = [ClientShard(k, data.subset(np.concatenate(parts))) for k, parts in enumerate(per_client)]
    return shards, phi


def partition(data: Dataset, spec: PartitionSpec) -> List[ClientShard]:
    if spec.mode == "iid":
        return partition_iid(data, spec.n_clients, spec.seed)
    return partition_noniid(data, spec)[0]


def noisy_client_count(n_clients: int, rho: float) -> int:
    # tolerance guards products such as 0.57 * 100 = 56.99999999999999
    return int(math.floor(rho * n_clients + 1e-9))


def assign_noise_levels(n_clients: int, spec: NoiseSpec) -> List[Tuple[int, float]]:
    """Pick ``floor(rho * N)`` noisy clients and draw each rate from U(tau, 1)."""
    rng = seeded_rng(spec.seed, 0)
    n_noisy = noisy_client_count(n_clients, spec.rho)
    noisy = np.sort(rng.choice(n_clients, size=n_noisy, replace=False))
    rates = rng.uniform(spec.tau, 1.0, size=n_noisy)
    levels = dict(zip(noisy.tolist(), rates.tolist()))
    return [(k, levels.get(k, 0.0)) for k in range(n_clients)]


def inject_noise(shard: ClientShard, spec: NoiseSpec) -> Tuple[ClientShard, CorruptionLog]:
    """Relabel ``round(r_k * n_k)`` uniformly chosen examples of ``shard``.

    Symmetric noise draws the new label uniformly over all classes, so a
    selected example can keep its label; such no-op draws are still logged.
    Asymmetric noise maps the true class through ``spec.pair_map`` and logs
    only actual changes.
    """
    C = shard.data.n_classes
    if spec.kind == "asymmetric" and not spec.pair_map:
        raise ConfigurationError("asymmetric noise requires a nonempty pair_map")
    log = CorruptionLog(C)
    n_sel = round_half_up(shard.noise_rate * shard.n)
    log.selected[shard.client_id] = n_sel
    if n_sel == 0:
        return shard, log
    rng = seeded_rng(spec.seed, 1, shard.client_id)
    picked = np.sort(rng.choice(shard.n, size=n_sel, replace=False))
    data = shard.data.subset(np.arange(shard.n))
    if spec.kind == "symmetric":
        new = rng.integers(0, C, size=n_sel)
    else:
        new = np.array([spec.pair_map.get(int(c), int(c)) for c in data.true[picked]], dtype=np.int64)
    for i, lab in zip(picked.tolist(), new.tolist()):
        old = int(data.given[i])
        if spec.kind == "asymmetric" and lab == old:
            continue
        data.given[i] = lab
        log.entries.append((int(data.example_ids[i]), old, int(lab), shard.client_id))
    return ClientShard(shard.client_id, data, shard.noise_rate), log


def apply_noise(shards: List[ClientShard], spec: NoiseSpec) -> Tuple[List[ClientShard], CorruptionLog]:
    """Assign noise rates to all clients and corrupt their labels."""
    levels = dict(assign_noise_levels(len(shards), spec))
    log = CorruptionLog(shards[0].data.n_classes if shards else 0)
    out = []
    for shard in shards:
        noisy, part = inject_noise(ClientShard(shard.client_id, shard.data, levels[shard.client_id]), spec)
        log.extend(part)
        out.append(noisy)
    return out, log


# --- tabular export/import -------------------------------------------------


def export_dataset(path: Path, shards: Sequence[ClientShard]) -> None:
    """One row per example: id, client, features, given label, true label."""
    dim = shards[0].data.dim
    header = ["example_id", "client_id"] + [f"f_{j}" for j in range(dim)] + ["given_label", "true_label"]
    rows = []
    for shard in shards:
        d = shard.data
        for i in range(shard.n):
            rows.append(
                [int(d.example_ids[i]), shard.client_id]
                + [repr(float(v)) for v in d.features[i]]
                + [int(d.given[i]), int(d.true[i])]
            )
    rows.sort(key=lambda r: r[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def import_dataset(path: Path, n_classes: int) -> List[ClientShard]:
    """Inverse of :func:`export_dataset`; noise rates are not stored and come back as 0."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 4
        by_client: Dict[int, List[List[str]]] = {}
        for row in reader:
            by_client.setdefault(int(row[1]), []).append(row)
    shards = []
    for k in sorted(by_client):
        rows = by_client[k]
        feats = np.array([[float(v) for v in r[2 : 2 + dim]] for r in rows])
        given = np.array([int(r[2 + dim]) for r in rows], dtype=np.int64)
        true = np.array([int(r[3 + dim]) for r in rows], dtype=np.int64)
        ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
        shards.append(ClientShard(k, Dataset(feats, given, true, ids, n_classes)))
    return shards


def export_corruption_log(path: Path, log: CorruptionLog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "client_id", "old_class", "new_class"])
        for eid, old, new, k in sorted(log.entries):
            w.writerow([eid, k, old, new])
