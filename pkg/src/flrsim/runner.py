"""End-to-end runs: build data, train, and write every artifact to one directory."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import (
    ClientShard,
    CorruptionLog,
    Dataset,
    apply_noise,
    export_corruption_log,
    export_dataset,
    generate_synthetic,
    partition,
)
from .errors import ConfigurationError
from .federation import Federation
from .metrics import CATEGORIES, MetricsWriter, read_metrics_csv

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FLRSIM_OUTPUT_ROOT"
TEST_ID_OFFSET = 1 << 40

ARTIFACTS = {
    "config": "resolved_config.json",
    "dataset": "dataset.csv",
    "test_set": "test_set.csv",
    "corruption_log": "corruption_log.csv",
    "metrics": "metrics.csv",
    "checkpoint": "checkpoint",
    "manifest": "manifest.json",
}


@dataclass
class RunManifest:
    config: dict
    artifacts: Dict[str, str]
    versions: Dict[str, str]
    wall_clock_seconds: float
    dataset_sha256: str = ""
    engine_hash: str = ""
    resumed_from_round: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def output_dir_for(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def build_data(cfg: ExperimentConfig) -> Tuple[List[ClientShard], Dataset, CorruptionLog]:
    """Synthetic train/test sets, client partition and label corruption."""
    ds = cfg.dataset
    train = generate_synthetic(ds.classes, ds.dim, ds.n_per_class, ds.spread, ds.seed, "train")
    test = generate_synthetic(ds.classes, ds.dim, ds.test_per_class, ds.spread, ds.seed, "test",
                              id_offset=TEST_ID_OFFSET)
    shards = partition(train, cfg.partition)
    shards, corruption = apply_noise(shards, cfg.noise)
    return shards, test, corruption


def _sha256(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.read_bytes())
    return h.hexdigest()


def _versions() -> Dict[str, str]:
    return {"flrsim": __version__, "numpy": np.__version__, "python": platform.python_version()}


def run(cfg: ExperimentConfig, resume: bool = False, until: Optional[int] = None) -> RunManifest:
    """Execute one experiment and write its artifacts.

    With ``resume=True`` training continues from ``<out>/checkpoint`` when it
    exists. ``until`` stops after that many rounds (the run can be resumed).
    """
    start = time.perf_counter()
    out = output_dir_for(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = {k: out / v for k, v in ARTIFACTS.items()}

    shards, test, corruption = build_data(cfg)
    paths["config"].write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    export_dataset(paths["dataset"], shards)
    export_dataset(paths["test_set"], [ClientShard(-1, test)])
    export_corruption_log(paths["corruption_log"], corruption)

    fed = Federation(
        shards, test, cfg.layer_sizes, cfg.trainer, cfg.schedule, cfg.seed,
        local_metric_weighting=cfg.local_metric_weighting, workers=cfg.workers,
    )
    resumed = None
    if resume and (paths["checkpoint"] / "checkpoint.json").exists():
        fed.load_checkpoint(paths["checkpoint"])
        resumed = fed.next_round
        log.info("resuming %s at round %d", out, resumed)

    with MetricsWriter(paths["metrics"]) as writer:
        for rm in fed.metrics:
            writer.write(rm)

        def on_round(f: Federation, rm) -> None:
            writer.write(rm)
            if cfg.checkpoint_every and f.next_round % cfg.checkpoint_every == 0:
                f.save_checkpoint(paths["checkpoint"])

        fed.run(until=until, on_round=on_round)
    fed.save_checkpoint(paths["checkpoint"])

    manifest = RunManifest(
        config=cfg.to_dict(),
        artifacts={k: str(p) for k, p in paths.items()},
        versions=_versions(),
        wall_clock_seconds=round(time.perf_counter() - start, 3),
        dataset_sha256=_sha256([paths["dataset"], paths["test_set"], paths["corruption_log"]]),
        engine_hash=cfg.engine_hash(),
        resumed_from_round=resumed,
    )
    paths["manifest"].write_text(manifest.to_json(), encoding="utf-8")
    return manifest


COMPARE_COLUMNS = (
    ["run", "method"]
    + [f"global_{c}" for c in CATEGORIES]
    + [f"local_{c}" for c in CATEGORIES]
    + ["final_test_acc", "best_test_acc"]
)


def summarize(run_dir: Path) -> Dict[str, object]:
    """Final-round breakdowns and best test accuracy of one run directory."""
    run_dir = Path(run_dir)
    metrics_path = run_dir / ARTIFACTS["metrics"]
    manifest_path = run_dir / ARTIFACTS["manifest"]
    if not metrics_path.exists():
        raise FileNotFoundError(f"{run_dir}: missing {ARTIFACTS['metrics']}")
    if not manifest_path.exists():
        raise FileNotFoundError(f"{run_dir}: missing {ARTIFACTS['manifest']}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    rows = read_metrics_csv(metrics_path)
    if not rows:
        raise ConfigurationError(f"{run_dir}: metrics file has no rows")
    last = max(r["round"] for r in rows)
    final = {r["scope"]: r for r in rows if r["round"] == last}
    out: Dict[str, object] = {"run": str(run_dir), "method": manifest["config"]["method"],
                              "_dataset_sha256": manifest["dataset_sha256"]}
    for scope in ("global", "local"):
        for c in CATEGORIES:
            out[f"{scope}_{c}"] = final[scope][c] if scope in final else float("nan")
    out["final_test_acc"] = final["global"]["test_acc"]
    out["best_test_acc"] = max(r["test_acc"] for r in rows if r["scope"] == "global")
    return out


def compare(run_dirs: Sequence[Path]) -> Tuple[str, str, List[Dict[str, object]]]:
    """Side-by-side summary of runs that share dataset artifacts.

    Returns ``(text_table, csv_text, rows)``.
    """
    if len(run_dirs) < 2:
        raise ConfigurationError("compare needs at least two run directories")
    rows = [summarize(d) for d in run_dirs]
    hashes = {r["_dataset_sha256"] for r in rows}
    if len(hashes) != 1:
        raise ConfigurationError("runs were produced from different dataset artifacts; refusing to compare")

    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow([fmt(r[c]) for c in COMPARE_COLUMNS])

    short = ["run", "method"] + [f"g.{c}" for c in CATEGORIES] + [f"l.{c}" for c in CATEGORIES] + ["final_acc", "best_acc"]
    table = [short] + [[fmt(r[c]) for c in COMPARE_COLUMNS] for r in rows]
    widths = [max(len(row[j]) for row in table) for j in range(len(short))]
    text = "\n".join("  ".join(cell.rjust(wd) for cell, wd in zip(row, widths)) for row in table)
    return text, buf.getvalue(), rows
