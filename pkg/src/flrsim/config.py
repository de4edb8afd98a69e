"""INI experiment configuration: parsing, validation and method presets.

Example::

    [dataset]
    classes = 4
    dim = 16
    n_per_class = 1000
    test_per_class = 250
    spread = 2.0

    [partition]
    mode = iid
    clients = 20

    [noise]
    kind = symmetric
    rho = 0.8
    tau = 0.0

    [run]
    method = flr
    seed = 0

Any key left out takes its default. Seeds in ``dataset``, ``partition`` and
``noise`` default to values derived from ``run.seed`` so that two methods run
with the same master seed see the same data and the same corruption.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np

from .data import NoiseSpec, PartitionSpec, cyclic_pair_map
from .errors import ConfigurationError
from .federation import TrainerConfig
from .state import ScheduleParams

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = {"symmetric": 2.0, "asymmetric": 3.0}
DEFAULT_FEDPROX_MU = 0.001

# coefficient settings each method expands to
PRESETS: Dict[str, Dict[str, Any]] = {
    "ce": {"lam": 0.0, "fedprox_mu": 0.0},
    "flr": {},
    "elr": {"alpha": 0.0, "alpha_schedule": "constant"},
    "slr": {"alpha": 1.0, "alpha_schedule": "constant"},
    "er": {"alpha": 0.0, "gamma": 0.0, "alpha_schedule": "constant"},
    "fedprox": {"lam": 0.0, "fedprox_mu": DEFAULT_FEDPROX_MU},
    "fedprox+flr": {"fedprox_mu": DEFAULT_FEDPROX_MU},
}

# section -> key -> type; "?" suffix marks keys that may be left blank
SCHEMA: Dict[str, Dict[str, str]] = {
    "dataset": {"classes": "int", "dim": "int", "n_per_class": "int", "test_per_class": "int",
                "spread": "float", "seed": "int?"},
    "partition": {"mode": "str", "clients": "int", "p": "float", "alpha_dir": "float", "seed": "int?"},
    "noise": {"kind": "str", "rho": "float", "tau": "float", "pair_classes": "intlist?",
              "pair_map": "pairs?", "seed": "int?"},
    "model": {"hidden": "intlist?"},
    "trainer": {"local_epochs": "int", "batch_size": "int", "lr": "float", "fedprox_mu": "float",
                "participation_fraction": "float", "momentum": "float", "weight_decay": "float"},
    "schedule": {"alpha": "float", "beta": "float", "gamma": "float", "lam": "float", "rounds": "int",
                 "warmup_rounds": "int", "alpha_schedule": "str", "gamma_start": "int?"},
    "run": {"method": "str", "seed": "int", "output_dir": "str", "checkpoint_every": "int",
            "workers": "int", "local_metric_weighting": "str"},
}

COEFFICIENT_KEYS = {"alpha": "schedule", "beta": "schedule", "gamma": "schedule", "lam": "schedule",
                    "alpha_schedule": "schedule", "fedprox_mu": "trainer"}


class ValidationError(ConfigurationError):
    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class DatasetSpec:
    classes: int = 4
    dim: int = 16
    n_per_class: int = 1000
    test_per_class: int = 250
    spread: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ConfigurationError("dataset.classes must be >= 2")
        if self.dim < 2:
            raise ConfigurationError("dataset.dim must be >= 2")
        if self.n_per_class < 1 or self.test_per_class < 1:
            raise ConfigurationError("dataset.n_per_class and dataset.test_per_class must be >= 1")
        if not self.spread > 0:
            raise ConfigurationError("dataset.spread must be > 0")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    partition: PartitionSpec
    noise: NoiseSpec
    hidden: List[int]
    trainer: TrainerConfig
    schedule: ScheduleParams
    method: str = "flr"
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    workers: int = 1
    local_metric_weighting: str = "unweighted"

    @property
    def layer_sizes(self) -> List[int]:
        return [self.dataset.dim, *self.hidden, self.dataset.classes]

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        if d["noise"]["pair_map"] is not None:
            d["noise"]["pair_map"] = {str(k): v for k, v in d["noise"]["pair_map"].items()}
        return d

    def engine_dict(self) -> Dict[str, Any]:
        """Everything that influences the numbers, minus labels and locations."""
        d = self.to_dict()
        for key in ("method", "output_dir", "workers", "checkpoint_every"):
            d.pop(key)
        return d

    def engine_hash(self) -> str:
        blob = json.dumps(self.engine_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def derive_seed(master: int, tag: int) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=(100 + tag,))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _convert(kind: str, raw: str):
    kind = kind.rstrip("?")
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "str":
        return raw
    if kind == "intlist":
        return [int(v) for v in raw.replace(",", " ").split()]
    if kind == "pairs":
        out = {}
        for item in raw.replace(",", " ").split():
            a, b = item.split(":")
            out[int(a)] = int(b)
        return out
    raise AssertionError(kind)


def _read_sections(raw: Dict[str, Dict[str, str]], errors: List[str]) -> Dict[str, Dict[str, Any]]:
    values: Dict[str, Dict[str, Any]] = {s: {} for s in SCHEMA}
    for section, items in raw.items():
        if section not in SCHEMA:
            errors.append(f"{section}: unknown section")
            continue
        for key, text in items.items():
            kind = SCHEMA[section].get(key)
            if kind is None:
                errors.append(f"{section}.{key}: unknown key")
                continue
            if text.strip() == "":
                if kind.endswith("?"):
                    continue
                errors.append(f"{section}.{key}: value required")
                continue
            try:
                values[section][key] = _convert(kind, text)
            except ValueError:
                errors.append(f"{section}.{key}: cannot parse {text!r} as {kind.rstrip('?')}")
    return values


def _build(errors: List[str], factory, **kwargs):
    try:
        return factory(**kwargs)
    except ConfigurationError as exc:
        errors.append(str(exc))
    except TypeError as exc:
        errors.append(str(exc))
    return None


def resolve(raw: Dict[str, Dict[str, str]], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Validate raw string sections and expand defaults and presets.

    ``overrides`` may set ``seed``, ``output_dir`` or ``method`` (the CLI flags).
    """
    errors: List[str] = []
    v = _read_sections(raw, errors)
    overrides = overrides or {}
    for key in ("seed", "output_dir", "method"):
        if overrides.get(key) is not None:
            v["run"][key] = overrides[key]

    run = v["run"]
    method = run.get("method", "flr")
    if method not in PRESETS:
        errors.append(f"run.method: unknown preset {method!r} (choose from {', '.join(PRESETS)})")
        method = "flr"
    master = run.get("seed", 0)

    if "kind" not in v["noise"]:
        errors.append("noise.kind: required (symmetric or asymmetric)")
    kind = v["noise"].get("kind", "symmetric")

    # preset expansion, explicit keys win
    coeffs: Dict[str, Any] = {"lam": DEFAULT_LAMBDA.get(kind, 2.0)}
    coeffs.update(PRESETS[method])
    for key, section in COEFFICIENT_KEYS.items():
        if key in v[section]:
            if key in PRESETS[method] and v[section][key] != PRESETS[method][key]:
                log.warning("%s.%s=%r overrides preset %r value %r",
                            section, key, v[section][key], method, PRESETS[method][key])
            coeffs[key] = v[section][key]
    for key, section in COEFFICIENT_KEYS.items():
        if key in coeffs:
            v[section][key] = coeffs[key]

    ds = dict(v["dataset"])
    ds.setdefault("seed", derive_seed(master, 0))
    dataset = _build(errors, DatasetSpec, **ds)

    pv = dict(v["partition"])
    part = _build(
        errors, PartitionSpec,
        mode=pv.get("mode", "iid"), n_clients=pv.get("clients", 10), p=pv.get("p", 1.0),
        alpha_dir=pv.get("alpha_dir", 1.0), seed=pv.get("seed", derive_seed(master, 1)),
    )

    nv = dict(v["noise"])
    n_classes = dataset.classes if dataset else 2
    pair_map = nv.get("pair_map")
    if pair_map is not None:
        bad = [c for c in list(pair_map) + list(pair_map.values()) if not 0 <= c < n_classes]
        if bad:
            errors.append(f"noise.pair_map: classes {bad} outside [0, {n_classes})")
        pair_map = {c: pair_map.get(c, c) for c in range(n_classes)}
    elif kind == "asymmetric":
        pair_map = cyclic_pair_map(n_classes, nv.get("pair_classes"))
    noise = _build(
        errors, NoiseSpec,
        kind=kind, rho=nv.get("rho", 0.0), tau=nv.get("tau", 0.0), pair_map=pair_map,
        seed=nv.get("seed", derive_seed(master, 2)),
    )

    hidden = v["model"].get("hidden", [64, 64])
    if any(h < 1 for h in hidden):
        errors.append("model.hidden: layer widths must be positive")

    trainer = _build(errors, TrainerConfig, **v["trainer"])
    schedule = _build(errors, ScheduleParams, **v["schedule"])

    weighting = run.get("local_metric_weighting", "unweighted")
    if weighting not in ("unweighted", "size"):
        errors.append("run.local_metric_weighting: must be unweighted or size")
    if run.get("checkpoint_every", 0) < 0:
        errors.append("run.checkpoint_every: must be >= 0")
    if run.get("workers", 1) < 1:
        errors.append("run.workers: must be >= 1")

    if dataset and part and part.mode == "iid" and dataset.n_per_class % part.n_clients:
        errors.append(
            f"partition.clients: {part.n_clients} does not divide dataset.n_per_class={dataset.n_per_class}"
        )
    if errors:
        raise ValidationError(errors)
    return ExperimentConfig(
        dataset=dataset, partition=part, noise=noise, hidden=list(hidden), trainer=trainer,
        schedule=schedule, method=method, seed=master, output_dir=run.get("output_dir", "runs/default"),
        checkpoint_every=run.get("checkpoint_every", 0), workers=run.get("workers", 1),
        local_metric_weighting=weighting,
    )


def parse_ini(text: str) -> Dict[str, Dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # keep key case
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError([f"config syntax: {exc}"]) from None
    return {s: dict(cp.items(s)) for s in cp.sections()}


def parse_and_validate(text: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Parse INI text (or a resolved-config JSON document) into an ExperimentConfig."""
    if text.lstrip().startswith("{"):
        return from_resolved(json.loads(text), overrides)
    return resolve(parse_ini(text), overrides)


def from_resolved(d: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Rebuild a config from :meth:`ExperimentConfig.to_dict` output."""
    noise = dict(d["noise"])
    if noise.get("pair_map") is not None:
        noise["pair_map"] = {int(k): int(v) for k, v in noise["pair_map"].items()}
    part = d["partition"]
    cfg = ExperimentConfig(
        dataset=DatasetSpec(**d["dataset"]),
        partition=PartitionSpec(**part),
        noise=NoiseSpec(**noise),
        hidden=list(d["hidden"]),
        trainer=TrainerConfig(**d["trainer"]),
        schedule=ScheduleParams(**d["schedule"]),
        method=d["method"],
        seed=d["seed"],
        output_dir=d["output_dir"],
        checkpoint_every=d["checkpoint_every"],
        workers=d["workers"],
        local_metric_weighting=d["local_metric_weighting"],
    )
    overrides = overrides or {}
    if overrides.get("output_dir") is not None:
        cfg.output_dir = overrides["output_dir"]
    if overrides.get("seed") is not None or overrides.get("method") is not None:
        raise ConfigurationError("--seed/--preset cannot be applied to an already resolved config")
    return cfg
