"""Two-phase federated training: CE warmup, then FedAvg with the FLR loss."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data import ClientShard, Dataset, round_half_up, seeded_rng
from .errors import ConfigurationError, FLRError, NumericError, ProtocolError
from .metrics import RoundMetrics, global_breakdown, local_breakdown, test_accuracy
from .model import (
    ModelParams,
    _forward_cached,
    add_scaled,
    backward,
    batch_loss,
    forward,
    init_params,
    logit_error,
    sgd_step,
    softmax,
)
from .state import PseudoLabelStore, ScheduleParams, alpha_at, beta_at, gamma_at

log = logging.getLogger(__name__)

# spawn-key tags for the factored random streams
STREAM_INIT = 10
STREAM_SAMPLE = 11
STREAM_SHUFFLE = 12

Hook = Callable[[dict], None]


@dataclass
class TrainerConfig:
    local_epochs: int = 5
    batch_size: int = 20
    lr: float = 0.05
    fedprox_mu: float = 0.0
    participation_fraction: float = 1.0
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.local_epochs < 0:
            raise ConfigurationError("trainer.local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("trainer.batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("trainer.lr must be > 0")
        if self.fedprox_mu < 0:
            raise ConfigurationError("trainer.fedprox_mu must be >= 0")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ConfigurationError("trainer.participation_fraction must lie in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("trainer.momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("trainer.weight_decay must be >= 0")


@dataclass
class RoundPlan:
    round: int
    participants: Tuple[int, ...]
    phase: str = "warmup"


@dataclass
class ClientUpdateResult:
    client_id: int
    params: ModelParams
    n: int
    loss_trace: List[float] = field(default_factory=list)


def participants_per_round(n_clients: int, fraction: float) -> int:
    return max(1, min(n_clients, round_half_up(fraction * n_clients)))


def sample_clients(r: int, n_clients: int, fraction: float, seed: int, phase: str = "warmup") -> RoundPlan:
    """Uniform sample without replacement, a function of ``(seed, r)`` only."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError("participation fraction must lie in (0, 1]")
    m = participants_per_round(n_clients, fraction)
    if m == n_clients:
        chosen = np.arange(n_clients)
    else:
        chosen = np.sort(seeded_rng(seed, STREAM_SAMPLE, r).choice(n_clients, size=m, replace=False))
    return RoundPlan(r, tuple(int(k) for k in chosen), phase)


def _local_sgd(
    server_params: ModelParams,
    shard: ClientShard,
    cfg: TrainerConfig,
    seed: int,
    r: int,
    lam: float = 0.0,
    store: Optional[PseudoLabelStore] = None,
    alpha: float = 0.0,
    gamma: float = 0.0,
    hook: Optional[Hook] = None,
) -> ClientUpdateResult:
    data = shard.data
    params = server_params.copy()
    velocity: Optional[ModelParams] = None
    rng = seeded_rng(seed, STREAM_SHUFFLE, shard.client_id, r)
    trace = []
    for epoch in range(cfg.local_epochs):
        order = rng.permutation(shard.n)
        total = 0.0
        for start in range(0, shard.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            X, y = data.features[idx], data.given[idx]
            logits, acts = _forward_cached(params, X)
            p = softmax(logits)
            t = None
            if store is not None:
                ids = data.example_ids[idx]
                store.update_local_avg(ids, p, gamma)
                t = store.target(ids, alpha)
                if hook is not None:
                    s, m = store.get(ids)
                    hook({"client_id": shard.client_id, "round": r, "epoch": epoch,
                          "example_ids": ids, "p": p, "s": s, "m": m, "t": t,
                          "alpha": alpha, "gamma": gamma})
            loss = batch_loss(p, y, t, lam)
            if not np.isfinite(loss):
                raise NumericError(f"round {r} client {shard.client_id}: non-finite loss {loss}")
            total += loss * idx.size
            grad = backward(params, acts, logit_error(p, y, t, lam))
            if cfg.fedprox_mu > 0.0:
                grad = add_scaled(grad, add_scaled(params, server_params, -1.0), cfg.fedprox_mu)
            if cfg.weight_decay > 0.0:
                grad = add_scaled(grad, params, cfg.weight_decay)
            if cfg.momentum > 0.0:
                velocity = grad if velocity is None else add_scaled(grad, velocity, cfg.momentum)
                grad = velocity
            try:
                params = sgd_step(params, grad, cfg.lr)
            except NumericError as exc:
                raise NumericError(f"round {r} client {shard.client_id}: {exc}") from None
        trace.append(total / shard.n)
    return ClientUpdateResult(shard.client_id, params, shard.n, trace)


def client_update_warmup(
    server_params: ModelParams, shard: ClientShard, cfg: TrainerConfig, seed: int, r: int
) -> ClientUpdateResult:
    """``local_epochs`` passes of minibatch SGD on cross-entropy."""
    return _local_sgd(server_params, shard, cfg, seed, r)


def client_update_flr(
    server_params: ModelParams,
    shard: ClientShard,
    store: PseudoLabelStore,
    cfg: TrainerConfig,
    sp: ScheduleParams,
    r: int,
    seed: int,
    hook: Optional[Hook] = None,
) -> ClientUpdateResult:
    """Local training with the FLR loss.

    The server snapshot's predictions refresh the global average once for
    every local example; the local average and the target are refreshed on
    each minibatch visit, right before the gradient step.
    """
    p_server = softmax(forward(server_params, shard.data.features))
    store.update_global_avg(shard.data.example_ids, p_server, beta_at(r, sp))
    return _local_sgd(
        server_params, shard, cfg, seed, r,
        lam=sp.lam, store=store, alpha=alpha_at(r, sp), gamma=gamma_at(r, sp), hook=hook,
    )


def aggregate(results: Sequence[ClientUpdateResult]) -> ModelParams:
    """Dataset-size weighted parameter mean.

    Results are reduced in client-id order as ``ref + sum_k w_k (theta_k - ref)``
    with ``ref`` the first client's parameters, so identical inputs map to
    themselves exactly and the list order does not matter.
    """
    if not results:
        raise ProtocolError("cannot aggregate an empty set of client updates")
    ordered = sorted(results, key=lambda res: res.client_id)
    ref = ordered[0].params
    for res in ordered:
        if not res.params.same_shape(ref):
            raise ProtocolError(f"client {res.client_id} returned mismatched parameter shapes")
    total = float(sum(res.n for res in ordered))
    out = ref.copy()
    for res in ordered[1:]:
        w = res.n / total
        for acc, a, b in zip(out.arrays(), res.params.arrays(), ref.arrays()):
            acc += w * (a - b)
    return out


class Federation:
    """Server loop state: global model, per-client pseudo-label stores, metrics so far."""

    def __init__(
        self,
        shards: Sequence[ClientShard],
        test: Dataset,
        layer_sizes: Sequence[int],
        trainer: TrainerConfig,
        schedule: ScheduleParams,
        seed: int,
        local_metric_weighting: str = "unweighted",
        workers: int = 1,
        hook: Optional[Hook] = None,
    ):
        if not shards:
            raise ConfigurationError("at least one client shard is required")
        if layer_sizes[0] != shards[0].data.dim or layer_sizes[-1] != shards[0].data.n_classes:
            raise ConfigurationError(
                f"layer sizes {list(layer_sizes)} do not match data dim "
                f"{shards[0].data.dim} / {shards[0].data.n_classes} classes"
            )
        if local_metric_weighting not in ("unweighted", "size"):
            raise ConfigurationError("local_metric_weighting must be unweighted or size")
        self.shards = {s.client_id: s for s in shards}
        self.test = test
        self.trainer = trainer
        self.schedule = schedule
        self.seed = int(seed)
        self.weighting = local_metric_weighting
        self.workers = max(1, int(workers))
        self.hook = hook
        self.params = init_params(layer_sizes, seeded_rng(self.seed, STREAM_INIT))
        self.stores = {
            k: PseudoLabelStore(s.data.example_ids, s.data.n_classes) for k, s in self.shards.items()
        }
        self.next_round = 0
        self.metrics: List[RoundMetrics] = []

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    def phase(self, r: int) -> str:
        return "warmup" if r < self.schedule.warmup_rounds else "flr"

    def _update_client(self, k: int, r: int, phase: str) -> ClientUpdateResult:
        if phase == "warmup":
            return client_update_warmup(self.params, self.shards[k], self.trainer, self.seed, r)
        return client_update_flr(
            self.params, self.shards[k], self.stores[k], self.trainer, self.schedule, r, self.seed, self.hook
        )

    def run_round(self, r: int) -> RoundMetrics:
        phase = self.phase(r)
        plan = sample_clients(r, self.n_clients, self.trainer.participation_fraction, self.seed, phase)
        try:
            if self.workers > 1 and len(plan.participants) > 1:
                with ThreadPoolExecutor(self.workers) as pool:
                    results = list(pool.map(lambda k: self._update_client(k, r, phase), plan.participants))
            else:
                results = [self._update_client(k, r, phase) for k in plan.participants]
        except FLRError as exc:
            raise type(exc)(f"[round {r}] {exc}") from exc
        self.params = aggregate(results)
        traces = [res.loss_trace[-1] for res in results if res.loss_trace]
        rm = RoundMetrics(
            round=r,
            phase=phase,
            global_=global_breakdown(self.params, list(self.shards.values()), r),
            local=local_breakdown({res.client_id: res.params for res in results}, self.shards, r, self.weighting),
            test_acc=test_accuracy(self.params, self.test),
            train_loss=float(np.mean(traces)) if traces else float("nan"),
        )
        self.metrics.append(rm)
        self.next_round = r + 1
        return rm

    def run(
        self,
        until: Optional[int] = None,
        on_round: Optional[Callable[["Federation", RoundMetrics], None]] = None,
    ) -> Tuple[ModelParams, List[RoundMetrics]]:
        """Run rounds ``next_round .. until-1`` (default: to the end of the schedule)."""
        stop = self.schedule.rounds if until is None else min(until, self.schedule.rounds)
        for r in range(self.next_round, stop):
            rm = self.run_round(r)
            log.debug("round %d %s test_acc=%.4f", r, rm.phase, rm.test_acc)
            if on_round is not None:
                on_round(self, rm)
        return self.params, self.metrics

    # --- checkpointing ---------------------------------------------------

    def save_checkpoint(self, directory: Path) -> Path:
        """Write model, round index, metrics so far and per-client state snapshots."""
        directory = Path(directory)
        state_dir = directory / "state"
        state_dir.mkdir(parents=True, exist_ok=True)
        arrays = {f"a{i}": a for i, a in enumerate(self.params.arrays())}
        np.savez(directory / "checkpoint.npz", layer_sizes=np.array(self.params.layer_sizes), **arrays)
        state_files = {}
        for k, store in sorted(self.stores.items()):
            name = f"client_{k:04d}.csv"
            store.save(state_dir / name)
            state_files[str(k)] = f"state/{name}"
        meta = {
            "next_round": self.next_round,
            "params": "checkpoint.npz",
            "state_files": state_files,
            "metrics": [rm.to_json() for rm in self.metrics],
        }
        path = directory / "checkpoint.json"
        path.write_text(json.dumps(meta, indent=1), encoding="utf-8")
        return path

    def load_checkpoint(self, directory: Path) -> None:
        directory = Path(directory)
        meta = json.loads((directory / "checkpoint.json").read_text(encoding="utf-8"))
        with np.load(directory / meta["params"]) as npz:
            sizes = [int(s) for s in npz["layer_sizes"]]
            arrays = [npz[f"a{i}"] for i in range(2 * (len(sizes) - 1))]
        if sizes != self.params.layer_sizes:
            raise ConfigurationError(f"checkpoint layer sizes {sizes} differ from {self.params.layer_sizes}")
        self.params = ModelParams(sizes, arrays[0::2], arrays[1::2])
        for k, rel in meta["state_files"].items():
            self.stores[int(k)] = PseudoLabelStore.load(directory / rel)
        self.metrics = [RoundMetrics.from_json(d) for d in meta["metrics"]]
        self.next_round = int(meta["next_round"])


def run_experiment(
    shards: Sequence[ClientShard],
    test: Dataset,
    layer_sizes: Sequence[int],
    trainer: TrainerConfig,
    schedule: ScheduleParams,
    seed: int,
    **kwargs,
) -> Tuple[ModelParams, List[RoundMetrics]]:
    """Convenience wrapper: build a :class:`Federation` and run all rounds."""
    return Federation(shards, test, layer_sizes, trainer, schedule, seed, **kwargs).run()
