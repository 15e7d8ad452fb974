"""FedAvg orchestration: client selection, aggregation, rounds and history.

The same client-side round (``client_round``) and server-side reduction
(``aggregate_payloads``) are used by the in-process simulator and the
networked runtime, which is what makes the two modes produce identical
histories for equal seeds.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from . import _rng
from .dataset import ClientData, SampleSet
from .errors import ClientFailure, EmptyDataset, EmptyRound, FederationError, LayoutMismatch, SchemaMismatch
from .metrics import ErrorStats, prediction_stats, sum_stats
from .model import ClientUpdate, ModelArch, ParamVector, init_params, local_train, predict
from .privacy import (
    MaskedUpdate,
    PrivacyConfig,
    SparseUpdate,
    dense_payload_bytes,
    densify,
    mask_one,
    pair_seeds_for,
    payload_bytes,
    privatize,
    secure_unmask_sum,
    sparsify_topk,
)

log = logging.getLogger(__name__)

POOLED_CLIENT = 0xFFFFFFFF  # seed key of the centralized trainer


@dataclass(frozen=True)
class FederationConfig:
    arch: ModelArch = field(default_factory=ModelArch)
    m: int | None = None
    fraction: float = 1.0
    local_epochs: int = 3
    batch_size: int | None = 32
    lr: float = 0.01
    rounds_max: int = 10
    target_mape: float | None = None
    seed: int = 0
    server_lr: float = 1.0
    failure_policy: str = "abort"
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)

    def __post_init__(self):
        if self.m is not None and self.m < 1:
            raise FederationError("m must be >= 1")
        if not 0 < self.fraction <= 1:
            raise FederationError("fraction must lie in (0, 1]")
        if self.local_epochs < 1:
            raise FederationError("local_epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise FederationError("batch_size must be >= 1 (or None for full batch)")
        if self.lr < 0:
            raise FederationError("lr must be >= 0")
        if self.rounds_max < 0:
            raise FederationError("rounds_max must be >= 0")
        if self.failure_policy not in ("abort", "drop"):
            raise FederationError("failure_policy must be 'abort' or 'drop'")

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "m": self.m,
            "fraction": self.fraction,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "rounds_max": self.rounds_max,
            "target_mape": self.target_mape,
            "seed": self.seed,
            "server_lr": self.server_lr,
            "failure_policy": self.failure_policy,
            "privacy": self.privacy.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FederationConfig":
        d = dict(d)
        arch = ModelArch(**d.pop("arch", {}))
        privacy = PrivacyConfig(**d.pop("privacy", {}))
        return cls(arch=arch, privacy=privacy, **d)


# ---------------------------------------------------------------------------
# selection and aggregation
# ---------------------------------------------------------------------------


def participation_count(m: int, fraction: float) -> int:
    # half-up rounding, not Python's round-half-even
    return min(m, max(1, int(math.floor(fraction * m + 0.5))))


def select_clients(m: int, fraction: float, round_: int, seed: int) -> list[int]:
    """Uniform draw of ``max(1, round(C*m))`` distinct indices in ``[0, m)``, sorted."""
    if m < 1:
        raise FederationError("need at least one client")
    if not 0 < fraction <= 1:
        raise FederationError("fraction must lie in (0, 1]")
    n = participation_count(m, fraction)
    if n == m:
        return list(range(m))
    rng = _rng.derive_rng(seed, _rng.SELECT, round_)
    return sorted(int(i) for i in rng.choice(m, size=n, replace=False))


def aggregate_fedavg(updates: Sequence[ClientUpdate]) -> ParamVector:
    """Sample-count-weighted mean of client deltas.

    Accumulation runs in ascending client id so the result does not depend
    on arrival order.
    """
    if not updates:
        raise EmptyRound("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    layout = ordered[0].delta.layout
    for u in ordered[1:]:
        if u.delta.layout != layout:
            raise LayoutMismatch(f"client {u.client_id} sent a non-conformable delta")
    total = sum(u.sample_count for u in ordered)
    acc = np.zeros(ordered[0].delta.dim)
    for u in ordered:
        acc += (u.sample_count / total) * u.delta.values
    return ParamVector(acc, layout)


# ---------------------------------------------------------------------------
# one client's round, shared by simulation and the network client
# ---------------------------------------------------------------------------


def local_seed(seed: int, client_id: int, round_: int) -> int:
    return _rng.derive_seed(seed, client_id, round_)


def client_round(
    data: ClientData,
    cfg: FederationConfig,
    global_params: ParamVector,
    round_: int,
    participants: Sequence[int],
    pair_secret: int | None = None,
):
    """Train locally and push the delta through the privacy pipeline.

    Returns the upload payload: a ``ClientUpdate`` (dense), ``SparseUpdate`` or
    ``MaskedUpdate``. Masked vectors carry ``n_k * delta`` so the server can form
    the weighted mean from the unmasked sum.
    """
    cid = data.client_id
    update = local_train(
        cfg.arch,
        global_params,
        data.train,
        cfg.local_epochs,
        cfg.batch_size,
        cfg.lr,
        seed=local_seed(cfg.seed, cid, round_),
        client_id=cid,
    )
    # noise rng is keyed like the shuffle rng but on its own stream
    update = privatize(update, cfg.privacy, _rng.derive_rng(cfg.seed, _rng.NOISE, cid, round_))
    pc = cfg.privacy
    if pc.topk_ratio is not None:
        return sparsify_topk(update.delta, pc.topk_ratio, update.sample_count, cid)
    if pc.secure_agg:
        secret = pc.pair_secret if pair_secret is None else pair_secret
        seeds = pair_seeds_for(participants, secret, round_)
        return mask_one(
            cid,
            update.delta.values * update.sample_count,
            participants,
            seeds,
            pc.quant_scale,
            pc.mask_bits,
            update.sample_count,
        )
    return update


def as_dense(payload, layout) -> ClientUpdate:
    if isinstance(payload, ClientUpdate):
        return payload
    if isinstance(payload, SparseUpdate):
        return ClientUpdate(payload.client_id, densify(payload, layout), payload.sample_count)
    raise TypeError(f"{type(payload).__name__} cannot be densified individually")


def aggregate_payloads(payloads: Sequence, layout, cfg: FederationConfig, participants) -> ParamVector:
    """Server-side reduction of one round's uploads into the global delta."""
    if not payloads:
        raise EmptyRound("no client updates to aggregate")
    if all(isinstance(p, MaskedUpdate) for p in payloads):
        total_n = sum(p.sample_count for p in payloads)
        summed = secure_unmask_sum(list(payloads), cfg.privacy.quant_scale, participants, layout)
        return ParamVector(summed.values / total_n, layout)
    if any(isinstance(p, MaskedUpdate) for p in payloads):
        raise FederationError("mixed masked and unmasked payloads in one round")
    return aggregate_fedavg([as_dense(p, layout) for p in payloads])


@dataclass
class ClientReport:
    """What a client discloses about the global model's fit on its data."""

    train_sse: float
    train_count: int
    val: ErrorStats
    test: ErrorStats

    def to_list(self):
        return [self.train_sse, self.train_count] + self.val.to_list() + self.test.to_list()

    @classmethod
    def from_list(cls, v):
        return cls(float(v[0]), int(v[1]), ErrorStats.from_list(v[2:8]), ErrorStats.from_list(v[8:14]))


def client_report(data: ClientData, arch: ModelArch, params: ParamVector) -> ClientReport:
    if len(data.train):
        r = predict(arch, params, data.train.features) - data.train.targets
        sse, cnt = float(np.sum(r * r)), int(r.size)
    else:
        sse, cnt = 0.0, 0
    return ClientReport(
        sse,
        cnt,
        prediction_stats(arch, params, data.val, data.scaler),
        prediction_stats(arch, params, data.test, data.scaler),
    )


class LocalClient:
    """In-process client handle used by the simulator."""

    def __init__(self, data: ClientData, cfg: FederationConfig):
        self.data = data
        self.cfg = cfg

    @property
    def client_id(self):
        return self.data.client_id

    @property
    def sample_count(self):
        return len(self.data.train)

    def train(self, global_params, round_, participants):
        return client_round(self.data, self.cfg, global_params, round_, participants)

    def report(self, global_params, round_):
        return client_report(self.data, self.cfg.arch, global_params)


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = (
    "round",
    "cluster_id",
    "selected",
    "train_loss",
    "val_mape",
    "val_cv_rmse",
    "test_mape",
    "test_cv_rmse",
    "val_excluded",
    "test_excluded",
    "uplink_bytes",
    "downlink_bytes",
    "wall_time_s",
)
TIMING_COLUMNS = ("wall_time_s",)


def _csv_value(v):
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return v


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


@dataclass
class RoundHistory:
    """Append-only per-round record. CSV and JSON share the column names."""

    label: str = "federated"
    horizon: int = 1
    model: str = "linear"
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    columns = HISTORY_COLUMNS

    def append(self, row: dict):
        missing = [c for c in HISTORY_COLUMNS if c not in row]
        if missing:
            raise ValueError(f"history row lacks {missing}")
        self.rows.append({c: row[c] for c in HISTORY_COLUMNS})

    def extend(self, other: "RoundHistory"):
        for r in other.rows:
            self.append(r)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [r[name] for r in self.rows]

    def metric_rows(self):
        """Rows without timing columns: the part that must be reproducible."""
        return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in self.rows]

    def final(self, cluster_id=None):
        rows = self.rows if cluster_id is None else [r for r in self.rows if r["cluster_id"] == cluster_id]
        return rows[-1]

    def to_csv(self, include_timing=True) -> str:
        cols = [c for c in HISTORY_COLUMNS if include_timing or c not in TIMING_COLUMNS]
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_csv_value(r[c]) for c in cols])
        return out.getvalue()

    def to_dict(self):
        return {
            "schema_version": 1,
            "label": self.label,
            "horizon": self.horizon,
            "model": self.model,
            "columns": list(HISTORY_COLUMNS),
            "meta": self.meta,
            "rows": [{k: _json_value(v) for k, v in r.items()} for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "RoundHistory":
        if tuple(d.get("columns", HISTORY_COLUMNS)) != HISTORY_COLUMNS:
            raise SchemaMismatch("unknown history columns")
        h = cls(d.get("label", ""), d["horizon"], d.get("model", ""), meta=d.get("meta", {}))
        for r in d["rows"]:
            h.append({k: (math.nan if v is None and k not in ("selected",) else v) for k, v in r.items()})
        return h

    @classmethod
    def from_json(cls, text) -> "RoundHistory":
        return cls.from_dict(json.loads(text))


def history_row(round_, cluster_id, selected, reports: Sequence[ClientReport], uplink, downlink, wall):
    train_sse = sum(r.train_sse for r in reports)
    train_cnt = sum(r.train_count for r in reports)
    val = sum_stats(r.val for r in reports)
    test = sum_stats(r.test for r in reports)
    return {
        "round": round_,
        "cluster_id": cluster_id,
        "selected": list(selected),
        "train_loss": train_sse / train_cnt if train_cnt else math.nan,
        "val_mape": val.mape,
        "val_cv_rmse": val.cv_rmse,
        "test_mape": test.mape,
        "test_cv_rmse": test.cv_rmse,
        "val_excluded": val.n_excluded,
        "test_excluded": test.n_excluded,
        "uplink_bytes": int(uplink),
        "downlink_bytes": int(downlink),
        "wall_time_s": wall,
    }


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass
class ServerState:
    global_params: ParamVector
    round: int = 0
    history: RoundHistory = field(default_factory=RoundHistory)


class Federation:
    """Sequential round orchestrator over a directory of client handles.

    ``clients`` maps client id to an object with ``train(global, round,
    participants)`` and ``report(global, round)``; :class:`LocalClient` is the
    in-process implementation and the network server supplies remote proxies.
    """

    def __init__(
        self,
        cfg: FederationConfig,
        clients: Mapping[int, Any],
        global_params: ParamVector | None = None,
        *,
        start_round: int = 0,
        cluster_id: int = -1,
        label: str = "federated",
        history: RoundHistory | None = None,
        evaluated: bool = False,
    ):
        if not clients:
            raise EmptyDataset("federation has no clients")
        if cfg.m is not None and cfg.m != len(clients) and cluster_id == -1:
            raise FederationError(f"config says m={cfg.m} but {len(clients)} clients were supplied")
        self.cfg = cfg
        self.clients = dict(sorted(clients.items()))
        self.member_ids = list(self.clients)
        if global_params is None:
            global_params = init_params(cfg.arch, cfg.seed)
        if global_params.layout != cfg.arch.layout():
            raise LayoutMismatch("initial parameters do not match the architecture")
        hist = history or RoundHistory(label, cfg.arch.horizon, cfg.arch.kind)
        self.state = ServerState(global_params, start_round, hist)
        self.cluster_id = cluster_id
        self.last_deltas: dict[int, ParamVector] = {}
        # skip the initial evaluation when the starting model was already scored elsewhere
        self._evaluated_round: int | None = start_round if evaluated else None

    @property
    def global_params(self):
        return self.state.global_params

    @property
    def history(self):
        return self.state.history

    def evaluate(self, selected=(), uplink=0, downlink=0, t0=None):
        reports = self.collect_reports(self.state.global_params, self.state.round)
        wall = 0.0 if t0 is None else time.perf_counter() - t0
        row = history_row(self.state.round, self.cluster_id, selected, reports, uplink, downlink, wall)
        self.state.history.append(row)
        self._evaluated_round = self.state.round
        return row

    def spawn(self, clients, global_params, **kw) -> "Federation":
        """A sibling federation over ``clients`` sharing this one's config and transport."""
        return type(self)(self.cfg, clients, global_params, **kw)

    def collect_updates(self, params, round_, selected) -> list:
        """Ask each selected client for its upload; failures follow ``failure_policy``."""
        payloads = []
        for cid in selected:
            try:
                payloads.append(self.clients[cid].train(params, round_, selected))
            except Exception as exc:  # noqa: BLE001 - policy decides
                self._client_failed(cid, round_, exc)
        return payloads

    def collect_reports(self, params, round_) -> list:
        """Client reports in member-id order (the order metrics are summed in)."""
        reports = []
        for cid in self.member_ids:
            try:
                reports.append(self.clients[cid].report(params, round_))
            except Exception as exc:  # noqa: BLE001
                self._client_failed(cid, round_, exc)
        return reports

    def _client_failed(self, cid, round_, exc):
        if self.cfg.failure_policy == "abort":
            raise ClientFailure(cid, exc) from exc
        log.warning("dropping client %s in round %s: %r", cid, round_, exc)

    def select(self, round_, force_full=False):
        if force_full:
            return list(self.member_ids)
        idx = select_clients(len(self.member_ids), self.cfg.fraction, round_, self.cfg.seed)
        return [self.member_ids[i] for i in idx]

    def run_round(self, force_full: bool = False) -> dict:
        """One FedAvg round; returns the appended history row."""
        t0 = time.perf_counter()
        round_ = self.state.round + 1
        selected = self.select(round_, force_full)
        params = self.state.global_params
        payloads = self.collect_updates(params, round_, selected)
        if not payloads:
            raise EmptyRound(f"round {round_}: every selected client failed")
        layout = params.layout
        participants = [p.client_id for p in payloads]
        # masks were built over the full selection; a missing client must fail the unmask
        agg = aggregate_payloads(payloads, layout, self.cfg, selected)
        self.last_deltas = {}
        if not isinstance(payloads[0], MaskedUpdate):
            self.last_deltas = {p.client_id: as_dense(p, layout).delta for p in payloads}
        step = agg if self.cfg.server_lr == 1.0 else agg.scale(self.cfg.server_lr)
        self.state.global_params = params + step
        self.state.round = round_
        uplink = sum(payload_bytes(p) for p in payloads)
        downlink = len(selected) * dense_payload_bytes(params.dim)
        return self.evaluate(participants, uplink, downlink, t0)

    def should_stop(self, row) -> bool:
        t = self.cfg.target_mape
        return t is not None and not math.isnan(row["val_mape"]) and row["val_mape"] <= t

    def run(self, rounds: int | None = None) -> RoundHistory:
        """Evaluate the starting model if nothing is recorded yet, then run rounds."""
        if self._evaluated_round != self.state.round:
            self.evaluate()
        target = self.cfg.rounds_max if rounds is None else self.state.round + rounds
        while self.state.round < target:
            row = self.run_round()
            if self.should_stop(row):
                log.info("early stop at round %d: val MAPE %.4f", row["round"], row["val_mape"])
                break
        return self.state.history


def local_clients(clients: Sequence[ClientData], cfg: FederationConfig) -> dict[int, LocalClient]:
    return {c.client_id: LocalClient(c, cfg) for c in clients}


def run_federation(cfg: FederationConfig, clients: Sequence[ClientData], label="federated") -> RoundHistory:
    """Simulate FedAvg end to end; deterministic given ``cfg.seed``."""
    return Federation(cfg, local_clients(clients, cfg), label=label).run()


def pooled_train(clients: Sequence[ClientData]) -> SampleSet:
    parts = [c.train for c in sorted(clients, key=lambda c: c.client_id)]
    if not parts or sum(len(p) for p in parts) == 0:
        raise EmptyDataset("no training samples to pool")
    return SampleSet.concat(parts)


def centralized_baseline(cfg: FederationConfig, clients: Sequence[ClientData], label="centralized") -> RoundHistory:
    return train_centralized(cfg, clients, label)[1]


def train_centralized(cfg: FederationConfig, clients: Sequence[ClientData], label="centralized"):
    """Same architecture and schedule trained on the pooled training data.

    Each "round" runs ``local_epochs`` epochs of SGD with ``batch_size`` over
    the pooled set; with full batches and one epoch this is one gradient step
    per round. Metrics are computed per client (each with its own scaler)
    exactly as in the federated run, so the histories line up column for column.

    Returns ``(final_params, history)``.
    """
    pooled = pooled_train(clients)
    ordered = sorted(clients, key=lambda c: c.client_id)
    params = init_params(cfg.arch, cfg.seed)
    hist = RoundHistory(label, cfg.arch.horizon, cfg.arch.kind)

    def record(round_, t0):
        reports = [client_report(c, cfg.arch, params) for c in ordered]
        wall = 0.0 if t0 is None else time.perf_counter() - t0
        row = history_row(round_, -1, [], reports, 0, 0, wall)
        hist.append(row)
        return row

    record(0, None)
    for r in range(1, cfg.rounds_max + 1):
        t0 = time.perf_counter()
        upd = local_train(
            cfg.arch, params, pooled, cfg.local_epochs, cfg.batch_size, cfg.lr,
            seed=local_seed(cfg.seed, POOLED_CLIENT, r), client_id=POOLED_CLIENT,
        )
        params = params + upd.delta
        row = record(r, t0)
        if cfg.target_mape is not None and not math.isnan(row["val_mape"]) and row["val_mape"] <= cfg.target_mape:
            break
    return params, hist


def with_overrides(cfg: FederationConfig, **kw) -> FederationConfig:
    return replace(cfg, **kw)
