"""Forecast accuracy metrics (MAPE, CV-RMSE) and run comparison tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import AllPointsExcluded, SchemaMismatch, ZeroMeanTarget
from .model import predict

EPS_Y = 1e-6  # kWh; targets at or below this are excluded from MAPE


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape[0]} targets vs {yhat.shape[0]} predictions")
    if y.shape[0] == 0:
        raise ValueError("need at least one point")
    return y, yhat


def mape_detail(y, yhat, eps=EPS_Y) -> tuple[float, int]:
    """MAPE in percent plus the number of excluded near-zero targets."""
    y, yhat = _pair(y, yhat)
    keep = np.abs(y) > eps
    n = int(keep.sum())
    if n == 0:
        raise AllPointsExcluded(f"all {y.shape[0]} targets are within {eps} of zero")
    return 100.0 * float(np.sum(np.abs(y[keep] - yhat[keep]) / np.abs(y[keep]))) / n, int(y.shape[0] - n)


def mape(y, yhat, eps=EPS_Y) -> float:
    return mape_detail(y, yhat, eps)[0]


def cv_rmse(y, yhat, eps=EPS_Y) -> float:
    """100 * RMSE / mean(y)."""
    y, yhat = _pair(y, yhat)
    mean = float(np.sum(y)) / y.shape[0]
    if not mean > eps:
        raise ZeroMeanTarget(f"mean target {mean} is not above {eps}")
    return 100.0 * math.sqrt(float(np.sum((y - yhat) ** 2)) / y.shape[0]) / mean


@dataclass
class ErrorStats:
    """Additive sufficient statistics for MAPE / CV-RMSE.

    Clients can report these instead of raw predictions; summing them in
    client-id order gives the pooled metrics.
    """

    abs_pct_sum: float = 0.0
    n_included: int = 0
    n_excluded: int = 0
    sq_err_sum: float = 0.0
    y_sum: float = 0.0
    n_points: int = 0

    @classmethod
    def from_arrays(cls, y, yhat, eps=EPS_Y) -> "ErrorStats":
        y = np.asarray(y, dtype=np.float64).ravel()
        yhat = np.asarray(yhat, dtype=np.float64).ravel()
        keep = np.abs(y) > eps
        return cls(
            abs_pct_sum=float(np.sum(np.abs(y[keep] - yhat[keep]) / np.abs(y[keep]))),
            n_included=int(keep.sum()),
            n_excluded=int((~keep).sum()),
            sq_err_sum=float(np.sum((y - yhat) ** 2)),
            y_sum=float(np.sum(y)),
            n_points=int(y.shape[0]),
        )

    def __add__(self, other: "ErrorStats") -> "ErrorStats":
        return ErrorStats(
            self.abs_pct_sum + other.abs_pct_sum,
            self.n_included + other.n_included,
            self.n_excluded + other.n_excluded,
            self.sq_err_sum + other.sq_err_sum,
            self.y_sum + other.y_sum,
            self.n_points + other.n_points,
        )

    @property
    def mape(self) -> float:
        return 100.0 * self.abs_pct_sum / self.n_included if self.n_included else math.nan

    @property
    def rmse(self) -> float:
        return math.sqrt(self.sq_err_sum / self.n_points) if self.n_points else math.nan

    @property
    def cv_rmse(self) -> float:
        if not self.n_points:
            return math.nan
        mean = self.y_sum / self.n_points
        return 100.0 * self.rmse / mean if mean > EPS_Y else math.nan

    def to_list(self):
        return [self.abs_pct_sum, self.n_included, self.n_excluded, self.sq_err_sum, self.y_sum, self.n_points]

    @classmethod
    def from_list(cls, v):
        return cls(float(v[0]), int(v[1]), int(v[2]), float(v[3]), float(v[4]), int(v[5]))


def sum_stats(stats) -> ErrorStats:
    total = ErrorStats()
    for s in stats:
        total = total + s
    return total


def prediction_stats(arch, params, samples, scaler) -> ErrorStats:
    """Predict, undo the target scaling and accumulate kWh-space error stats."""
    if len(samples) == 0:
        return ErrorStats()
    yhat = scaler.inverse_transform_target(predict(arch, params, samples.features))
    y = scaler.inverse_transform_target(samples.targets)
    return ErrorStats.from_arrays(y, yhat)


@dataclass
class EvalReport:
    mape_pct: float
    cv_rmse_pct: float
    rmse: float
    n_points: int
    n_excluded: int
    horizon: int
    scope: str = "global"
    model_tag: str = ""
    per_client: list[dict] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        cols = ["scope", "client_id", "mape_pct", "cv_rmse_pct", "rmse", "n_points", "n_excluded"]
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(cols)
        w.writerow([self.scope, "", self.mape_pct, self.cv_rmse_pct, self.rmse, self.n_points, self.n_excluded])
        for row in self.per_client:
            w.writerow(["client"] + [row[c] for c in cols[1:]])
        return out.getvalue()


def _report(stats: ErrorStats, horizon, scope, tag, per_client=()):
    if stats.n_points == 0:
        raise ValueError("empty evaluation set")
    if stats.n_included == 0:
        raise AllPointsExcluded("every target is near zero")
    mean = stats.y_sum / stats.n_points
    if not mean > EPS_Y:
        raise ZeroMeanTarget(f"mean target {mean} is not above {EPS_Y}")
    return EvalReport(stats.mape, stats.cv_rmse, stats.rmse, stats.n_points, stats.n_excluded, horizon, scope, tag, list(per_client))


def evaluate(arch, params, test, scaler, model_tag: str = "") -> EvalReport:
    """Metrics of one model on one client's (scaled) test set, in kWh."""
    if len(test) == 0:
        raise ValueError("empty test set")
    return _report(prediction_stats(arch, params, test, scaler), test.horizon, "per-client", model_tag)


def evaluate_clients(arch, params, clients, split: str = "test", model_tag: str = "") -> EvalReport:
    """Pooled metrics over several clients plus a per-client breakdown."""
    per, stats = [], []
    for c in sorted(clients, key=lambda c: c.client_id):
        s = prediction_stats(arch, params, getattr(c, split), c.scaler)
        stats.append(s)
        per.append(
            {
                "client_id": c.client_id,
                "household_id": c.household_id,
                "mape_pct": s.mape,
                "cv_rmse_pct": s.cv_rmse,
                "rmse": s.rmse,
                "n_points": s.n_points,
                "n_excluded": s.n_excluded,
            }
        )
    return _report(sum_stats(stats), arch.horizon, "global", model_tag, per)


# ---------------------------------------------------------------------------
# run comparison
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("train_loss", "val_mape", "val_cv_rmse", "test_mape", "test_cv_rmse")
COMPARE_METRICS = METRIC_COLUMNS + ("uplink_bytes",)


def _delta(a, b):
    if a is None or b is None:
        return None
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return 0.0
    return b - a


def compare_runs(histories) -> dict:
    """Align histories round by round; deltas are relative to the first run.

    Returns ``{"rounds": [...], "summary": [...]}``; each round row holds
    ``<label>.<metric>`` values and ``delta.<label>.<metric>`` differences.
    """
    if not histories:
        raise ValueError("no histories to compare")
    ref = histories[0]
    for h in histories[1:]:
        if h.horizon != ref.horizon:
            raise SchemaMismatch(f"horizon {h.horizon} != {ref.horizon}")
        if tuple(h.columns) != tuple(ref.columns):
            raise SchemaMismatch("history columns differ")
    labels = []
    for i, h in enumerate(histories):
        lab = h.label or f"run{i}"
        labels.append(lab if lab not in labels else f"{lab}#{i}")
    by_round = [{(r["round"], r.get("cluster_id", -1)): r for r in h.rows} for h in histories]
    keys = sorted(set().union(*[set(b) for b in by_round]))
    table = []
    for rnd in keys:
        row = {"round": rnd[0], "cluster_id": rnd[1]}
        base = by_round[0].get(rnd)
        for lab, b in zip(labels, by_round):
            cur = b.get(rnd)
            for m in COMPARE_METRICS:
                row[f"{lab}.{m}"] = None if cur is None else cur[m]
        for lab, b in zip(labels[1:], by_round[1:]):
            cur = b.get(rnd)
            for m in COMPARE_METRICS:
                row[f"delta.{lab}.{m}"] = None if base is None or cur is None else _delta(base[m], cur[m])
        table.append(row)
    summary = []
    for lab, h in zip(labels, histories):
        last = h.rows[-1]
        summary.append(
            {
                "label": lab,
                "final_round": last["round"],
                "test_mape": last["test_mape"],
                "test_cv_rmse": last["test_cv_rmse"],
                "total_uplink_bytes": sum(r["uplink_bytes"] for r in h.rows),
            }
        )
    return {"horizon": ref.horizon, "rounds": table, "summary": summary}


def max_abs_delta(comparison: dict, metrics=METRIC_COLUMNS) -> float:
    """Largest |delta| over the given metric columns (bytes excluded by default)."""
    worst = 0.0
    for row in comparison["rounds"]:
        for k, v in row.items():
            if k.startswith("delta.") and k.rsplit(".", 1)[1] in metrics and v is not None:
                worst = max(worst, abs(v))
    return worst


def comparison_to_csv(comparison: dict) -> str:
    rows = comparison["rounds"]
    out = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return out.getvalue()
