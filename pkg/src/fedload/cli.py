"""Command line entry point: ``fedload <subcommand> [options]``.

Subcommands: gen-data, simulate, serve, client, evaluate, compare.
Options can also come from ``--config FILE`` (a JSON object of option names,
or a ``manifest.json`` written by an earlier run); explicit flags win.

Exit status: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import struct
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import ClusterConfig, run_clustered_federation
from .dataset import generate_regimes, generate_synthetic, parse_readings, parse_weather, prepare_clients, write_readings, write_weather
from .errors import FedloadError
from .fedcore import Federation, FederationConfig, RoundHistory, local_clients, train_centralized
from .metrics import compare_runs, comparison_to_csv, evaluate_clients
from .model import ModelArch, ParamVector, layout_hash
from .privacy import DEFAULT_QUANT_SCALE, PrivacyConfig

log = logging.getLogger("fedload")

MODEL_MAGIC = b"FLMB"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _batch(text):
    if text in ("full", "none", "0"):
        return None
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("batch must be a positive integer or 'full'")
    return v


def _fractions(text):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected train,val,test")
    return parts


def _address(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError("expected HOST:PORT")
    return f"{host}:{int(port)}"


# name -> (default, argparse kwargs). Names double as config-file keys.
DATA_OPTIONS = {
    "readings": (None, dict(help="readings CSV (default: synthetic data)")),
    "weather": (None, dict(help="weather CSV (required with --readings)")),
    "format": ("canonical", dict(choices=["canonical", "lcl"], help="readings CSV dialect")),
    "clients": (20, dict(type=int, help="number of clients (households)")),
    "days": (60, dict(type=int, help="days of synthetic data")),
    "regime": ("mixed", dict(choices=["mixed", "heating", "flat", "regimes"], help="synthetic population")),
    "window": (48, dict(type=int, help="input window W in half-hours")),
    "horizon": (1, dict(type=int, help="forecast horizon H in half-hours")),
    "stride": (1, dict(type=int)),
    "split": ([0.8, 0.1, 0.1], dict(type=_fractions, metavar="TR,VA,TE", help="chronological split fractions")),
    "gap_policy": ("ffill", dict(choices=["ffill", "drop"])),
}
MODEL_OPTIONS = {
    "model": ("linear", dict(choices=["linear", "lstm"])),
    "hidden": (32, dict(type=int, help="LSTM hidden size")),
    "seed": (0, dict(type=int)),
}
TRAIN_OPTIONS = {
    "rounds": (10, dict(type=int, help="maximum rounds R")),
    "fraction": (1.0, dict(type=float, help="participation fraction C")),
    "local_epochs": (3, dict(type=int, help="local epochs E")),
    "batch": (32, dict(type=_batch, help="local batch size B, or 'full'")),
    "lr": (0.01, dict(type=float, help="local learning rate")),
    "server_lr": (1.0, dict(type=float)),
    "target_mape": (None, dict(type=float, help="stop once validation MAPE reaches this")),
    "failure_policy": ("abort", dict(choices=["abort", "drop"])),
    "dp_clip": (None, dict(type=float, help="clip norm S")),
    "dp_noise": (0.0, dict(type=float, help="noise multiplier z (sigma = z*S)")),
    "topk": (None, dict(type=float, help="top-k ratio rho")),
    "secure_agg": (False, dict(action="store_true", help="pairwise-masked aggregation")),
    "mask_bits": (64, dict(type=int)),
    "quant_scale": (DEFAULT_QUANT_SCALE, dict(type=float)),
    "pair_secret": (0, dict(type=int, help="secret shared among clients for mask seeds")),
    "cluster_after": (None, dict(type=int, metavar="ROUNDS", help="cluster clients after this many warm-up rounds")),
    "cluster_threshold": (None, dict(type=float)),
    "cluster_k": (None, dict(type=int, help="number of clusters (instead of a threshold)")),
    "cluster_metric": ("euclidean", dict(choices=["euclidean", "cosine"])),
    "cluster_linkage": ("average", dict(choices=["single", "complete", "average"])),
}
NET_OPTIONS = {
    "round_timeout": (60.0, dict(type=float, help="seconds to wait for replies each round")),
    "join_timeout": (None, dict(type=float)),
}


def _add(parser, table):
    for name, (_default, kw) in table.items():
        parser.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedload", description="Federated household load forecasting.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"fedload {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write synthetic readings and weather CSVs")
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None)
    _add(g, {k: DATA_OPTIONS[k] for k in ("clients", "days", "regime")})
    _add(g, {"seed": MODEL_OPTIONS["seed"]})

    s = sub.add_parser("simulate", help="in-process federation plus centralized baseline")
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--no-baseline", dest="no_baseline", action="store_true", default=argparse.SUPPRESS)
    _add(s, DATA_OPTIONS)
    _add(s, MODEL_OPTIONS)
    _add(s, TRAIN_OPTIONS)

    v = sub.add_parser("serve", help="parameter server for networked clients")
    v.add_argument("--out", required=True)
    v.add_argument("--config", default=None)
    v.add_argument("--bind", type=_address, default=argparse.SUPPRESS, help="HOST:PORT (default 127.0.0.1:7878)")
    _add(v, {k: DATA_OPTIONS[k] for k in ("clients", "window", "horizon")})
    _add(v, MODEL_OPTIONS)
    _add(v, TRAIN_OPTIONS)
    _add(v, NET_OPTIONS)

    c = sub.add_parser("client", help="networked client holding one household's data")
    c.add_argument("--server", type=_address, required=True)
    c.add_argument("--client-id", dest="client_id", type=int, required=True)
    c.add_argument("--household", default=None, help="household id (default: the client-id-th in sorted order)")
    c.add_argument("--config", default=None)
    c.add_argument("--retries", type=int, default=5)
    _add(c, DATA_OPTIONS)
    _add(c, MODEL_OPTIONS)
    _add(c, {"pair_secret": TRAIN_OPTIONS["pair_secret"]})

    e = sub.add_parser("evaluate", help="score a saved model on every client's split")
    e.add_argument("model_file")
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--on", dest="on_split", choices=["train", "val", "test"], default="test")
    _add(e, DATA_OPTIONS)
    _add(e, {"seed": MODEL_OPTIONS["seed"]})

    k = sub.add_parser("compare", help="align histories round by round")
    k.add_argument("histories", nargs="+", help="history JSON files; the first is the reference")
    k.add_argument("--out", required=True)
    return p


def _defaults(*tables):
    out = {}
    for t in tables:
        out.update({k: d for k, (d, _) in t.items()})
    return out


def resolve(ns, *tables) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = _defaults(*tables)
    if getattr(ns, "config", None):
        with open(ns.config) as fh:
            loaded = json.load(fh)
        if "config" in loaded and isinstance(loaded["config"], dict) and "tool" in loaded:
            # a manifest: take what this subcommand understands
            loaded = {k: v for k, v in loaded["config"].items() if k in cfg}
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for k in cfg:
        if hasattr(ns, k):
            cfg[k] = getattr(ns, k)
    return cfg


# ---------------------------------------------------------------------------
# config translation
# ---------------------------------------------------------------------------


def arch_from(opts, n_features=7) -> ModelArch:
    return ModelArch(opts["model"], n_features, opts["window"], opts["horizon"], opts["hidden"])


def federation_config(opts, m) -> FederationConfig:
    return FederationConfig(
        arch=arch_from(opts),
        m=m,
        fraction=opts["fraction"],
        local_epochs=opts["local_epochs"],
        batch_size=opts["batch"],
        lr=opts["lr"],
        rounds_max=opts["rounds"],
        target_mape=opts["target_mape"],
        seed=opts["seed"],
        server_lr=opts["server_lr"],
        failure_policy=opts["failure_policy"],
        privacy=PrivacyConfig(
            clip_norm=opts["dp_clip"],
            noise_multiplier=opts["dp_noise"],
            secure_agg=opts["secure_agg"],
            topk_ratio=opts["topk"],
            mask_bits=opts["mask_bits"],
            quant_scale=opts["quant_scale"],
            pair_secret=opts["pair_secret"],
        ),
    )


def cluster_config(opts) -> ClusterConfig | None:
    if opts["cluster_after"] is None:
        if opts["cluster_threshold"] is not None or opts["cluster_k"] is not None:
            raise UsageError("--cluster-threshold/--cluster-k need --cluster-after")
        return None
    threshold, k = opts["cluster_threshold"], opts["cluster_k"]
    if threshold is None and k is None:
        k = 2
    return ClusterConfig(opts["cluster_after"], opts["cluster_metric"], opts["cluster_linkage"], threshold, k)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def synthetic(opts):
    n, days, seed = opts["clients"], opts["days"], opts["seed"]
    if opts["regime"] == "regimes":
        if n % 2:
            raise FedloadError("--regime regimes needs an even number of clients")
        readings, weather, _ = generate_regimes(n // 2, days, seed)
        return readings, weather
    return generate_synthetic(n, days, seed, regime=opts["regime"])


def input_digests(opts) -> dict:
    if opts["readings"] is None:
        return {"synthetic": {k: opts[k] for k in ("clients", "days", "seed", "regime")}}
    if opts["weather"] is None:
        raise UsageError("--readings needs --weather")
    return {
        "readings": {"path": os.path.abspath(opts["readings"]), "sha256": sha256_file(opts["readings"])},
        "weather": {"path": os.path.abspath(opts["weather"]), "sha256": sha256_file(opts["weather"])},
    }


def check_digests(expected: dict | None, opts):
    if not expected:
        return
    actual = input_digests(opts)
    for key in ("readings", "weather"):
        if key in expected and key in actual and expected[key]["sha256"] != actual[key]["sha256"]:
            raise FedloadError(f"{key} file {actual[key]['path']} differs from the one recorded in the manifest")


def load_readings(opts):
    if opts["readings"] is None:
        return synthetic(opts)
    if opts["weather"] is None:
        raise UsageError("--readings needs --weather")
    with open(opts["readings"], newline="") as fh:
        readings = parse_readings(fh, format=opts["format"])
    with open(opts["weather"], newline="") as fh:
        weather = parse_weather(fh)
    if readings.skip_count:
        log.warning("skipped %d malformed reading rows", readings.skip_count)
    return readings, weather


def select_households(readings, opts):
    ids = readings.household_ids
    if opts["readings"] is not None and opts["clients"] is not None and opts["clients"] < len(ids):
        readings = readings.subset(ids[: opts["clients"]])
    return readings


def load_clients(opts):
    readings, weather = load_readings(opts)
    readings = select_households(readings, opts)
    return prepare_clients(
        readings, weather, opts["window"], opts["horizon"], opts["stride"], tuple(opts["split"]), opts["gap_policy"]
    )


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def write_text(out: Path, name: str, text: str):
    (out / name).write_text(text, encoding="utf-8", newline="")


def write_manifest(out: Path, command, opts, artifacts, extra=None):
    manifest = {
        "tool": "fedload",
        "version": __version__,
        "command": command,
        "seed": opts.get("seed"),
        "config": opts,
        "inputs": input_digests(opts) if "readings" in opts else {},
        "artifacts": artifacts,
    }
    manifest.update(extra or {})
    write_text(out, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def write_history(out: Path, history: RoundHistory, stem="history"):
    write_text(out, f"{stem}.csv", history.to_csv())
    write_text(out, f"{stem}.json", history.to_json() + "\n")


def encode_model(arch: ModelArch, vectors, meta: dict) -> bytes:
    """``u32 header_len | JSON header | per vector: u32 count | count x f64`` (little-endian)."""
    layout = arch.layout()
    header = {
        "format": "fedload-model",
        "version": 1,
        "arch": arch.to_dict(),
        "layout": [[s.name, s.offset, list(s.shape)] for s in layout],
        "layout_hash": layout_hash(layout),
        "n_vectors": len(vectors),
        **meta,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<I", len(raw)), raw]
    for v in vectors:
        vals = v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)
        parts.append(struct.pack("<I", vals.shape[0]))
        parts.append(vals.astype("<f8").tobytes())
    return b"".join(parts)


def decode_model(data: bytes):
    if data[:4] != MODEL_MAGIC:
        raise FedloadError("not a fedload model file")
    (n,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + n].decode("utf-8"))
    arch = ModelArch(**header["arch"])
    if layout_hash(arch.layout()) != header["layout_hash"]:
        raise FedloadError("model file layout hash does not match its architecture")
    pos, vectors = 8 + n, []
    for _ in range(header["n_vectors"]):
        (d,) = struct.unpack_from("<I", data, pos)
        pos += 4
        vals = np.frombuffer(data, dtype="<f8", count=d, offset=pos).astype(np.float64)
        pos += 8 * d
        vectors.append(ParamVector(vals, arch.layout()))
    if pos != len(data):
        raise FedloadError("trailing bytes in model file")
    return arch, vectors, header


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(ns) -> int:
    tables = {k: DATA_OPTIONS[k] for k in ("clients", "days", "regime")}
    opts = resolve(ns, tables, {"seed": MODEL_OPTIONS["seed"]})
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"readings": "readings.csv", "weather": "weather.csv"}
    if opts["regime"] == "regimes":
        artifacts["labels"] = "labels.csv"
    if opts["regime"] == "regimes" and opts["clients"] % 2:
        raise FedloadError("--regime regimes needs an even number of clients")
    write_manifest(out, "gen-data", opts, artifacts)
    if opts["regime"] == "regimes":
        readings, weather, labels = generate_regimes(opts["clients"] // 2, opts["days"], opts["seed"])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["household_id", "regime"])
        for hid in sorted(labels):
            w.writerow([hid, labels[hid]])
        write_text(out, "labels.csv", buf.getvalue())
    else:
        readings, weather = generate_synthetic(opts["clients"], opts["days"], opts["seed"], regime=opts["regime"])
    write_text(out, "readings.csv", write_readings(readings))
    write_text(out, "weather.csv", write_weather(weather))
    print(f"wrote {readings.n_readings} readings for {len(readings)} households to {out}")
    return 0


def _run_training(fed_cfg, clients, cluster_cfg):
    handles = local_clients(clients, fed_cfg)
    if cluster_cfg is None:
        fed = Federation(fed_cfg, handles)
        return fed.run(), [fed.global_params], None
    run = run_clustered_federation(fed_cfg, handles, cluster_cfg)
    return run.history, [f.global_params for f in run.federations], run.assignment


def _model_meta(opts, clients, assignment):
    return {
        "data": {k: opts[k] for k in ("window", "horizon", "stride", "split", "gap_policy")},
        "households": [c.household_id for c in sorted(clients, key=lambda c: c.client_id)],
        "clusters": None if assignment is None else assignment.groups(),
    }


def _write_clusters(out, assignment):
    write_text(out, "clusters.csv", assignment.to_csv())
    write_text(out, "merges.json", assignment.merge_trace_json() + "\n")


def cmd_simulate(ns) -> int:
    opts = resolve(ns, DATA_OPTIONS, MODEL_OPTIONS, TRAIN_OPTIONS, {"no_baseline": (False, {})})
    if ns.config:
        with open(ns.config) as fh:
            prior = json.load(fh)
        check_digests(prior.get("inputs") if "tool" in prior else None, opts)
    cluster_cfg = cluster_config(opts)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"history": ["history.csv", "history.json"], "model": "model.bin"}
    if cluster_cfg is not None:
        artifacts["clusters"] = ["clusters.csv", "merges.json"]
    if not opts["no_baseline"]:
        artifacts["baseline"] = ["baseline_history.csv", "baseline_history.json", "baseline_model.bin"]
        artifacts["comparison"] = ["comparison.csv", "comparison.json"]
    write_manifest(out, "simulate", opts, artifacts)

    clients = load_clients(opts)
    fed_cfg = federation_config(opts, len(clients))
    history, vectors, assignment = _run_training(fed_cfg, clients, cluster_cfg)
    write_history(out, history)
    (out / "model.bin").write_bytes(encode_model(fed_cfg.arch, vectors, _model_meta(opts, clients, assignment)))
    if assignment is not None:
        _write_clusters(out, assignment)
    final = history.rows[-1]
    print(f"federated: round {final['round']} val MAPE {final['val_mape']:.4f} test MAPE {final['test_mape']:.4f}")
    if not opts["no_baseline"]:
        params, baseline = train_centralized(fed_cfg, clients)
        write_history(out, baseline, "baseline_history")
        (out / "baseline_model.bin").write_bytes(encode_model(fed_cfg.arch, [params], _model_meta(opts, clients, None)))
        cmp = compare_runs([baseline, history])
        write_text(out, "comparison.csv", comparison_to_csv(cmp))
        write_text(out, "comparison.json", json.dumps(_json_safe(cmp), indent=2, allow_nan=False) + "\n")
        b = baseline.rows[-1]
        print(f"centralized: round {b['round']} val MAPE {b['val_mape']:.4f} test MAPE {b['test_mape']:.4f}")
    return 0


def _json_safe(obj):
    """NaN and infinities become null so the output stays strict JSON."""
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _split_address(text):
    host, _, port = text.rpartition(":")
    return host, int(port)


def cmd_serve(ns) -> int:
    from .net import serve

    # a silent client should not stall a live deployment, so drop is the default here
    train = {**TRAIN_OPTIONS, "failure_policy": ("drop", TRAIN_OPTIONS["failure_policy"][1])}
    tables = ({k: DATA_OPTIONS[k] for k in ("clients", "window", "horizon")}, MODEL_OPTIONS, train, NET_OPTIONS)
    opts = resolve(ns, *tables, {"bind": ("127.0.0.1:7878", {})})
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    cluster_cfg = cluster_config(opts)
    artifacts = {"history": ["history.csv", "history.json"], "model": "model.bin"}
    if cluster_cfg is not None:
        artifacts["clusters"] = ["clusters.csv", "merges.json"]
    write_manifest(out, "serve", opts, artifacts)
    fed_cfg = federation_config(opts, opts["clients"])

    def ready(addr):
        print(f"listening on {addr[0]}:{addr[1]}", flush=True)

    result = serve(
        fed_cfg,
        _split_address(opts["bind"]),
        round_timeout=opts["round_timeout"],
        join_timeout=opts["join_timeout"],
        cluster_cfg=cluster_cfg,
        on_ready=ready,
    )
    write_history(out, result.history)
    vectors = result.params if isinstance(result.params, list) else [result.params]
    meta = {"clusters": None if result.assignment is None else result.assignment.groups()}
    (out / "model.bin").write_bytes(encode_model(fed_cfg.arch, vectors, meta))
    if result.assignment is not None:
        _write_clusters(out, result.assignment)
    final = result.history.rows[-1]
    print(f"federated: round {final['round']} val MAPE {final['val_mape']:.4f}")
    return 0


def cmd_client(ns) -> int:
    from .net import run_client

    opts = resolve(ns, DATA_OPTIONS, MODEL_OPTIONS, {"pair_secret": TRAIN_OPTIONS["pair_secret"]})
    readings, weather = load_readings(opts)
    ids = readings.household_ids
    hid = ns.household
    if hid is None:
        if not 0 <= ns.client_id < len(ids):
            raise FedloadError(f"client id {ns.client_id} out of range for {len(ids)} households")
        hid = ids[ns.client_id]
    elif hid not in ids:
        raise FedloadError(f"household {hid!r} not in the readings")
    (data,) = prepare_clients(
        readings.subset([hid]), weather, opts["window"], opts["horizon"], opts["stride"], tuple(opts["split"]), opts["gap_policy"]
    )
    data = replace(data, client_id=ns.client_id)
    arch = arch_from(opts, data.train.features.shape[2])
    return run_client(_split_address(ns.server), data, arch=arch, pair_secret=opts["pair_secret"], retries=ns.retries)


def cmd_evaluate(ns) -> int:
    arch, vectors, header = decode_model(Path(ns.model_file).read_bytes())
    data_defaults = dict(DATA_OPTIONS)
    if "data" in header:
        # the model remembers how its windows were built
        for k, v in header["data"].items():
            data_defaults[k] = (v, data_defaults[k][1])
    opts = resolve(ns, data_defaults, {"seed": MODEL_OPTIONS["seed"]})
    if (opts["window"], opts["horizon"]) != (arch.window, arch.horizon):
        raise FedloadError(f"model expects W={arch.window}, H={arch.horizon}")
    clients = load_clients(opts)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "evaluate", {**opts, "model_file": os.path.abspath(ns.model_file), "on": ns.on_split}, {"report": ["eval.json", "eval.csv"]})
    groups = header.get("clusters") or [[c.client_id for c in clients]]
    if len(groups) != len(vectors):
        raise FedloadError("model file cluster list does not match its vectors")
    by_id = {c.client_id: c for c in clients}
    reports = []
    for k, (members, params) in enumerate(zip(groups, vectors)):
        chosen = [by_id[c] for c in members if c in by_id]
        if not chosen:
            continue
        rep = evaluate_clients(arch, params, chosen, split=ns.on_split, model_tag=f"{Path(ns.model_file).name}#{k}")
        reports.append(rep)
    payload = [r.to_dict() for r in reports]
    write_text(out, "eval.json", json.dumps(payload if len(payload) > 1 else payload[0], indent=2, sort_keys=True) + "\n")
    write_text(out, "eval.csv", "".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(reports)))
    for r in reports:
        print(f"{r.model_tag}: MAPE {r.mape_pct:.4f}% CV-RMSE {r.cv_rmse_pct:.4f}% over {r.n_points} points")
    return 0


def cmd_compare(ns) -> int:
    histories = []
    for path in ns.histories:
        with open(path) as fh:
            histories.append(RoundHistory.from_json(fh.read()))
    cmp = compare_runs(histories)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out, "comparison.csv", comparison_to_csv(cmp))
    write_text(out, "comparison.json", json.dumps(_json_safe(cmp), indent=2, allow_nan=False) + "\n")
    for s in cmp["summary"]:
        print(f"{s['label']}: round {s['final_round']} test MAPE {s['test_mape']:.4f} uplink {s['total_uplink_bytes']} B")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "simulate": cmd_simulate,
    "serve": cmd_serve,
    "client": cmd_client,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * ns.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fedload: error: {exc}", file=sys.stderr)
        return 1
    except (FedloadError, OSError, ValueError) as exc:
        print(f"fedload: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
