"""Acceptance gate. Each test carries a ``criterion`` marker; the conftest
prints one PASS/FAIL line per criterion at the end of the run."""

import csv
import io
import json
import math
import threading
import time
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest

from fedload import _rng
from fedload.cli import main
from fedload.clustering import ClusterConfig, agglomerate, collect_warmup_updates, pairwise_distances, run_clustered_federation
from fedload.dataset import SampleSet, generate_regimes, generate_synthetic, prepare_clients
from fedload.errors import BadMagic, CodecError, CrcMismatch, MalformedMessage, Truncated, UnknownType
from fedload.fedcore import Federation, FederationConfig, local_clients, pooled_train, run_federation, train_centralized
from fedload.metrics import compare_runs, cv_rmse, evaluate_clients, mape, max_abs_delta
from fedload.model import ClientUpdate, ModelArch, ParamVector, gradient, finite_diff_gradient, init_params, layout_from_shapes
from fedload.net import codec
from fedload.net.codec import Ack, Assign, Bye, Join, Report, Update, decode, encode
from fedload.net.runtime import run_client, serve
from fedload.privacy import (
    PrivacyConfig,
    clip_update,
    densify,
    mask_one,
    pair_seeds_for,
    payload_bytes,
    privatize,
    quantize,
    secure_mask,
    secure_unmask_sum,
    sparsify_topk,
    decode_signed,
    masked_sum,
)

criterion = pytest.mark.criterion


def _vec(values):
    values = np.asarray(values, dtype=np.float64)
    return ParamVector(values, layout_from_shapes([("v", (values.shape[0],))]))


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


# ---------------------------------------------------------------------------
# 1
# ---------------------------------------------------------------------------


@criterion(1, "analytic gradients match central finite differences (25 seeds, linear < 1e-6, LSTM < 1e-4, < 1 min)")
def test_criterion_01_gradient_check():
    t0 = time.perf_counter()
    worst = {"linear": 0.0, "lstm": 0.0}
    for seed in range(25):
        rng = np.random.default_rng(seed)
        w = int(rng.integers(2, 13))
        f = int(rng.integers(1, 8))
        h = int(rng.integers(1, 4))
        n = int(rng.integers(2, 9))
        batch = SampleSet(rng.normal(size=(n, w, f)), rng.normal(size=(n, h)), np.zeros(n, dtype=np.int64))
        for kind, hidden in (("linear", 1), ("lstm", int(rng.integers(2, 17)))):
            arch = ModelArch(kind, f, w, h, hidden)
            params = init_params(arch, seed)
            if kind == "linear":
                params = params.with_values(rng.normal(size=params.dim))
            analytic = gradient(arch, params, batch).values
            numeric = finite_diff_gradient(arch, params, batch).values
            worst[kind] = max(worst[kind], _rel_err(analytic, numeric))
    elapsed = time.perf_counter() - t0
    assert worst["linear"] < 1e-6, worst
    assert worst["lstm"] < 1e-4, worst
    assert elapsed < 60, elapsed


# ---------------------------------------------------------------------------
# 2
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def four_disjoint_clients():
    readings, weather = generate_synthetic(4, 10, seed=21)
    return prepare_clients(readings, weather, window=24, horizon=1)


@criterion(2, "FedAvg with C=1, E=1, full batch equals centralized full-batch GD (1e-9)")
def test_criterion_02_fedavg_matches_centralized(four_disjoint_clients):
    clients = four_disjoint_clients
    assert len({c.household_id for c in clients}) == 4
    arch = ModelArch("linear", 7, 24, 1)
    cfg = FederationConfig(arch=arch, m=4, fraction=1.0, local_epochs=1, batch_size=None, lr=0.01, rounds_max=10, seed=3)
    fed = Federation(cfg, local_clients(clients, cfg))
    fed_hist = fed.run()
    central_params, central_hist = train_centralized(cfg, clients)

    # independent route: explicit gradient descent on the pooled set
    pooled = pooled_train(clients)
    p = init_params(arch, cfg.seed)
    for _ in range(10):
        p = p - gradient(arch, p, pooled).scale(cfg.lr)

    v = fed.global_params.values
    for ref in (central_params.values, p.values):
        assert np.all(np.abs(v - ref) <= 1e-9 * (1 + np.abs(ref)))
    cmp = compare_runs([central_hist, fed_hist])
    assert len(cmp["rounds"]) == 11
    assert max_abs_delta(cmp) < 1e-9


# ---------------------------------------------------------------------------
# 3
# ---------------------------------------------------------------------------


@criterion(3, "learning signal: val MAPE falls and trailing-5 train-loss mean never rises (20 clients, 60 days, 50 rounds, < 2 min)")
def test_criterion_03_learning_signal():
    t0 = time.perf_counter()
    readings, weather = generate_synthetic(20, 60, seed=2024)
    clients = prepare_clients(readings, weather)
    cfg = FederationConfig(m=20, fraction=0.5, local_epochs=2, batch_size=None, lr=0.01, rounds_max=50, seed=0)
    hist = run_federation(cfg, clients)
    elapsed = time.perf_counter() - t0
    assert len(hist) == 51
    assert hist.rows[-1]["val_mape"] < hist.rows[0]["val_mape"]
    loss = np.array(hist.column("train_loss"))
    trailing = np.convolve(loss, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(trailing) <= 0), np.diff(trailing).max()
    assert elapsed < 120, elapsed


# ---------------------------------------------------------------------------
# 4
# ---------------------------------------------------------------------------


@criterion(4, "secure aggregation: unmasked sum equals the quantised sum exactly; real sum within n/(2q)")
@pytest.mark.parametrize("m", [2, 3, 5, 8])
def test_criterion_04_secure_aggregation(m):
    q = 2.0**20
    for trial in range(5):
        rng = np.random.default_rng(1000 * m + trial)
        d = int(rng.integers(1, 50))
        deltas = {cid: rng.normal(scale=10.0, size=d) for cid in range(m)}
        seeds = pair_seeds_for(range(m), secret=int(rng.integers(2**63)), round_=trial)
        masked = secure_mask(deltas, seeds, q, 64)
        # no single masked vector equals its quantised input
        for u in masked:
            assert not np.array_equal(u.masked, quantize(deltas[u.client_id], q).astype(np.uint64))
        ints = decode_signed(masked_sum(masked), 64)
        expected = sum(quantize(deltas[c], q) for c in range(m))
        assert np.array_equal(ints, expected)
        plain = sum(deltas[c] for c in range(m))
        recovered = secure_unmask_sum(masked, q).values
        assert np.all(np.abs(recovered - plain) <= m / (2 * q))


# ---------------------------------------------------------------------------
# 5
# ---------------------------------------------------------------------------


@criterion(5, "DP: clipped norm <= S + 1e-12; noise std within 3% of z*S over 1e4 draws; z = 0 is the identity")
def test_criterion_05_dp_pipeline():
    rng = np.random.default_rng(5)
    for _ in range(2000):
        d = int(rng.integers(1, 40))
        v = rng.normal(size=d) * 10.0 ** rng.uniform(-6, 6)
        s = 10.0 ** rng.uniform(-4, 4)
        assert clip_update(_vec(v), s).norm() <= s + 1e-12

    clip, z = 0.5, 1.3
    sigma = z * clip
    cfg = PrivacyConfig(clip_norm=clip, noise_multiplier=z)
    d = 6
    tiny = ClientUpdate(0, _vec(np.full(d, 1e-3)), 10)
    draws = np.stack(
        [privatize(tiny, cfg, _rng.derive_rng(9, _rng.NOISE, 0, r)).delta.values for r in range(10_000)]
    )
    std = draws.std(axis=0)
    assert np.all(np.abs(std - sigma) <= 0.03 * sigma), std

    off = PrivacyConfig(noise_multiplier=0.0)
    for _ in range(100):
        upd = ClientUpdate(1, _vec(rng.normal(size=9)), 4)
        out = privatize(upd, off, np.random.default_rng(0))
        assert out.delta == upd.delta and out.sample_count == upd.sample_count


# ---------------------------------------------------------------------------
# 6
# ---------------------------------------------------------------------------


@criterion(6, "top-k: identity at rho=1, brute-force optimal kept set (d <= 12), exact payload formulas")
def test_criterion_06_sparsification():
    rng = np.random.default_rng(6)
    for _ in range(200):
        d = int(rng.integers(1, 13))
        v = np.round(rng.normal(size=d), int(rng.integers(0, 3)))  # rounding makes magnitude ties common
        full = densify(sparsify_topk(_vec(v), 1.0))
        assert np.array_equal(full.values, v)
        ratio = float(rng.uniform(0.01, 1.0))
        sp = sparsify_topk(_vec(v), ratio)
        k = math.ceil(ratio * d - 1e-9)
        assert sp.k == max(1, k)
        # fsum is correctly rounded, so equal multisets give equal sums
        best = max(math.fsum(abs(v[i]) for i in s) for s in combinations(range(d), sp.k))
        assert math.fsum(np.abs(sp.values)) == best

    for d in (1, 3, 17, 250):
        vec = _vec(rng.normal(size=d))
        dense = ClientUpdate(2, vec, 7)
        assert payload_bytes(dense) == 8 * d + 35
        assert len(encode(Update.from_payload(1, dense))) == 8 * d + 35
        sp = sparsify_topk(vec, 0.3, 7, 2)
        assert payload_bytes(sp) == 12 * sp.k + 35
        assert len(encode(Update.from_payload(1, sp))) == 12 * sp.k + 35
        for bits in (16, 32, 64):
            m = mask_one(0, vec.values * 1e-3, [0, 1], pair_seeds_for([0, 1], 1, 1), 2.0**10, bits, 7)
            assert payload_bytes(m) == (bits // 8) * d + 35
        m64 = mask_one(0, vec.values, [0, 1], pair_seeds_for([0, 1], 1, 1), 2.0**20, 64, 7)
        assert len(encode(Update.from_payload(1, m64))) == 8 * d + 35


# ---------------------------------------------------------------------------
# 7
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def regimes():
    readings, weather, labels = generate_regimes(5, 30, seed=3)
    clients = prepare_clients(readings, weather)
    truth = {c.client_id: labels[c.household_id] for c in clients}
    return clients, truth


@criterion(7, "clustering recovers two regimes for every linkage after 1 warm-up round; per-cluster MAPE <= unclustered")
def test_criterion_07_clustering_recovery(regimes):
    clients, truth = regimes
    cfg = FederationConfig(m=len(clients), fraction=1.0, local_epochs=1, batch_size=None, lr=0.005, rounds_max=20, seed=0)
    warm = Federation(cfg, local_clients(clients, cfg))
    updates = collect_warmup_updates(warm, 1)
    D = pairwise_distances(updates)
    ids = sorted(updates)
    lab = np.array([truth[i] for i in ids])
    same = np.equal.outer(lab, lab)
    off_diag = ~np.eye(len(ids), dtype=bool)
    ratio = D[~same].mean() / D[same & off_diag].mean()
    assert ratio > 3, ratio
    groups_truth = sorted(sorted(i for i in ids if truth[i] == r) for r in (0, 1))

    plain = Federation(cfg, local_clients(clients, cfg))
    plain.run()
    by_id = {c.client_id: c for c in clients}
    for linkage in ("single", "complete", "average"):
        assignment = agglomerate(D, linkage, n_clusters=2, ids=ids)
        assert sorted(assignment.groups()) == groups_truth, linkage
        run = run_clustered_federation(cfg, local_clients(clients, cfg), ClusterConfig(1, "euclidean", linkage, n_clusters=2))
        assert sorted(run.assignment.groups()) == groups_truth
        for sub in run.federations:
            members = [by_id[c] for c in sub.member_ids]
            clustered = evaluate_clients(cfg.arch, sub.global_params, members).mape_pct
            unclustered = evaluate_clients(cfg.arch, plain.global_params, members).mape_pct
            assert clustered <= unclustered, (linkage, sub.member_ids, clustered, unclustered)


# ---------------------------------------------------------------------------
# 8
# ---------------------------------------------------------------------------


def _loopback(cfg, clients, pair_secret=0):
    ready = threading.Event()
    box = {}

    def server():
        box["result"] = serve(cfg, round_timeout=30, join_timeout=30, on_ready=lambda a: (box.update(addr=a), ready.set()))

    t = threading.Thread(target=server)
    t.start()
    assert ready.wait(10)
    codes = []
    threads = [threading.Thread(target=lambda c=c: codes.append(run_client(box["addr"], c, pair_secret=pair_secret))) for c in clients]
    for th in threads:
        th.start()
    for th in threads:
        th.join(60)
    t.join(60)
    return box["result"], codes


def _valid_messages(rng):
    d = int(rng.integers(0, 20))
    k = int(rng.integers(0, d + 1))
    idx = np.sort(rng.choice(max(d, 1), size=k, replace=False)) if d else np.zeros(0, dtype=np.int64)
    return [
        Join(int(rng.integers(2**32)), int(rng.integers(2**63)) * 2 + 1),
        Assign(int(rng.integers(2**32)), {"task": "train", "participants": [1, 2], "x": float(rng.normal())}, rng.normal(size=d)),
        Update(3, 1, "dense", 5, d, rng.normal(size=d)),
        Update(3, 1, "sparse", 5, d, rng.normal(size=k), idx.astype(np.int64)),
        Update(3, 1, "masked", 5, d, rng.integers(0, 2**63, size=d, dtype=np.uint64) * np.uint64(2)),
        Ack(int(rng.integers(2**32)), bool(rng.integers(2)), "stale" if rng.integers(2) else "ünïcode"),
        Bye(),
        Report(2, 7, rng.normal(size=14)),
    ]


@criterion(8, "loopback networked run == simulation (5 rounds, 3 clients); codec fuzzing never crashes and classifies errors")
def test_criterion_08_cross_mode_and_fuzz():
    readings, weather = generate_synthetic(3, 10, seed=8)
    clients = prepare_clients(readings, weather, window=24)
    arch = ModelArch("linear", 7, 24, 1)
    for privacy, fraction in ((PrivacyConfig(), 0.67), (PrivacyConfig(clip_norm=2.0, noise_multiplier=0.2), 1.0)):
        cfg = FederationConfig(arch=arch, m=3, fraction=fraction, local_epochs=1, batch_size=16, rounds_max=5, seed=4, privacy=privacy)
        sim = run_federation(cfg, clients)
        net, codes = _loopback(cfg, clients)
        assert codes == [0, 0, 0]
        assert len(net.history) == 6
        assert net.history.metric_rows() == sim.metric_rows()

    rng = np.random.default_rng(8)
    # 1e5 random byte strings: every failure must be a CodecError
    for i in range(100_000):
        n = int(rng.integers(0, 48))
        data = rng.bytes(n)
        if i % 2:
            data = codec.MAGIC + data  # get past the magic check half the time
        try:
            decode(data)
        except CodecError:
            pass

    # 1e3 mutated valid frames: the error class follows from what was changed
    valid_types = set(codec.MESSAGE_TYPES.values())
    for i in range(1000):
        msg = _valid_messages(rng)[i % 8]
        frame = bytearray(encode(msg))
        assert decode(bytes(frame)) == msg
        plen = len(frame) - 14
        mode = i % 4
        if mode == 0:  # truncate
            cut = int(rng.integers(0, len(frame)))
            with pytest.raises(Truncated):
                decode(bytes(frame[:cut]))
            continue
        if mode == 1:  # trailing garbage
            with pytest.raises(MalformedMessage):
                decode(bytes(frame) + rng.bytes(int(rng.integers(1, 8))))
            continue
        pos = int(rng.integers(0, len(frame)))
        old = frame[pos]
        frame[pos] ^= int(rng.integers(1, 256))
        data = bytes(frame)
        if pos < 4:
            expected = BadMagic
        elif pos == 4:
            expected = UnknownType if frame[4] not in valid_types else CodecError
        elif pos == 5:
            expected = MalformedMessage
        elif pos < 10:
            new_len = int.from_bytes(frame[6:10], "little")
            expected = Truncated if plen < new_len <= codec.MAX_PAYLOAD else MalformedMessage
        else:
            expected = CrcMismatch
        try:
            got = decode(data)
        except CodecError as exc:
            assert isinstance(exc, expected), (pos, old, type(exc), expected)
        else:
            # only a retyped frame whose payload happens to parse as the new type can decode
            assert pos == 4 and frame[4] in valid_types, (pos, got)


# ---------------------------------------------------------------------------
# 9
# ---------------------------------------------------------------------------


@criterion(9, "metric formulas: MAPE 58.333..., CV-RMSE 50.0, invariant under joint scaling")
def test_criterion_09_metric_formulas():
    ref_mape = float(Fraction(100, 3) * (Fraction(1, 1) + Fraction(1, 2) + Fraction(1, 4)))
    assert abs(ref_mape - 58.333333333333336) < 1e-12
    assert abs(mape([1, 2, 4], [2, 1, 5]) - ref_mape) <= 1e-9
    assert abs(cv_rmse([2, 2], [3, 1]) - 50.0) <= 1e-9
    for c in (0.5, 3.0):
        y, yhat = np.array([1.0, 2.0, 4.0]), np.array([2.0, 1.0, 5.0])
        assert abs(mape(c * y, c * yhat) - mape(y, yhat)) <= 1e-9
        y, yhat = np.array([2.0, 2.0]), np.array([3.0, 1.0])
        assert abs(cv_rmse(c * y, c * yhat) - cv_rmse(y, yhat)) <= 1e-9


# ---------------------------------------------------------------------------
# 10
# ---------------------------------------------------------------------------


def _metric_columns(path):
    rows = list(csv.reader(io.StringIO(path.read_text())))
    drop = rows[0].index("wall_time_s")
    return [[v for j, v in enumerate(r) if j != drop] for r in rows]


@criterion(10, "rerunning simulate from its manifest reproduces history metric columns and model file byte for byte")
@pytest.mark.parametrize(
    "extra",
    [
        [],
        ["--dp-clip", "1.0", "--dp-noise", "0.3", "--topk", "0.2"],
        ["--secure-agg", "--pair-secret", "77", "--batch", "full"],
        ["--regime", "regimes", "--cluster-after", "1", "--cluster-k", "2", "--model", "lstm", "--hidden", "4", "--window", "8"],
    ],
    ids=["plain", "dp-topk", "secure", "clustered-lstm"],
)
def test_criterion_10_manifest_reproducibility(tmp_path, extra):
    first, second = tmp_path / "a", tmp_path / "b"
    base = ["simulate", "--clients", "4", "--days", "6", "--rounds", "3", "--fraction", "0.5", "--seed", "7", "--window", "12"]
    assert main(base + extra + ["--out", str(first)]) == 0
    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 7
    assert main(["simulate", "--config", str(first / "manifest.json"), "--out", str(second)]) == 0
    assert _metric_columns(first / "history.csv") == _metric_columns(second / "history.csv")
    assert (first / "model.bin").read_bytes() == (second / "model.bin").read_bytes()
    assert (first / "baseline_model.bin").read_bytes() == (second / "baseline_model.bin").read_bytes()
    if "--cluster-after" in extra:
        assert (first / "clusters.csv").read_bytes() == (second / "clusters.csv").read_bytes()
