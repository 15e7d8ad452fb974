"""TCP parameter server and client built on the frame codec.

The server drives the ordinary :class:`~fedload.fedcore.Federation` loop;
only the two collection steps are replaced by a broadcast of ``Assign``
frames followed by a barrier on the replies. Clients run the same
``client_round`` / ``client_report`` functions as the simulator, so a
networked run reproduces the simulated history for the same seed.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass, field

from ..clustering import ClusterConfig, run_clustered_federation
from ..dataset import ClientData
from ..errors import ClientFailure, CodecError, ConnectionLost, FederationError
from ..fedcore import ClientReport, Federation, FederationConfig, client_report, client_round
from ..model import ModelArch, ParamVector, layout_hash
from .codec import Ack, Assign, Bye, Join, Report, Update, encode, read_frame

log = logging.getLogger(__name__)

DEFAULT_ROUND_TIMEOUT = 60.0


class _Conn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self.lock = threading.Lock()
        self.client_id: int | None = None
        self.alive = True

    def send(self, msg):
        data = encode(msg)
        with self.lock:
            self.sock.sendall(data)

    def close(self):
        self.alive = False
        # shutdown first: it wakes a reader thread blocked on rfile, whose lock rfile.close needs
        for f in (lambda: self.sock.shutdown(socket.SHUT_RDWR), self.sock.close, self.rfile.close):
            try:
                f()
            except OSError:
                pass


@dataclass
class _Pending:
    kind: str
    round: int
    expected: set
    messages: dict  # client id -> Assign frame, kept for resend on rejoin
    results: dict = field(default_factory=dict)
    sent: set = field(default_factory=set)

    def claim(self, cid) -> bool:
        """Mark ``cid``'s frame as sent; False if it already went out. Call under the lock."""
        if cid not in self.expected or cid in self.sent or cid in self.results:
            return False
        self.sent.add(cid)
        return True


class ParameterServer:
    """Accepts ``expected`` clients, then serves rounds until stopped.

    Each connection gets its own reader thread; replies are matched to the
    outstanding request by (kind, round) and anything else is refused with
    ``Ack(accepted=False)``.
    """

    def __init__(
        self,
        cfg: FederationConfig,
        bind=("127.0.0.1", 0),
        expected: int | None = None,
        round_timeout: float = DEFAULT_ROUND_TIMEOUT,
    ):
        expected = expected if expected is not None else cfg.m
        if not expected or expected < 1:
            raise FederationError("the server needs the number of clients to wait for")
        if cfg.privacy.secure_agg and cfg.privacy.mask_bits != 64:
            raise FederationError("networked secure aggregation uses 64-bit mask words")
        self.cfg = cfg
        self.expected = expected
        self.round_timeout = round_timeout
        self.layout_hash = layout_hash(cfg.arch.layout())
        self._cv = threading.Condition()
        self._conns: dict[int, _Conn] = {}
        self._pending: _Pending | None = None
        self._closing = False
        self._listener = socket.create_server(tuple(bind), reuse_port=False)
        self._listener.settimeout(0.2)
        self._accept_thread = threading.Thread(target=self._accept_loop, name="fedload-accept", daemon=True)
        self._accept_thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    # -- connection handling ------------------------------------------------

    def _accept_loop(self):
        while not self._closing:
            try:
                sock, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.settimeout(None)
            t = threading.Thread(target=self._handle, args=(_Conn(sock),), name=f"fedload-conn-{peer[1]}", daemon=True)
            t.start()

    def _register(self, conn: _Conn, join: Join) -> str | None:
        if join.layout_hash != self.layout_hash:
            return "layout mismatch"
        if not 0 <= join.client_id < self.expected:
            return "unknown client id"
        with self._cv:
            old = self._conns.get(join.client_id)
            if old is not None and old.alive:
                return "duplicate client id"
            conn.client_id = join.client_id
            self._conns[join.client_id] = conn
            self._cv.notify_all()
        return None

    def _handle(self, conn: _Conn):
        try:
            first = read_frame(conn.rfile)
            if not isinstance(first, Join):
                conn.send(Ack(0, False, "expected join"))
                return
            reason = self._register(conn, first)
            conn.send(Ack(0, reason is None, reason or ""))
            if reason:
                log.info("refused client %s: %s", first.client_id, reason)
                return
            log.info("client %s joined", first.client_id)
            self._resend_pending(conn)
            while True:
                msg = read_frame(conn.rfile)
                if msg is None or isinstance(msg, Bye):
                    break
                conn.send(self._on_message(conn, msg))
        except (CodecError, OSError) as exc:
            log.warning("connection from client %s dropped: %r", conn.client_id, exc)
        finally:
            conn.close()
            with self._cv:
                self._cv.notify_all()

    def _resend_pending(self, conn):
        with self._cv:
            p = self._pending
            msg = p.messages[conn.client_id] if p is not None and p.claim(conn.client_id) else None
        if msg is not None:
            conn.send(msg)

    def _on_message(self, conn: _Conn, msg) -> Ack:
        if isinstance(msg, Update):
            kind = "train"
        elif isinstance(msg, Report):
            kind = "report"
        else:
            return Ack(0, False, f"unexpected {type(msg).__name__}")
        if msg.client_id != conn.client_id:
            return Ack(msg.round, False, "client id mismatch")
        with self._cv:
            p = self._pending
            if p is None or msg.round < p.round or (msg.round == p.round and kind != p.kind):
                return Ack(msg.round, False, "stale")
            if msg.round > p.round:
                return Ack(msg.round, False, "future round")
            if msg.client_id not in p.expected:
                return Ack(msg.round, False, "not selected")
            if msg.client_id in p.results:
                return Ack(msg.round, False, "duplicate")
            if kind == "train" and msg.dim != self.cfg.arch.dim:
                return Ack(msg.round, False, "wrong dimension")
            p.results[msg.client_id] = msg
            self._cv.notify_all()
        return Ack(msg.round, True, "")

    # -- orchestration ------------------------------------------------------

    def wait_for_clients(self, timeout: float | None = None):
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while sum(c.alive for c in self._conns.values()) < self.expected:
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise FederationError(f"only {len(self._conns)} of {self.expected} clients joined")
                self._cv.wait(left)

    def gather(self, kind: str, round_: int, ids, messages: dict) -> tuple[dict, list]:
        """Send each client its frame and wait for replies or the round timeout."""
        with self._cv:
            self._pending = p = _Pending(kind, round_, set(ids), dict(messages))
            conns = {c: conn for c in ids if (conn := self._conns.get(c)) is not None and conn.alive and p.claim(c)}
        for cid, conn in conns.items():
            try:
                conn.send(messages[cid])
            except OSError:
                conn.close()
                with self._cv:
                    p.sent.discard(cid)  # a rejoin may still pick it up
        deadline = time.monotonic() + self.round_timeout
        with self._cv:
            while True:
                waiting = [c for c in ids if c not in p.results]
                if not waiting:
                    break
                left = deadline - time.monotonic()
                if left <= 0:
                    break
                self._cv.wait(min(left, 0.5))
            self._pending = None
            got = dict(p.results)
        return got, [c for c in ids if c not in got]

    def federation(self, label="federated") -> "NetworkFederation":
        handles = {c: _RemoteHandle(c) for c in range(self.expected)}
        return NetworkFederation(self.cfg, handles, server=self, label=label)

    def close(self):
        self._closing = True
        with self._cv:
            conns = list(self._conns.values())
        for c in conns:
            if c.alive:
                try:
                    c.send(Bye())
                except OSError:
                    pass
            c.close()
        try:
            self._listener.close()
        except OSError:
            pass
        self._accept_thread.join(timeout=2)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass(frozen=True)
class _RemoteHandle:
    client_id: int


class NetworkFederation(Federation):
    def __init__(self, cfg, clients, global_params=None, *, server: ParameterServer, **kw):
        super().__init__(cfg, clients, global_params, **kw)
        self.server = server

    def spawn(self, clients, global_params, **kw):
        return NetworkFederation(self.cfg, clients, global_params, server=self.server, **kw)

    def _snapshot(self, task, participants=()):
        return {"task": task, "participants": list(participants), "config": self.cfg.to_dict()}

    def _missing(self, missing, round_):
        for cid in missing:
            self._client_failed(cid, round_, ConnectionLost(f"no reply within {self.server.round_timeout}s"))

    def collect_updates(self, params, round_, selected):
        frame = Assign(round_, self._snapshot("train", selected), params.values)
        got, missing = self.server.gather("train", round_, selected, {c: frame for c in selected})
        self._missing(missing, round_)
        return [got[c].to_payload(params.layout, participants=selected) for c in selected if c in got]

    def collect_reports(self, params, round_):
        frame = Assign(round_, self._snapshot("report"), params.values)
        got, missing = self.server.gather("report", round_, self.member_ids, {c: frame for c in self.member_ids})
        self._missing(missing, round_)
        return [ClientReport.from_list(got[c].stats) for c in self.member_ids if c in got]


@dataclass
class ServeResult:
    history: object
    params: ParamVector | list
    assignment: object = None


def serve(
    cfg: FederationConfig,
    bind=("127.0.0.1", 0),
    *,
    expected: int | None = None,
    round_timeout: float = DEFAULT_ROUND_TIMEOUT,
    join_timeout: float | None = None,
    cluster_cfg: ClusterConfig | None = None,
    label: str = "federated",
    on_ready=None,
) -> ServeResult:
    """Run a whole federation over TCP and say Bye to every client at the end.

    ``on_ready(address)`` is called once the socket listens, which lets
    callers bind port 0.
    """
    with ParameterServer(cfg, bind, expected, round_timeout) as server:
        if on_ready is not None:
            on_ready(server.address)
        server.wait_for_clients(join_timeout)
        fed = server.federation(label)
        if cluster_cfg is None:
            return ServeResult(fed.run(), fed.global_params)
        run = run_clustered_federation(cfg, fed.clients, cluster_cfg, label=label, federation=fed)
        return ServeResult(run.history, [f.global_params for f in run.federations], run.assignment)


# ---------------------------------------------------------------------------
# client
# ---------------------------------------------------------------------------


def default_arch(data: ClientData, kind="linear", hidden=32) -> ModelArch:
    _, w, f = data.train.features.shape
    return ModelArch(kind=kind, n_features=f, window=w, horizon=data.train.targets.shape[1], hidden=hidden)


def _connect(address, retries, backoff, max_backoff, timeout):
    delay = backoff
    last = None
    for attempt in range(retries + 1):
        try:
            return socket.create_connection(tuple(address), timeout=timeout)
        except OSError as exc:
            last = exc
            if attempt < retries:
                log.info("connect to %s failed (%r); retrying in %.2fs", address, exc, delay)
                time.sleep(delay)
                delay = min(delay * 2, max_backoff)
    raise ConnectionLost(f"could not reach {address[0]}:{address[1]}: {last!r}")


def _session(sock, data, arch, pair_secret) -> bool:
    """One connected session; True when the server said Bye."""
    sock.settimeout(None)
    rfile = sock.makefile("rb")
    try:
        sock.sendall(encode(Join(data.client_id, layout_hash(arch.layout()))))
        while True:
            try:
                msg = read_frame(rfile)
            except OSError as exc:
                raise ConnectionLost(repr(exc)) from exc
            if msg is None:
                raise ConnectionLost("server closed the connection")
            if isinstance(msg, Bye):
                return True
            if isinstance(msg, Ack):
                if not msg.accepted:
                    if msg.round == 0 and msg.reason in ("layout mismatch", "unknown client id", "duplicate client id", "expected join"):
                        raise FederationError(f"server refused join: {msg.reason}")
                    log.warning("server refused round %s upload: %s", msg.round, msg.reason)
                continue
            if not isinstance(msg, Assign):
                log.warning("ignoring unexpected %s", type(msg).__name__)
                continue
            cfg = FederationConfig.from_dict(msg.config["config"])
            if layout_hash(cfg.arch.layout()) != layout_hash(arch.layout()):
                raise FederationError("assigned model does not match the local architecture")
            params = ParamVector(msg.params, cfg.arch.layout())
            if msg.config["task"] == "train":
                payload = client_round(data, cfg, params, msg.round, msg.config["participants"], pair_secret=pair_secret)
                reply = Update.from_payload(msg.round, payload)
            else:
                rep = client_report(data, cfg.arch, params)
                reply = Report(msg.round, data.client_id, rep.to_list())
            sock.sendall(encode(reply))
    finally:
        rfile.close()
        sock.close()


def run_client(
    address,
    data: ClientData,
    *,
    arch: ModelArch | None = None,
    pair_secret: int = 0,
    retries: int = 5,
    backoff: float = 0.1,
    max_backoff: float = 2.0,
    connect_timeout: float = 5.0,
) -> int:
    """Serve one client until the server says Bye.

    Returns a process exit status: 0 after Bye, 2 when the server is
    unreachable after ``retries`` attempts (with capped exponential backoff)
    or refuses the client.
    """
    arch = arch or default_arch(data)
    attempts_left = retries
    while True:
        try:
            sock = _connect(address, attempts_left, backoff, max_backoff, connect_timeout)
        except ConnectionLost as exc:
            log.error("%s", exc)
            return 2
        try:
            if _session(sock, data, arch, pair_secret):
                return 0
        except ConnectionLost as exc:
            if attempts_left <= 0:
                log.error("connection lost: %s", exc)
                return 2
            attempts_left -= 1
            log.warning("connection lost (%s); rejoining", exc)
            time.sleep(backoff)
        except (FederationError, CodecError, ClientFailure) as exc:
            log.error("%s", exc)
            return 2
