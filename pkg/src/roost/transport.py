"""Tag-matched point-to-point messaging between worker ranks.

Three interchangeable backends share one contract: a message is identified
by ``(sender, dest, tag)``, delivered exactly once, and matched by tag, never
by arrival order.

* :class:`LocalTransport` over a :class:`LocalHub` serves both the sequential
  backend (one rank) and the threaded backend (one thread per rank).
* :class:`SocketTransport` connects ranks in separate processes over a TCP
  full mesh.
"""

import logging
import multiprocessing
import os
import socket
import struct
import threading
import time
import traceback

log = logging.getLogger(__name__)

MAGIC = 0x5047
HEADER = struct.Struct("<HHQI")
ANNOUNCE_TAG = 0
DEFAULT_BASE_PORT = 47000
DEFAULT_RECEIVE_TIMEOUT = 60.0
MAX_PAYLOAD = (1 << 32) - 1


class TransportError(RuntimeError):
    pass


class DeadlockError(TransportError):
    pass


class ProtocolError(RuntimeError):
    pass


class SendHandle:
    """Completed-on-enqueue send request."""

    __slots__ = ("dest", "tag", "done")

    def __init__(self, dest, tag):
        self.dest = dest
        self.tag = tag
        self.done = True


def encode_frame(sender, tag, payload):
    return HEADER.pack(MAGIC, sender, tag, len(payload)) + payload


class _Mailbox:
    """Messages keyed by ``(sender, tag)`` for one receiving rank."""

    def __init__(self):
        self._cond = threading.Condition()
        self._messages = {}
        self._dead = {}

    def put(self, sender, tag, payload):
        with self._cond:
            key = (sender, tag)
            if key in self._messages:
                raise ProtocolError(f"duplicate message from rank {sender} with tag {tag:#x}")
            self._messages[key] = payload
            self._cond.notify_all()

    def mark_dead(self, sender, reason):
        with self._cond:
            self._dead[sender] = reason
            self._cond.notify_all()

    def take(self, sender, tag, timeout):
        key = (sender, tag)
        deadline = time.monotonic() + timeout
        with self._cond:
            while key not in self._messages:
                if sender in self._dead:
                    raise TransportError(
                        f"rank {sender} disconnected ({self._dead[sender]}) "
                        f"while waiting for tag {tag:#x}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise DeadlockError(
                        f"no message from rank {sender} with tag {tag:#x} after {timeout:g} s")
                self._cond.wait(remaining)
            return self._messages.pop(key)

    def pending(self):
        with self._cond:
            return sorted(self._messages)


class Transport:
    """Common surface; subclasses provide ``_deliver`` and ``_mailbox``."""

    rank: int
    n_workers: int
    timeout: float = DEFAULT_RECEIVE_TIMEOUT

    def _check_rank(self, r):
        if not isinstance(r, int) or not 1 <= r <= self.n_workers:
            raise ValueError(f"unknown rank {r!r} (have 1..{self.n_workers})")

    def send(self, dest, tag, payload):
        """Non-blocking send; the payload is copied before returning."""
        self._check_rank(dest)
        payload = bytes(payload)
        if len(payload) > MAX_PAYLOAD:
            raise ValueError("payload too large")
        self._deliver(dest, tag, payload)
        return SendHandle(dest, tag)

    def receive(self, source, tag, timeout=None):
        """Block until the message ``(source, tag)`` addressed to this rank arrives."""
        self._check_rank(source)
        return self._mailbox.take(source, tag, self.timeout if timeout is None else timeout)

    def waitall(self, handles):
        for h in handles:
            if not h.done:
                raise TransportError(f"send to rank {h.dest} tag {h.tag:#x} did not complete")

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalHub:
    """Shared mailboxes for ranks living in one process."""

    def __init__(self, n_workers):
        if n_workers < 1:
            raise ValueError("need at least one worker")
        self.n_workers = n_workers
        self.mailboxes = {r: _Mailbox() for r in range(1, n_workers + 1)}

    def transport(self, rank, timeout=DEFAULT_RECEIVE_TIMEOUT):
        return LocalTransport(self, rank, timeout)

    def fail(self, rank, reason):
        """Wake every rank waiting on ``rank``."""
        for box in self.mailboxes.values():
            box.mark_dead(rank, reason)


class LocalTransport(Transport):
    def __init__(self, hub, rank, timeout=DEFAULT_RECEIVE_TIMEOUT):
        self.hub = hub
        self.rank = rank
        self.n_workers = hub.n_workers
        self.timeout = timeout
        self._check_rank(rank)
        self._mailbox = hub.mailboxes[rank]

    def _deliver(self, dest, tag, payload):
        self.hub.mailboxes[dest].put(self.rank, tag, payload)


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock):
    magic, sender, tag, length = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic:#06x}")
    return sender, tag, _recv_exact(sock, length)


def peer_addresses(n_workers, base_port=None, hostfile=None):
    """Listening address of every rank, 1-based list index shifted by one."""
    hostfile = hostfile if hostfile is not None else os.environ.get("ROOST_HOSTFILE")
    if hostfile:
        with open(hostfile) as f:
            entries = [ln.strip() for ln in f if ln.strip()]
        if len(entries) < n_workers:
            raise ValueError(f"hostfile {hostfile} lists {len(entries)} hosts, need {n_workers}")
        out = []
        for e in entries[:n_workers]:
            host, _, port = e.rpartition(":")
            out.append((host, int(port)))
        return out
    if base_port is None:
        base_port = int(os.environ.get("ROOST_BASE_PORT", DEFAULT_BASE_PORT))
    return [("127.0.0.1", base_port + r) for r in range(n_workers)]


class SocketTransport(Transport):
    """Full TCP mesh.  Rank r listens on ``addresses[r-1]``, dials every lower rank
    and accepts every higher rank; each connection opens with a rank-announce frame."""

    def __init__(self, rank, addresses, timeout=DEFAULT_RECEIVE_TIMEOUT, connect_timeout=30.0):
        self.rank = rank
        self.n_workers = len(addresses)
        self.timeout = timeout
        self._check_rank(rank)
        self._mailbox = _Mailbox()
        self._socks = {}
        self._send_locks = {}
        self._threads = []
        self._closed = False
        host, port = addresses[rank - 1]
        listener = None
        if rank < self.n_workers:
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                listener.bind((host, port))
            except OSError as e:
                listener.close()
                raise TransportError(f"rank {rank}: cannot bind {host}:{port}: {e.strerror}") from e
            listener.listen(self.n_workers)
        try:
            deadline = time.monotonic() + connect_timeout
            for peer in range(1, rank):
                self._dial(peer, addresses[peer - 1], deadline)
            if listener is not None:
                self._accept_all(listener, deadline)
        except BaseException:
            self.close()
            raise
        finally:
            if listener is not None:
                listener.close()
        for peer, s in self._socks.items():
            t = threading.Thread(target=self._reader, args=(peer, s), daemon=True,
                                 name=f"roost-recv-{rank}<-{peer}")
            t.start()
            self._threads.append(t)

    def _register(self, peer, s):
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        s.settimeout(None)
        self._socks[peer] = s
        self._send_locks[peer] = threading.Lock()

    def _dial(self, peer, addr, deadline):
        while True:
            try:
                s = socket.create_connection(addr, timeout=max(0.1, deadline - time.monotonic()))
                break
            except OSError as e:
                if time.monotonic() > deadline:
                    raise TransportError(
                        f"rank {self.rank}: rendezvous timeout reaching rank {peer} at "
                        f"{addr[0]}:{addr[1]} ({e})") from e
                time.sleep(0.05)
        s.sendall(encode_frame(self.rank, ANNOUNCE_TAG, struct.pack("<H", self.rank)))
        self._register(peer, s)

    def _accept_all(self, listener, deadline):
        expected = set(range(self.rank + 1, self.n_workers + 1))
        while expected:
            listener.settimeout(max(0.1, deadline - time.monotonic()))
            try:
                s, _ = listener.accept()
            except socket.timeout as e:
                raise TransportError(
                    f"rank {self.rank}: rendezvous timeout waiting for ranks {sorted(expected)}") from e
            s.settimeout(max(0.1, deadline - time.monotonic()))
            sender, tag, payload = read_frame(s)
            (announced,) = struct.unpack("<H", payload)
            if tag != ANNOUNCE_TAG or announced != sender:
                s.close()
                raise ProtocolError(f"malformed rank announce from {sender}")
            if announced not in expected:
                s.close()
                raise ProtocolError(f"rank {self.rank}: duplicate or unexpected rank announce {announced}")
            expected.discard(announced)
            self._register(announced, s)

    def _reader(self, peer, s):
        try:
            while True:
                sender, tag, payload = read_frame(s)
                if sender != peer:
                    raise ProtocolError(f"frame from rank {sender} on rank {peer}'s connection")
                self._mailbox.put(sender, tag, payload)
        except (OSError, ConnectionError, ProtocolError, struct.error) as e:
            if not self._closed:
                log.debug("rank %d: reader for %d stopped: %s", self.rank, peer, e)
            self._mailbox.mark_dead(peer, str(e) or type(e).__name__)

    def _deliver(self, dest, tag, payload):
        if dest == self.rank:
            self._mailbox.put(self.rank, tag, payload)
            return
        frame = encode_frame(self.rank, tag, payload)
        try:
            with self._send_locks[dest]:
                self._socks[dest].sendall(frame)
        except OSError as e:
            raise TransportError(f"rank {self.rank}: send to rank {dest} failed: {e}") from e

    def close(self):
        self._closed = True
        for s in self._socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        self._socks = {}


def find_free_base_port(n_workers, start=20000, stop=60000):
    """First port ``p`` in range such that ``p .. p+n_workers-1`` can all be bound."""
    import random
    candidates = list(range(start, stop - n_workers, n_workers))
    random.Random(os.getpid() ^ time.monotonic_ns()).shuffle(candidates)
    for p in candidates:
        socks = []
        try:
            for k in range(n_workers):
                s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                socks.append(s)
                s.bind(("127.0.0.1", p + k))
            return p
        except OSError:
            continue
        finally:
            for s in socks:
                s.close()
    raise TransportError("no free port range found")


class LaunchError(RuntimeError):
    def __init__(self, statuses):
        self.statuses = statuses
        failed = {r: m for r, m in statuses.items() if m != 0}
        lines = [f"rank {r}: {m}" for r, m in sorted(failed.items())]
        super().__init__("worker failure\n" + "\n".join(lines))


def _child_main(rank, addresses, job, timeout, queue):
    try:
        with SocketTransport(rank, addresses, timeout=timeout) as t:
            job(t)
        queue.put((rank, 0))
    except BaseException:
        queue.put((rank, traceback.format_exc()))
        raise SystemExit(1)


def launch_local(n_workers, job, base_port=None, timeout=DEFAULT_RECEIVE_TIMEOUT):
    """Run ``job(transport)`` collectively on ``n_workers`` ranks on this host.

    Rank 1 runs in the calling process; ranks 2..M are spawned processes
    connected over loopback sockets.  With one worker nothing is spawned and
    no socket is opened.  Returns rank 1's result; raises :class:`LaunchError`
    listing the status of every rank if any rank fails.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    if n_workers == 1:
        return job(LocalHub(1).transport(1, timeout))
    addresses = peer_addresses(n_workers, base_port)
    ctx = multiprocessing.get_context("spawn")
    queue = ctx.Queue()
    procs = []
    for rank in range(2, n_workers + 1):
        p = ctx.Process(target=_child_main, args=(rank, addresses, job, timeout, queue),
                        name=f"roost-worker-{rank}", daemon=True)
        p.start()
        procs.append(p)
    statuses = {}
    result = None
    try:
        with SocketTransport(1, addresses, timeout=timeout) as t:
            result = job(t)
        statuses[1] = 0
    except BaseException:
        statuses[1] = traceback.format_exc()
    for p in procs:
        p.join(timeout if statuses[1] == 0 else 5.0)
        if p.is_alive():
            p.terminate()
            p.join()
    while not queue.empty():
        rank, status = queue.get()
        statuses[rank] = status
    for p, rank in zip(procs, range(2, n_workers + 1)):
        statuses.setdefault(rank, 0 if p.exitcode == 0 else f"exit code {p.exitcode}")
    if any(s != 0 for s in statuses.values()):
        raise LaunchError(statuses)
    return result


def run_threads(n_workers, job, timeout=DEFAULT_RECEIVE_TIMEOUT):
    """Threaded backend: one thread per rank over a shared :class:`LocalHub`.
    Returns rank 1's result."""
    hub = LocalHub(n_workers)
    results, errors = {}, {}

    def body(rank):
        try:
            results[rank] = job(hub.transport(rank, timeout))
        except BaseException as e:
            errors[rank] = e
            hub.fail(rank, f"{type(e).__name__}: {e}")

    threads = [threading.Thread(target=body, args=(r,), name=f"roost-rank-{r}")
               for r in range(1, n_workers + 1)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        # Report the root cause, not the ranks that merely saw a dead peer.
        primary = [e for e in errors.values() if not isinstance(e, TransportError)]
        raise (primary or list(errors.values()))[0]
    return results[1]
