"""Transports driving the server and worker state machines.

Both transports move encoded frames; every message is serialised and parsed
on its way through, so the bytes counted by the ledger are the bytes that
actually travel.
"""

from __future__ import annotations

import logging
import queue
import random
import socket
import threading
from collections import deque
from typing import Callable, Sequence

from .protocol import Server, Worker
from .wire import MAX_PAYLOAD, Message, ProtocolError, ProtocolTimeout, Truncation, decode_message, encode_message, read_frame

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 600.0
SERVER = "server"

# (source, destination, encoded frame) -> possibly altered frame
Tamper = Callable[[object, object, bytes], bytes]


class InProcessTransport:
    """Deterministic simulator: one FIFO channel per (src, dst) pair.

    With ``seed=None`` channels are served in a fixed round-robin order; with
    a seed the next channel is drawn at random, which exercises arbitrary
    interleavings of messages from different nodes while keeping per-channel
    order (as TCP does).
    """

    def __init__(self, server: Server, workers: Sequence[Worker], seed: int | None = None, tamper: Tamper | None = None):
        self.server = server
        self.workers = {w.node: w for w in workers}
        self.rng = random.Random(seed) if seed is not None else None
        self.tamper = tamper
        self.channels: dict[tuple[object, object], deque[bytes]] = {}
        self.delivered = 0

    def _post(self, src, dst, msg: Message) -> None:
        frame = encode_message(msg)
        if self.tamper is not None:
            frame = self.tamper(src, dst, frame)
        self.channels.setdefault((src, dst), deque()).append(frame)

    def _pick(self) -> tuple[object, object] | None:
        ready = sorted((k for k, q in self.channels.items() if q), key=repr)
        if not ready:
            return None
        if self.rng is None:
            return ready[self.delivered % len(ready)]
        return self.rng.choice(ready)

    def run(self, max_messages: int = 10**7) -> Server:
        for node, w in sorted(self.workers.items()):
            for m in w.start():
                self._post(node, SERVER, m)
        while (key := self._pick()) is not None:
            if self.delivered >= max_messages:
                raise RuntimeError("message budget exhausted")
            src, dst = key
            msg = decode_message(self.channels[key].popleft())
            self.delivered += 1
            if dst == SERVER:
                for ch, out in self.server.handle(src, msg):
                    self._post(SERVER, ch, out)
            else:
                for out in self.workers[dst].handle(msg):
                    self._post(dst, SERVER, out)
        if not self.server.finished or not all(w.finished for w in self.workers.values()):
            raise ProtocolError("transport drained before the protocol completed")
        return self.server


# --- sockets --------------------------------------------------------------------------


class _Closed(Truncation):
    """Peer closed the connection on a frame boundary."""


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(min(n - len(buf), 1 << 20))
        except socket.timeout:
            raise ProtocolTimeout(f"no data for {sock.gettimeout()} s") from None
        if not chunk:
            if not buf:
                raise _Closed("connection closed")
            raise Truncation(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def _reader(conn_id: int, sock: socket.socket, inbox: queue.Queue, max_payload: int) -> None:
    try:
        while True:
            msg = read_frame(lambda n: _recv_exact(sock, n), max_payload)
            inbox.put((conn_id, msg, None))
    except _Closed as e:
        inbox.put((conn_id, None, e))
    except Exception as e:  # delivered to the aggregation loop, which decides what is fatal
        inbox.put((conn_id, None, e))


def serve(
    server: Server,
    host: str = "127.0.0.1",
    port: int = 0,
    timeout: float = DEFAULT_TIMEOUT,
    ready: Callable[[int], None] | None = None,
    max_payload: int = MAX_PAYLOAD,
) -> Server:
    """Accept one connection per node and run the server until every BYE is in.

    One reader thread per connection feeds a single queue; the calling thread
    is the only one touching server state.
    """
    lsock = socket.create_server((host, port))
    lsock.settimeout(timeout)
    if ready is not None:
        ready(lsock.getsockname()[1])
    conns: list[socket.socket] = []
    inbox: queue.Queue = queue.Queue()
    try:
        for cid in range(server.spec.nodes):
            try:
                c, _ = lsock.accept()
            except socket.timeout:
                raise ProtocolTimeout(f"only {cid} of {server.spec.nodes} workers connected within {timeout} s") from None
            c.settimeout(timeout)
            conns.append(c)
            threading.Thread(target=_reader, args=(cid, c, inbox, max_payload), daemon=True).start()
        while not server.finished:
            try:
                cid, msg, err = inbox.get(timeout=timeout)
            except queue.Empty:
                raise ProtocolTimeout(f"no worker message within {timeout} s") from None
            if isinstance(err, _Closed) and server.node_of.get(cid) in server.byes:
                continue
            if err is not None:
                raise err
            for ch, out in server.handle(cid, msg):
                conns[ch].sendall(encode_message(out))
    finally:
        for c in conns:
            c.close()
        lsock.close()
    return server


def work(worker: Worker, host: str, port: int, timeout: float = DEFAULT_TIMEOUT, max_payload: int = MAX_PAYLOAD) -> Worker:
    """Connect to the server and run the worker's protocol loop to completion."""
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(timeout)
    try:
        for m in worker.start():
            sock.sendall(encode_message(m))
        while not worker.finished:
            msg = read_frame(lambda n: _recv_exact(sock, n), max_payload)
            for out in worker.handle(msg):
                sock.sendall(encode_message(out))
    finally:
        sock.close()
    return worker


def run_socket_local(server: Server, workers: Sequence[Worker], timeout: float = DEFAULT_TIMEOUT) -> Server:
    """Server and workers on localhost threads; convenience for tests and single-host runs."""
    port_box: queue.Queue = queue.Queue()
    errors: list[BaseException] = []

    def run_worker(w: Worker, port: int):
        try:
            work(w, "127.0.0.1", port, timeout)
        except BaseException as e:
            errors.append(e)

    result: list[Server] = []

    def run_server():
        try:
            result.append(serve(server, port=0, timeout=timeout, ready=port_box.put))
        except BaseException as e:
            errors.append(e)
            port_box.put(None)

    st = threading.Thread(target=run_server, daemon=True)
    st.start()
    port = port_box.get(timeout=timeout)
    if port is None:
        raise errors[0]
    threads = [threading.Thread(target=run_worker, args=(w, port), daemon=True) for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    st.join(timeout)
    if errors:
        raise errors[0]
    if not result:
        raise ProtocolTimeout("socket run did not finish")
    return result[0]
