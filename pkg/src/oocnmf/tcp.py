"""TCP backend: star topology around rank 0.

Every message is a frame::

    u32 length            bytes that follow (header + payload)
    u64 group_id
    u64 seq               per-handle collective counter
    u32 phase_tag         see comm.PHASE_TAGS, or one of the control tags below
    u64 rows
    u64 cols
    payload               rows*cols little-endian f64

Control frames: ``HELLO`` (join handshake, ``seq`` = sender rank),
``ERROR`` (``rows`` = 0, ``cols`` = byte length, payload = UTF-8 text) and
barriers (phase tag ``barrier``, empty payload).  Non-root ranks send their
buffer to rank 0, which sums in ascending rank order and sends the result
back, so the bits match the other backends exactly.
"""

from __future__ import annotations

import socket
import struct
import threading
import time

import numpy as np

from .comm import (PHASE_TAGS, TAG_NAMES, CollectiveMismatch, CollectiveTimeout, CommError,
                   CommGroup, GroupPoisoned, Handle, rank_order_sum)

HEADER = struct.Struct("<QQIQQ")
LEN = struct.Struct("<I")
TAG_HELLO = 0xFFFF0001
TAG_ERROR = 0xFFFF0002


def parse_endpoint(ep):
    host, _, port = ep.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad endpoint {ep!r}; expected host:port")
    return host, int(port)


def encode_frame(group_id, seq, tag, payload=None, raw=b""):
    if payload is not None:
        rows, cols = payload.shape
        body = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    else:
        rows, cols, body = 0, len(raw), raw
    head = HEADER.pack(group_id, seq, tag, rows, cols)
    return LEN.pack(len(head) + len(body)) + head + body


def _recv_exact(sock, n):
    chunks = []
    while n:
        part = sock.recv(n)
        if not part:
            raise ConnectionError("peer closed the connection")
        chunks.append(part)
        n -= len(part)
    return b"".join(chunks)


def recv_frame(sock):
    """Return ``(group_id, seq, tag, payload)``; payload is an array, bytes or None."""
    (length,) = LEN.unpack(_recv_exact(sock, LEN.size))
    if length < HEADER.size:
        raise CommError(f"short frame ({length} bytes)")
    group_id, seq, tag, rows, cols = HEADER.unpack(_recv_exact(sock, HEADER.size))
    body = _recv_exact(sock, length - HEADER.size)
    if tag == TAG_ERROR or tag == TAG_HELLO:
        return group_id, seq, tag, body
    if len(body) != 8 * rows * cols:
        raise CommError(f"frame payload {len(body)} B does not match {rows}x{cols}")
    if rows == 0 and cols == 0:
        return group_id, seq, tag, None
    return group_id, seq, tag, np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


class TcpHandle(Handle):
    def __init__(self, rank, size, endpoints, timeout, group_id):
        super().__init__(rank, size)
        self.timeout = timeout
        self.group_id = group_id
        self.poisoned = None
        self._peers = {}      # root only: rank -> socket
        self._sock = None     # non-root: socket to root
        self._listener = None
        if len(endpoints) != size:
            raise ValueError(f"need {size} endpoints, got {len(endpoints)}")
        host, port = parse_endpoint(endpoints[0])
        if rank == 0:
            self._accept_all(host, port)
        else:
            self._join(host, port)

    # -- setup -------------------------------------------------------------
    def _accept_all(self, host, port):
        lst = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        lst.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            lst.bind((host, port))
        except OSError as exc:
            lst.close()
            raise CommError(f"rank 0 cannot bind {host}:{port}: {exc}") from exc
        lst.listen(self.size)
        self._listener = lst
        deadline = time.monotonic() + self.timeout
        try:
            while len(self._peers) < self.size - 1:
                left = deadline - time.monotonic()
                if left <= 0:
                    missing = sorted(set(range(1, self.size)) - set(self._peers))
                    raise CollectiveTimeout(f"join timed out; missing ranks {missing}")
                lst.settimeout(left)
                try:
                    conn, _ = lst.accept()
                except socket.timeout:
                    continue
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn.settimeout(max(0.01, deadline - time.monotonic()))
                gid, peer_rank, tag, _ = recv_frame(conn)
                if tag != TAG_HELLO or gid != self.group_id:
                    conn.close()
                    raise CommError(f"unexpected join frame (tag {tag:#x}, group {gid})")
                if peer_rank in self._peers or not (0 < peer_rank < self.size):
                    conn.sendall(encode_frame(self.group_id, peer_rank, TAG_ERROR,
                                              raw=f"duplicate or invalid rank {peer_rank}".encode()))
                    conn.close()
                    raise CommError(f"duplicate or invalid rank {peer_rank}")
                self._peers[peer_rank] = conn
            for r, conn in self._peers.items():
                conn.sendall(encode_frame(self.group_id, 0, TAG_HELLO))
        except (CommError, OSError) as exc:
            self._fail(exc)
            self.close()
            if isinstance(exc, CommError):
                raise
            raise CommError(str(exc)) from exc

    def _join(self, host, port):
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=max(0.01, deadline - time.monotonic()))
                break
            except OSError as exc:
                if time.monotonic() >= deadline:
                    raise CollectiveTimeout(f"rank {self.rank}: cannot reach rank 0 at {host}:{port}: {exc}") from exc
                time.sleep(0.02)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        try:
            sock.settimeout(max(0.01, deadline - time.monotonic()))
            sock.sendall(encode_frame(self.group_id, self.rank, TAG_HELLO))
            _, _, tag, body = recv_frame(sock)
        except socket.timeout as exc:
            self.close()
            raise CollectiveTimeout(f"rank {self.rank}: join handshake timed out") from exc
        except OSError as exc:
            self.close()
            raise CommError(f"rank {self.rank}: join failed: {exc}") from exc
        if tag == TAG_ERROR:
            self.close()
            raise CommError(body.decode(errors="replace"))

    # -- collectives -------------------------------------------------------
    def _fail(self, exc):
        if self.poisoned is None:
            self.poisoned = exc
        msg = f"{type(exc).__name__}: {exc}".encode()
        for conn in self._peers.values():
            try:
                conn.settimeout(1.0)
                conn.sendall(encode_frame(self.group_id, 0, TAG_ERROR, raw=msg))
            except OSError:
                pass

    def poison(self, exc):
        self._fail(exc)

    def _exchange(self, seq, op, phase, buf):
        if self.poisoned is not None:
            raise GroupPoisoned(f"group poisoned: {self.poisoned}") from self.poisoned
        tag = PHASE_TAGS[phase]
        try:
            if self.rank == 0:
                return self._root_exchange(seq, op, tag, buf)
            return self._leaf_exchange(seq, op, tag, buf)
        except socket.timeout as exc:
            err = CollectiveTimeout(f"rank {self.rank}: collective #{seq} timed out after {self.timeout}s")
            self._fail(err)
            raise err from exc
        except (ConnectionError, OSError) as exc:
            err = CommError(f"rank {self.rank}: lost peer during collective #{seq}: {exc}")
            self._fail(err)
            raise err from exc
        except CommError as exc:
            self._fail(exc)
            raise

    def _root_exchange(self, seq, op, tag, buf):
        deadline = time.monotonic() + self.timeout
        bufs = [buf]
        for r in range(1, self.size):
            conn = self._peers[r]
            conn.settimeout(max(0.001, deadline - time.monotonic()))
            gid, pseq, ptag, payload = recv_frame(conn)
            if ptag == TAG_ERROR:
                raise GroupPoisoned(f"rank {r} failed: {payload.decode(errors='replace')}")
            if gid != self.group_id or pseq != seq or ptag != tag:
                raise CollectiveMismatch(
                    f"collective #{seq}: rank {r} sent seq {pseq} phase "
                    f"{TAG_NAMES.get(ptag, ptag)}, rank 0 is at phase {TAG_NAMES.get(tag, tag)}")
            if (payload is None) != (buf is None) or (buf is not None and payload.shape != buf.shape):
                shape_r = None if payload is None else payload.shape
                shape_0 = None if buf is None else buf.shape
                raise CollectiveMismatch(
                    f"collective #{seq}: rank {r} buffer shape {shape_r} != rank 0 shape {shape_0}")
            bufs.append(payload)
        result = None if op == "barrier" else rank_order_sum(bufs)
        frame = encode_frame(self.group_id, seq, tag, result)
        for r in range(1, self.size):
            self._peers[r].settimeout(max(0.001, deadline - time.monotonic()))
            self._peers[r].sendall(frame)
        return result

    def _leaf_exchange(self, seq, op, tag, buf):
        self._sock.settimeout(self.timeout)
        self._sock.sendall(encode_frame(self.group_id, seq, tag, buf))
        gid, rseq, rtag, payload = recv_frame(self._sock)
        if rtag == TAG_ERROR:
            err = GroupPoisoned(f"rank 0 reported: {payload.decode(errors='replace')}")
            self.poisoned = err
            raise err
        if rseq != seq or rtag != tag:
            raise CollectiveMismatch(f"collective #{seq}: reply for seq {rseq} tag {rtag}")
        return payload

    def close(self):
        for conn in self._peers.values():
            try:
                conn.close()
            except OSError:
                pass
        self._peers = {}
        for s in (self._sock, self._listener):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass
        self._sock = self._listener = None


def free_endpoints(n, host="127.0.0.1"):
    """``n`` ``host:port`` strings with ports the OS reports as free right now."""
    socks, eps = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind((host, 0))
        socks.append(s)
        eps.append(f"{host}:{s.getsockname()[1]}")
    for s in socks:
        s.close()
    return eps


def spawn_tcp_group(n_workers, endpoints, rank, timeout, group_id):
    if endpoints is None:
        if rank is not None:
            raise ValueError("tcp backend with an explicit rank needs endpoints")
        endpoints = free_endpoints(n_workers)
    endpoints = list(endpoints)
    if len(endpoints) != n_workers:
        raise ValueError(f"need {n_workers} endpoints, got {len(endpoints)}")
    if rank is not None:
        if not (0 <= rank < n_workers):
            raise ValueError(f"rank {rank} outside [0, {n_workers})")
        return CommGroup(n_workers, "tcp", [TcpHandle(rank, n_workers, endpoints, timeout, group_id)])
    handles = [None] * n_workers
    errors = []

    def make(r):
        try:
            handles[r] = TcpHandle(r, n_workers, endpoints, timeout, group_id)
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    threads = [threading.Thread(target=make, args=(r,), daemon=True) for r in range(n_workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        for h in handles:
            if h is not None:
                h.close()
        raise errors[0]
    return CommGroup(n_workers, "tcp", handles)
