"""
Message-passing fabric for P workers: all_reduce (sum), all_gather and
broadcast.

Two transports share one contract: ThreadFabric rendezvous through a
barrier between threads of one process; SocketFabric runs a star around
the group's first rank over TCP. Every collective carries a tag (kind,
label, layer, shape); ranks that issue different collectives fail with
FabricDesyncError instead of mixing data. Sums use a rank-ordered binary
tree so both transports produce identical bits.
"""
import json
import logging
import socket
import struct
import threading
from typing import List, Optional, Sequence, Tuple

import numpy as np

from clinical_lm.errors import FabricDesyncError, FabricError
from clinical_lm.parallel.retry import connect_with_retry
from clinical_lm.parallel.trace import PHASE_SETUP, CollectiveTrace

logger = logging.getLogger(__name__)

ALL_REDUCE = "all_reduce"
ALL_GATHER = "all_gather"
BROADCAST = "broadcast"

DEFAULT_TIMEOUT_SECONDS = 60.0

Tag = Tuple[str, str, int, Tuple[int, ...]]


def tree_sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise sum in rank order: ((a0+a1)+(a2+a3))+... level by level."""
    level = [np.asarray(a) for a in arrays]
    if not level:
        raise ValueError("tree_sum of no arrays")
    if len(level) == 1:
        return level[0].copy()
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


class Fabric:
    """
    One worker's endpoint in a process group. ``step`` and ``phase`` label
    trace records; ``trace`` may be None.
    """

    transport = "abstract"

    def __init__(
        self,
        rank: int,
        world_size: int,
        timeout: float = DEFAULT_TIMEOUT_SECONDS,
        name: str = "tp",
        trace: Optional[CollectiveTrace] = None,
    ):
        if not 0 <= rank < world_size:
            raise FabricError(f"rank {rank} outside world of size {world_size}")
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout
        self.name = name
        self.trace = trace
        self.step = 0
        self.phase = PHASE_SETUP

    def _record(self, kind: str, layer: int, phase: Optional[str], arr: np.ndarray) -> None:
        if self.trace is not None:
            self.trace.record(self.step, layer, kind, phase or self.phase, int(arr.nbytes))

    def all_reduce(
        self,
        arr: np.ndarray,
        label: str = "",
        layer: int = -1,
        phase: Optional[str] = None,
    ) -> np.ndarray:
        arr = np.ascontiguousarray(arr)
        self._record(ALL_REDUCE, layer, phase, arr)
        if self.world_size == 1:
            return arr
        tag = (ALL_REDUCE, label, layer, tuple(arr.shape))
        return self._exchange(tag, arr, root=0)[0]

    def all_gather(
        self,
        arr: np.ndarray,
        label: str = "",
        layer: int = -1,
        phase: Optional[str] = None,
    ) -> List[np.ndarray]:
        arr = np.ascontiguousarray(arr)
        self._record(ALL_GATHER, layer, phase, arr)
        if self.world_size == 1:
            return [arr]
        tag = (ALL_GATHER, label, layer, ())
        return self._exchange(tag, arr, root=0)

    def broadcast(
        self,
        arr: np.ndarray,
        root: int = 0,
        label: str = "",
        layer: int = -1,
        phase: Optional[str] = None,
    ) -> np.ndarray:
        arr = np.ascontiguousarray(arr)
        self._record(BROADCAST, layer, phase, arr)
        if self.world_size == 1:
            return arr
        tag = (BROADCAST, label, layer, ())
        return self._exchange(tag, arr, root=root)[0]

    def barrier(self) -> None:
        self.all_reduce(np.zeros(1, dtype=np.float32), label="barrier")

    def _exchange(self, tag: Tag, arr: np.ndarray, root: int) -> List[np.ndarray]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    @staticmethod
    def _combine(tag: Tag, arrays: List[np.ndarray], root: int) -> List[np.ndarray]:
        kind = tag[0]
        if kind == ALL_REDUCE:
            return [tree_sum(arrays)]
        if kind == ALL_GATHER:
            return [a.copy() for a in arrays]
        return [arrays[root].copy()]

    @staticmethod
    def _check_tags(tags: Sequence[Tag], layer: int) -> None:
        first = tags[0]
        for rank, tag in enumerate(tags):
            if tag != first:
                raise FabricDesyncError(
                    f"collective mismatch: rank 0 issued {first}, rank {rank} issued {tag}",
                    layer=layer,
                )


class ThreadGroup:
    """Shared rendezvous state for ThreadFabric endpoints of one group."""

    def __init__(self, world_size: int, timeout: float = DEFAULT_TIMEOUT_SECONDS, name: str = "tp"):
        self.world_size = world_size
        self.timeout = timeout
        self.name = name
        self._barrier = threading.Barrier(world_size)
        self._slots: List[Optional[Tuple[Tag, np.ndarray]]] = [None] * world_size

    def fabric(self, rank: int, trace: Optional[CollectiveTrace] = None) -> "ThreadFabric":
        return ThreadFabric(self, rank, trace=trace)

    def abort(self) -> None:
        self._barrier.abort()


class ThreadFabric(Fabric):
    transport = "threads"

    def __init__(self, group: ThreadGroup, rank: int, trace: Optional[CollectiveTrace] = None):
        super().__init__(rank, group.world_size, group.timeout, group.name, trace)
        self.group = group

    def _wait(self, tag: Tag) -> None:
        try:
            self.group._barrier.wait(self.timeout)
        except threading.BrokenBarrierError:
            raise FabricError(
                f"{self.name} {tag[0]} {tag[1] or ''} timed out or a peer failed".replace("  ", " "),
                layer=tag[2],
            )

    def _exchange(self, tag: Tag, arr: np.ndarray, root: int) -> List[np.ndarray]:
        self.group._slots[self.rank] = (tag, arr)
        self._wait(tag)
        entries = list(self.group._slots)
        self._wait(tag)
        self._check_tags([e[0] for e in entries], tag[2])
        return self._combine(tag, [e[1] for e in entries], root)


_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_frame(sock: socket.socket, tag: Optional[Tag], arr: Optional[np.ndarray], error: str = "") -> None:
    header = {"tag": list(tag[:3]) + [list(tag[3])] if tag else None, "error": error}
    payload = b""
    if arr is not None:
        header["dtype"] = arr.dtype.str
        header["shape"] = list(arr.shape)
        payload = np.ascontiguousarray(arr).tobytes()
    encoded = json.dumps(header).encode("utf-8")
    sock.sendall(_U32.pack(len(encoded)) + encoded + _U64.pack(len(payload)) + payload)


def recv_frame(sock: socket.socket) -> Tuple[Optional[Tag], Optional[np.ndarray], str]:
    (header_len,) = _U32.unpack(_recv_exact(sock, 4))
    header = json.loads(_recv_exact(sock, header_len).decode("utf-8"))
    (payload_len,) = _U64.unpack(_recv_exact(sock, 8))
    payload = _recv_exact(sock, payload_len) if payload_len else b""
    raw = header.get("tag")
    tag = (raw[0], raw[1], int(raw[2]), tuple(raw[3])) if raw else None
    arr = None
    if "dtype" in header:
        arr = np.frombuffer(payload, dtype=np.dtype(header["dtype"])).reshape(
            header["shape"]
        ).copy()
    return tag, arr, header.get("error") or ""


class SocketFabric(Fabric):
    """
    Star transport: rank 0 of the group listens at ``hub``; other ranks
    connect (with retry) and announce their rank. For each collective
    the hub collects every rank's array in rank order, combines them and
    sends the result back.
    """

    transport = "sockets"

    def __init__(
        self,
        rank: int,
        world_size: int,
        hub: Tuple[str, int],
        timeout: float = DEFAULT_TIMEOUT_SECONDS,
        name: str = "tp",
        trace: Optional[CollectiveTrace] = None,
    ):
        super().__init__(rank, world_size, timeout, name, trace)
        self.hub = (str(hub[0]), int(hub[1]))
        self._peers: List[Optional[socket.socket]] = [None] * world_size
        self._server: Optional[socket.socket] = None
        self._conn: Optional[socket.socket] = None
        if world_size > 1:
            if rank == 0:
                self._accept_peers()
            else:
                self._connect_hub()

    def _accept_peers(self) -> None:
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            server.bind(self.hub)
        except OSError as e:
            server.close()
            raise FabricError(f"{self.name} hub cannot bind {self.hub}: {e}") from e
        server.listen(self.world_size)
        server.settimeout(self.timeout)
        self._server = server
        logger.debug(f"fabric {self.name} hub listening on {self.hub}")
        for _ in range(self.world_size - 1):
            try:
                conn, _addr = server.accept()
                conn.settimeout(self.timeout)
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                (peer_rank,) = _U32.unpack(_recv_exact(conn, 4))
            except (OSError, ConnectionError) as e:
                self.close()
                raise FabricError(f"{self.name} hub rendezvous failed: {e}") from e
            if not 0 < peer_rank < self.world_size or self._peers[peer_rank] is not None:
                conn.close()
                self.close()
                raise FabricError(f"{self.name} hub got unexpected rank {peer_rank}")
            self._peers[peer_rank] = conn

    def _connect_hub(self) -> None:
        conn = connect_with_retry(self.hub, self.timeout)
        conn.settimeout(self.timeout)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn.sendall(_U32.pack(self.rank))
        self._conn = conn

    def _exchange(self, tag: Tag, arr: np.ndarray, root: int) -> List[np.ndarray]:
        try:
            if self.rank == 0:
                return self._exchange_hub(tag, arr, root)
            return self._exchange_peer(tag, arr)
        except (OSError, ConnectionError, ValueError) as e:
            raise FabricError(f"{self.name} {tag[0]} failed: {e}", layer=tag[2]) from e

    def _exchange_hub(self, tag: Tag, arr: np.ndarray, root: int) -> List[np.ndarray]:
        tags: List[Tag] = [tag]
        arrays: List[np.ndarray] = [arr]
        for peer in self._peers[1:]:
            peer_tag, peer_arr, _ = recv_frame(peer)
            tags.append(peer_tag)
            arrays.append(peer_arr)
        try:
            self._check_tags(tags, tag[2])
        except FabricDesyncError as e:
            for peer in self._peers[1:]:
                peer.sendall(_U32.pack(0))
                send_frame(peer, None, None, error=str(e))
            raise
        result = self._combine(tag, arrays, root)
        for peer in self._peers[1:]:
            peer.sendall(_U32.pack(len(result)))
            for item in result:
                send_frame(peer, tag, item)
        return result

    def _exchange_peer(self, tag: Tag, arr: np.ndarray) -> List[np.ndarray]:
        send_frame(self._conn, tag, arr)
        (count,) = _U32.unpack(_recv_exact(self._conn, 4))
        if count == 0:
            # zero results: the hub follows with an error frame
            _, _, error = recv_frame(self._conn)
            raise FabricDesyncError(error or "collective mismatch", layer=tag[2])
        return [recv_frame(self._conn)[1] for _ in range(count)]

    def close(self) -> None:
        for sock in [self._conn, self._server] + list(self._peers):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass
        self._conn = None
        self._server = None
        self._peers = [None] * self.world_size
