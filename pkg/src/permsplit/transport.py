"""Message schema, byte-exact wire encoding, metered in-process channels and
a socket transport speaking the same frames.

Frame layout (all little-endian):

    magic   u32   0x70465354
    version u8    1
    kind    u8    MessageKind
    round   u64
    client  u32
    task    u16
    -- 20-byte fixed header ends here --
    n_samples u32, then sample ids (u64 each)
    n_tensors u8, then per tensor: rank u8, dims (u32 x rank), payload f32

Payloads are float32 only; headers are excluded from cost accounting, which
counts payload elements (4 bytes each) per link and category.
"""

from __future__ import annotations

import csv
import socket
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

__all__ = [
    "MAGIC", "VERSION", "MessageKind", "Message", "TransportError",
    "EncodeError", "DecodeError", "CATEGORY", "encode", "decode",
    "encoded_size", "TrafficLedger", "Endpoint", "channel_pair",
    "SocketEndpoint", "socket_pair", "serve_one", "connect",
]

MAGIC = 0x70465354
VERSION = 1
HEADER = struct.Struct("<IBBQIH")          # magic, version, kind, round, client, task
MAX_FRAME = 2**31                          # frames must stay under 2 GiB


class TransportError(RuntimeError):
    """Link closed, disconnected, or otherwise unusable."""


class EncodeError(ValueError):
    """Message cannot be framed (bad payload type or oversized frame)."""


class DecodeError(ValueError):
    """Byte sequence is not a well-formed frame."""


class MessageKind(IntEnum):
    CONTROL = 0
    FEATURE_UPLOAD = 1
    BODY_OUTPUT = 2
    TAIL_GRADIENT = 3
    HEAD_GRADIENT = 4
    TAIL_WEIGHTS_UPLOAD = 5
    TAIL_WEIGHTS_BROADCAST = 6
    HEAD_WEIGHTS_UPLOAD = 7
    HEAD_WEIGHTS_BROADCAST = 8
    FULL_MODEL_UPLOAD = 9
    FULL_MODEL_BROADCAST = 10


# cost category per kind; body outputs count as features, head-bound body
# gradients count as gradients, every weight transfer counts as parameters
CATEGORY: dict[MessageKind, str | None] = {
    MessageKind.CONTROL: None,
    MessageKind.FEATURE_UPLOAD: "features",
    MessageKind.BODY_OUTPUT: "features",
    MessageKind.TAIL_GRADIENT: "gradients",
    MessageKind.HEAD_GRADIENT: "gradients",
    MessageKind.TAIL_WEIGHTS_UPLOAD: "parameters",
    MessageKind.TAIL_WEIGHTS_BROADCAST: "parameters",
    MessageKind.HEAD_WEIGHTS_UPLOAD: "parameters",
    MessageKind.HEAD_WEIGHTS_BROADCAST: "parameters",
    MessageKind.FULL_MODEL_UPLOAD: "parameters",
    MessageKind.FULL_MODEL_BROADCAST: "parameters",
}

CATEGORIES = ("features", "gradients", "parameters")


@dataclass(frozen=True)
class Message:
    """Wire envelope. Payload tensors are float32 numpy arrays."""

    kind: MessageKind
    round: int = 0
    client_id: int = 0
    task_id: int = 0
    sample_ids: tuple[int, ...] = ()
    payload: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        object.__setattr__(self, "sample_ids", tuple(int(s) for s in self.sample_ids))
        tensors = []
        for arr in self.payload:
            if not isinstance(arr, np.ndarray) or arr.dtype != np.float32:
                raise EncodeError(
                    f"payload tensors must be float32 arrays, got {type(arr).__name__}"
                    f"{'/' + str(arr.dtype) if isinstance(arr, np.ndarray) else ''}")
            tensors.append(arr)
        object.__setattr__(self, "payload", tuple(tensors))

    @property
    def elements(self) -> int:
        return sum(int(a.size) for a in self.payload)

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        if (self.kind, self.round, self.client_id, self.task_id,
                self.sample_ids) != (other.kind, other.round, other.client_id,
                                     other.task_id, other.sample_ids):
            return False
        if len(self.payload) != len(other.payload):
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.payload, other.payload))

    __hash__ = None


def encoded_size(m: Message) -> int:
    size = HEADER.size + 4 + 8 * len(m.sample_ids) + 1
    for arr in m.payload:
        size += 1 + 4 * arr.ndim + 4 * arr.size
    return size


def encode(m: Message) -> bytes:
    """Pure function: identical messages produce identical bytes."""
    size = encoded_size(m)
    if size >= MAX_FRAME:
        raise EncodeError(f"frame of {size} bytes exceeds the 2^31 limit")
    if len(m.payload) > 255:
        raise EncodeError(f"{len(m.payload)} tensors exceed the u8 count field")
    parts = [HEADER.pack(MAGIC, VERSION, int(m.kind), m.round, m.client_id,
                         m.task_id),
             struct.pack("<I", len(m.sample_ids)),
             struct.pack(f"<{len(m.sample_ids)}Q", *m.sample_ids),
             struct.pack("<B", len(m.payload))]
    for arr in m.payload:
        if arr.ndim > 255:
            raise EncodeError(f"tensor rank {arr.ndim} exceeds the u8 field")
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> Message:
    if len(blob) < HEADER.size + 5:
        raise DecodeError(f"frame truncated at {len(blob)} bytes")
    magic, version, kind, rnd, client, task = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}")
    off = HEADER.size
    (n_samples,) = struct.unpack_from("<I", blob, off)
    off += 4
    if off + 8 * n_samples > len(blob):
        raise DecodeError("sample id block truncated")
    sample_ids = struct.unpack_from(f"<{n_samples}Q", blob, off)
    off += 8 * n_samples
    (n_tensors,) = struct.unpack_from("<B", blob, off)
    off += 1
    payload = []
    for _ in range(n_tensors):
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if off + 4 * count > len(blob):
            raise DecodeError("tensor payload truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        payload.append(arr.reshape(dims).astype(np.float32))
    if off != len(blob):
        raise DecodeError(f"{len(blob) - off} trailing bytes after frame")
    try:
        kind = MessageKind(kind)
    except ValueError as exc:
        raise DecodeError(f"unknown message kind {kind}") from exc
    return Message(kind, rnd, client, task, sample_ids, tuple(payload))


# ---------------------------------------------------------------------------
# traffic accounting


class TrafficLedger:
    """Per-link, per-category payload element counters; bytes = 4 x elements."""

    def __init__(self):
        self._counters: dict[tuple[int, str, str], int] = {}
        self._kind_elements: dict[MessageKind, int] = {}
        self.kinds_seen: set[MessageKind] = set()

    def record(self, client_id: int, direction: str, m: Message) -> None:
        if direction not in ("up", "down"):
            raise ValueError(f"direction must be up/down, got {direction!r}")
        self.kinds_seen.add(m.kind)
        self._kind_elements[m.kind] = (self._kind_elements.get(m.kind, 0)
                                       + m.elements)
        cat = CATEGORY[m.kind]
        if cat is None:
            return
        key = (client_id, direction, cat)
        self._counters[key] = self._counters.get(key, 0) + m.elements

    def elements(self, client_id=None, direction=None, category=None) -> int:
        total = 0
        for (cid, d, cat), n in self._counters.items():
            if client_id is not None and cid != client_id:
                continue
            if direction is not None and d != direction:
                continue
            if category is not None and cat != category:
                continue
            total += n
        return total

    def bytes(self, **kw) -> int:
        return 4 * self.elements(**kw)

    def by_kind(self) -> dict[MessageKind, int]:
        return dict(self._kind_elements)

    def client_ids(self) -> list[int]:
        return sorted({cid for cid, _, _ in self._counters})

    def rows(self) -> list[tuple[str, str, int, int]]:
        out = []
        for (cid, d, cat) in sorted(self._counters):
            n = self._counters[(cid, d, cat)]
            out.append((f"client{cid}:{d}", cat, n, 4 * n))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["link", "category", "elements", "bytes"])
            for row in self.rows():
                w.writerow(row)

    @classmethod
    def read_csv(cls, path) -> "TrafficLedger":
        led = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                cid_s, direction = row["link"].split(":")
                key = (int(cid_s.removeprefix("client")), direction,
                       row["category"])
                led._counters[key] = led._counters.get(key, 0) + int(row["elements"])
        return led


# ---------------------------------------------------------------------------
# links


class Endpoint:
    """One side of an in-process duplex channel. Frames are encoded on send
    (metering the ledger) and decoded on receive, so the wire format is
    exercised on every exchange."""

    def __init__(self, client_id: int, outbox: deque, inbox: deque,
                 ledger: TrafficLedger | None, direction: str):
        self.client_id = client_id
        self._outbox = outbox
        self._inbox = inbox
        self._ledger = ledger
        self._direction = direction           # direction of frames sent here
        self.closed = False

    def send(self, m: Message) -> None:
        if self.closed:
            raise TransportError(f"send on closed link (client {self.client_id})")
        frame = encode(m)
        if self._ledger is not None:
            self._ledger.record(self.client_id, self._direction, m)
        self._outbox.append(frame)

    def recv(self) -> Message:
        if self.closed:
            raise TransportError(f"recv on closed link (client {self.client_id})")
        if not self._inbox:
            raise TransportError(f"recv on empty queue (client {self.client_id})")
        return decode(self._inbox.popleft())

    def close(self) -> None:
        self.closed = True


def channel_pair(client_id: int, ledger: TrafficLedger | None = None
                 ) -> tuple[Endpoint, Endpoint]:
    """(client_end, server_end) of a metered FIFO channel."""
    up: deque = deque()
    down: deque = deque()
    client_end = Endpoint(client_id, up, down, ledger, "up")
    server_end = Endpoint(client_id, down, up, ledger, "down")
    return client_end, server_end


class SocketEndpoint:
    """Length-prefix framed messages over a connected stream socket."""

    def __init__(self, sock: socket.socket, client_id: int,
                 ledger: TrafficLedger | None, direction: str):
        self._sock = sock
        self.client_id = client_id
        self._ledger = ledger
        self._direction = direction
        self.closed = False

    def send(self, m: Message) -> None:
        if self.closed:
            raise TransportError(f"send on closed socket (client {self.client_id})")
        frame = encode(m)
        if self._ledger is not None:
            self._ledger.record(self.client_id, self._direction, m)
        try:
            self._sock.sendall(struct.pack("<I", len(frame)) + frame)
        except OSError as exc:
            raise TransportError(f"socket send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except OSError as exc:
                raise TransportError(f"socket recv failed: {exc}") from exc
            if not chunk:
                raise TransportError("peer closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self) -> Message:
        if self.closed:
            raise TransportError(f"recv on closed socket (client {self.client_id})")
        (length,) = struct.unpack("<I", self._read_exact(4))
        return decode(self._read_exact(length))

    def close(self) -> None:
        self.closed = True
        try:
            self._sock.close()
        except OSError:
            pass


def socket_pair(client_id: int, ledger: TrafficLedger | None = None
                ) -> tuple[SocketEndpoint, SocketEndpoint]:
    """(client_end, server_end) over a connected local socket pair."""
    a, b = socket.socketpair()
    client_end = SocketEndpoint(a, client_id, ledger, "up")
    server_end = SocketEndpoint(b, client_id, ledger, "down")
    return client_end, server_end


def serve_one(host: str, port: int, client_id: int,
              ledger: TrafficLedger | None = None) -> SocketEndpoint:
    """Accept a single client connection on host:port (server side)."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as srv:
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(1)
        conn, _ = srv.accept()
    return SocketEndpoint(conn, client_id, ledger, "down")


def connect(host: str, port: int, client_id: int, retries: int = 20,
            delay: float = 0.05) -> SocketEndpoint:
    """Connect to a listening server with a bounded retry loop."""
    import time
    last: OSError | None = None
    for _ in range(retries):
        try:
            sock = socket.create_connection((host, port))
            return SocketEndpoint(sock, client_id, None, "up")
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise TransportError(f"could not connect to {host}:{port}: {last}")
