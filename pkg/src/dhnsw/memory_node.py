"""Passive memory node: one registered byte region served by offset.

Nothing here understands clusters, directories or vectors. The operation
set is register / read / write / fetch-add / doorbell read, all in terms
of byte offsets.
"""

from __future__ import annotations

import itertools
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

from .errors import AlignmentError, BoundsError, DhnswError

log = logging.getLogger(__name__)

_tokens = itertools.count(1)
_token_lock = threading.Lock()


@dataclass
class Region:
    capacity: int
    token: int
    buf: bytearray = field(repr=False)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def check(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > self.capacity:
            raise BoundsError(f"range [{offset}, {offset + length}) outside region of {self.capacity} bytes")


def register(capacity: int) -> Region:
    if capacity <= 0:
        raise ValueError("region capacity must be positive")
    with _token_lock:
        token = next(_tokens)
    return Region(capacity, token, bytearray(capacity))


def serve_read(region: Region, offset: int, length: int) -> bytes:
    region.check(offset, length)
    with region.lock:
        return bytes(region.buf[offset : offset + length])


def serve_write(region: Region, offset: int, data: bytes) -> None:
    region.check(offset, len(data))
    with region.lock:
        region.buf[offset : offset + len(data)] = data


def serve_fetch_add(region: Region, offset: int, delta: int) -> int:
    """Atomically add ``delta`` to the little-endian u32 at ``offset`` (mod 2**32)."""
    if offset % 4:
        raise AlignmentError(f"fetch-add offset {offset} is not 4-byte aligned")
    region.check(offset, 4)
    with region.lock:
        (prev,) = struct.unpack_from("<I", region.buf, offset)
        struct.pack_into("<I", region.buf, offset, (prev + delta) & 0xFFFFFFFF)
    return prev


def serve_doorbell(region: Region, specs: Sequence[Tuple[int, int]]) -> List[bytes]:
    """Serve several reads at once; any bad range fails the whole batch."""
    for offset, length in specs:
        region.check(offset, length)
    with region.lock:
        return [bytes(region.buf[o : o + n]) for o, n in specs]


# -- TCP service --------------------------------------------------------
#
# request  : u32 frame_len | u8 opcode | payload      (frame_len counts opcode + payload)
# response : u32 frame_len | u8 status | payload
#
# READ=1     payload u64 offset, u64 len              -> bytes
# WRITE=2    payload u64 offset, data                 -> empty
# FAA=3      payload u64 offset, i32 delta            -> u32 previous
# DOORBELL=4 payload u32 count, count x (u64, u64)    -> concatenated bytes
#
# status: 0 ok, 1 bounds, 2 alignment, 3 bad request; error payload is utf-8 text.

OP_READ, OP_WRITE, OP_FAA, OP_DOORBELL = 1, 2, 3, 4
ST_OK, ST_BOUNDS, ST_ALIGN, ST_BAD = 0, 1, 2, 3
FRAME_LEN = struct.Struct("<I")
READ_SPEC = struct.Struct("<QQ")
FAA_REQ = struct.Struct("<Qi")


def recv_exact(sock, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock) -> bytes:
    (length,) = FRAME_LEN.unpack(recv_exact(sock, FRAME_LEN.size))
    return recv_exact(sock, length)


def send_frame(sock, head: int, payload: bytes = b"") -> None:
    sock.sendall(FRAME_LEN.pack(1 + len(payload)) + bytes([head]) + payload)


def handle_request(region: Region, frame: bytes) -> Tuple[int, bytes]:
    """Execute one request frame (opcode + payload); returns (status, payload)."""
    if not frame:
        return ST_BAD, b"empty frame"
    op, body = frame[0], frame[1:]
    try:
        if op == OP_READ:
            offset, length = READ_SPEC.unpack(body)
            return ST_OK, serve_read(region, offset, length)
        if op == OP_WRITE:
            (offset,) = struct.unpack_from("<Q", body)
            serve_write(region, offset, body[8:])
            return ST_OK, b""
        if op == OP_FAA:
            offset, delta = FAA_REQ.unpack(body)
            return ST_OK, struct.pack("<I", serve_fetch_add(region, offset, delta))
        if op == OP_DOORBELL:
            (count,) = struct.unpack_from("<I", body)
            if len(body) != 4 + count * READ_SPEC.size:
                return ST_BAD, b"doorbell payload length mismatch"
            specs = [READ_SPEC.unpack_from(body, 4 + i * READ_SPEC.size) for i in range(count)]
            return ST_OK, b"".join(serve_doorbell(region, specs))
        return ST_BAD, f"unknown opcode {op}".encode()
    except BoundsError as exc:
        return ST_BOUNDS, str(exc).encode()
    except AlignmentError as exc:
        return ST_ALIGN, str(exc).encode()
    except (struct.error, DhnswError) as exc:
        return ST_BAD, str(exc).encode()


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        region = self.server.region
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                frame = recv_frame(self.request)
            except (ConnectionError, OSError):
                return
            status, payload = handle_request(region, frame)
            send_frame(self.request, status, payload)


class MemoryServer(socketserver.ThreadingTCPServer):
    """TCP front end for a single region; one thread per client connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, region: Region, host: str = "127.0.0.1", port: int = 0) -> None:
        self.region = region
        super().__init__((host, port), _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        """Serve in a background thread; stop with ``shutdown()``."""
        t = threading.Thread(target=self.serve_forever, name="dhnsw-memory-node", daemon=True)
        t.start()
        log.info("memory node listening on %s (%d bytes)", self.address, self.region.capacity)
        return t
