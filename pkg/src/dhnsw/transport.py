"""Compute-to-memory fabric with explicit round-trip accounting.

Two interchangeable backends: ``inproc`` calls the memory node directly,
``tcp`` speaks the framed wire protocol to a standalone node. A
:class:`Transport` charges one round trip per plain verb and
``ceil(n / D)`` round trips per doorbell read of ``n`` specs.
"""

from __future__ import annotations

import math
import socket
import struct
import time
from dataclasses import dataclass, fields
from typing import Any, List, NamedTuple, Optional, Sequence, Tuple

from . import memory_node as mn
from .errors import AlignmentError, BoundsError, TransportError


class ReadSpec(NamedTuple):
    offset: int
    len: int


@dataclass
class FabricStats:
    round_trips: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    doorbells: int = 0
    doorbell_ops: int = 0
    simulated_time_us: float = 0.0
    wall_time_us: float = 0.0

    def copy(self) -> "FabricStats":
        return FabricStats(**{f.name: getattr(self, f.name) for f in fields(self)})

    def __add__(self, other: "FabricStats") -> "FabricStats":
        return FabricStats(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def __sub__(self, other: "FabricStats") -> "FabricStats":
        return FabricStats(**{f.name: getattr(self, f.name) - getattr(other, f.name) for f in fields(self)})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class TransportConfig:
    backend: str = "inproc"
    address: str = "127.0.0.1:7471"
    doorbell_max: int = 8
    base_rtt_us: float = 2.0
    bandwidth_gbps: float = 100.0
    doorbell_penalty_us: float = 0.05
    timeout_s: float = 30.0

    def __post_init__(self) -> None:
        if self.backend not in ("inproc", "tcp"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.doorbell_max < 1:
            raise ValueError("doorbell_max must be at least 1")


@dataclass(frozen=True)
class VerbRecord:
    """One logged verb. ``args`` is enough to replay it."""

    verb: str
    args: Tuple[Any, ...]
    tag: str = ""
    round_trips: int = 1


class InprocBackend:
    def __init__(self, region: mn.Region) -> None:
        self.region = region

    def read(self, offset: int, length: int) -> bytes:
        return mn.serve_read(self.region, offset, length)

    def write(self, offset: int, data: bytes) -> None:
        mn.serve_write(self.region, offset, data)

    def fetch_add(self, offset: int, delta: int) -> int:
        return mn.serve_fetch_add(self.region, offset, delta)

    def doorbell(self, specs: Sequence[ReadSpec]) -> List[bytes]:
        return mn.serve_doorbell(self.region, specs)

    def close(self) -> None:
        pass


def parse_address(address: str) -> Tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {address!r}")
    return host, int(port)


class TcpBackend:
    def __init__(self, address: str, timeout: float = 30.0) -> None:
        try:
            self.sock = socket.create_connection(parse_address(address), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to memory node at {address}: {exc}") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _call(self, op: int, payload: bytes) -> bytes:
        try:
            mn.send_frame(self.sock, op, payload)
            frame = mn.recv_frame(self.sock)
        except OSError as exc:
            raise TransportError(f"memory node connection failed: {exc}") from exc
        status, body = frame[0], frame[1:]
        if status == mn.ST_OK:
            return body
        msg = body.decode(errors="replace")
        if status == mn.ST_BOUNDS:
            raise BoundsError(msg)
        if status == mn.ST_ALIGN:
            raise AlignmentError(msg)
        raise TransportError(f"memory node rejected request: {msg}")

    def read(self, offset: int, length: int) -> bytes:
        return self._call(mn.OP_READ, mn.READ_SPEC.pack(offset, length))

    def write(self, offset: int, data: bytes) -> None:
        self._call(mn.OP_WRITE, struct.pack("<Q", offset) + bytes(data))

    def fetch_add(self, offset: int, delta: int) -> int:
        return struct.unpack("<I", self._call(mn.OP_FAA, mn.FAA_REQ.pack(offset, delta)))[0]

    def doorbell(self, specs: Sequence[ReadSpec]) -> List[bytes]:
        payload = struct.pack("<I", len(specs)) + b"".join(mn.READ_SPEC.pack(o, n) for o, n in specs)
        body = self._call(mn.OP_DOORBELL, payload)
        out, pos = [], 0
        for _, n in specs:
            out.append(body[pos : pos + n])
            pos += n
        return out

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class Transport:
    """A verb interface bound to one backend, owned by a single worker."""

    def __init__(self, backend, config: TransportConfig, record: bool = True) -> None:
        self.backend = backend
        self.config = config
        self.stats = FabricStats()
        self.record = record
        self.log: List[VerbRecord] = []
        self._closed = False

    @property
    def doorbell_max(self) -> int:
        return self.config.doorbell_max

    def _model_time(self, nbytes: int, ops: int = 1) -> float:
        wire = nbytes * 8 / (self.config.bandwidth_gbps * 1e3)
        return self.config.base_rtt_us + wire + self.config.doorbell_penalty_us * (ops - 1)

    def _live(self) -> None:
        if self._closed:
            raise TransportError("transport is disconnected")

    def _account(self, rec: VerbRecord, started: float) -> None:
        self.stats.round_trips += rec.round_trips
        self.stats.wall_time_us += (time.perf_counter() - started) * 1e6
        if self.record:
            self.log.append(rec)

    def read(self, offset: int, length: int, *, tag: str = "") -> bytes:
        self._live()
        if length <= 0:
            raise ValueError("read length must be positive")
        t0 = time.perf_counter()
        data = self.backend.read(offset, length)
        self.stats.bytes_read += length
        self.stats.simulated_time_us += self._model_time(length)
        self._account(VerbRecord("read", (offset, length), tag), t0)
        return data

    def write(self, offset: int, data: bytes, *, tag: str = "") -> None:
        self._live()
        t0 = time.perf_counter()
        self.backend.write(offset, data)
        self.stats.bytes_written += len(data)
        self.stats.simulated_time_us += self._model_time(len(data))
        self._account(VerbRecord("write", (offset, bytes(data)), tag), t0)

    def fetch_add(self, offset: int, delta: int, *, tag: str = "") -> int:
        self._live()
        t0 = time.perf_counter()
        prev = self.backend.fetch_add(offset, delta)
        self.stats.simulated_time_us += self._model_time(4)
        self._account(VerbRecord("fetch_add", (offset, delta), tag), t0)
        return prev

    def doorbell_read(
        self, specs: Sequence[Tuple[int, int]], max_ops: Optional[int] = None, *, tag: str = ""
    ) -> List[bytes]:
        """Read every spec, ``max_ops`` sub-reads per round trip.

        The whole call fails before any data is returned if one spec is out
        of bounds.
        """
        self._live()
        specs = [ReadSpec(int(o), int(n)) for o, n in specs]
        if not specs:
            raise ValueError("doorbell read needs at least one spec")
        if any(s.len <= 0 for s in specs):
            raise ValueError("read length must be positive")
        D = self.config.doorbell_max if max_ops is None else max_ops
        if D < 1:
            raise ValueError("doorbell size must be at least 1")
        t0 = time.perf_counter()
        chunks = [specs[i : i + D] for i in range(0, len(specs), D)]
        # a failing chunk discards earlier chunks and leaves stats untouched
        out: List[bytes] = []
        for chunk in chunks:
            out.extend(self.backend.doorbell(chunk))
        for chunk in chunks:
            nbytes = sum(s.len for s in chunk)
            self.stats.bytes_read += nbytes
            self.stats.doorbells += 1
            self.stats.doorbell_ops += len(chunk)
            self.stats.simulated_time_us += self._model_time(nbytes, len(chunk))
        self._account(VerbRecord("doorbell", (tuple(specs), D), tag, len(chunks)), t0)
        return out

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self.backend.close()


def connect(config: Optional[TransportConfig] = None, region: Optional[mn.Region] = None, record: bool = True) -> Transport:
    """Open a transport. The inproc backend needs the region it serves."""
    config = config or TransportConfig()
    if config.backend == "inproc":
        if region is None:
            raise TransportError("inproc backend needs a registered region")
        return Transport(InprocBackend(region), config, record)
    return Transport(TcpBackend(config.address, config.timeout_s), config, record)


def replay(transport: Transport, log: Sequence[VerbRecord]) -> List[Any]:
    """Re-issue a recorded verb sequence; returns each verb's response."""
    out: List[Any] = []
    for rec in log:
        if rec.verb == "read":
            out.append(transport.read(*rec.args, tag=rec.tag))
        elif rec.verb == "write":
            out.append(transport.write(*rec.args, tag=rec.tag))
        elif rec.verb == "fetch_add":
            out.append(transport.fetch_add(*rec.args, tag=rec.tag))
        elif rec.verb == "doorbell":
            specs, D = rec.args
            out.append(transport.doorbell_read(specs, D, tag=rec.tag))
        else:
            raise ValueError(f"unknown verb {rec.verb!r}")
    return out


def doorbell_round_trips(n: int, D: int) -> int:
    return math.ceil(n / D) if n else 0
