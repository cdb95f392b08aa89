"""Framed binary wire format and byte ledger.

Frame (little-endian, 18-byte header):

    magic  4s   b"SPES"
    version u8  1
    kind   u8   Kind
    round  u32
    length u64  payload size
    payload

Tensor-block payload:

    count u32
    per block: name_len u16, name utf-8, dtype u8 (0 = f32), rank u8, dims u32[rank], values
"""

from __future__ import annotations

import json
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Mapping

import numpy as np

MAGIC = b"SPES"
VERSION = 1
HEADER = struct.Struct("<4sBBIQ")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 1 << 34
CONFIG_HASH_LEN = 32

_DTYPES = {0: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype(np.float32): 0}


class Kind(IntEnum):
    HELLO = 1
    ASSIGN = 2
    GLOBAL_MODEL = 3
    LOCAL_UPDATE = 4
    MERGE_APPLIED = 5
    ROUND_DONE = 6
    BYE = 7


class ProtocolError(Exception):
    """Base class of every wire or state-machine violation."""


class BadMagic(ProtocolError):
    pass


class VersionMismatch(ProtocolError):
    pass


class Truncation(ProtocolError):
    pass


class UnknownKind(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class MessageTooLarge(ProtocolError):
    pass


class RoundMismatch(ProtocolError):
    pass


class DuplicatePush(ProtocolError):
    pass


class NonOwnedBlock(ProtocolError):
    pass


class ConfigHashMismatch(ProtocolError):
    pass


class OutOfOrder(ProtocolError):
    pass


class ProtocolTimeout(ProtocolError):
    pass


class BarrierViolation(ProtocolError):
    pass


@dataclass(frozen=True)
class Message:
    kind: Kind
    round: int
    payload: bytes = b""

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + len(self.payload)


def encode_message(msg: Message) -> bytes:
    if not 0 <= msg.round < 2**32:
        raise ValueError(f"round {msg.round} does not fit in u32")
    return HEADER.pack(MAGIC, VERSION, int(msg.kind), msg.round, len(msg.payload)) + msg.payload


def decode_header(buf: bytes) -> tuple[Kind, int, int]:
    if len(buf) < HEADER_SIZE:
        raise Truncation(f"header needs {HEADER_SIZE} bytes, got {len(buf)}")
    magic, version, kind, rnd, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"version {version}, expected {VERSION}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise UnknownKind(f"unknown message kind {kind}") from None
    if length > MAX_PAYLOAD:
        raise MessageTooLarge(f"declared payload of {length} bytes exceeds limit {MAX_PAYLOAD}")
    return kind, rnd, length


def decode_message(buf: bytes) -> Message:
    kind, rnd, length = decode_header(buf)
    have = len(buf) - HEADER_SIZE
    if have != length:
        raise Truncation(f"payload length field says {length} bytes, frame carries {have}")
    return Message(kind, rnd, bytes(buf[HEADER_SIZE:]))


def read_frame(read_exact: Callable[[int], bytes], max_payload: int = MAX_PAYLOAD) -> Message:
    """Read one frame from a stream given a function returning exactly n bytes."""
    head = read_exact(HEADER_SIZE)
    kind, rnd, length = decode_header(head)
    if length > max_payload:
        raise MessageTooLarge(f"declared payload of {length} bytes exceeds limit {max_payload}")
    return Message(kind, rnd, read_exact(length))


# --- tensor blocks --------------------------------------------------------------


def encode_blocks(blocks: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        a = np.asarray(arr)
        code = _DTYPE_CODES.get(a.dtype)
        if code is None:
            raise ValueError(f"block {name!r}: unsupported dtype {a.dtype}")
        raw = name.encode("utf-8")
        if len(raw) >= 2**16 or a.ndim >= 256:
            raise ValueError(f"block {name!r} cannot be framed")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_blocks(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise MalformedPayload(f"block payload truncated at byte {pos} (need {n} more)")
        out = view[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedPayload(f"block name is not utf-8: {e}") from None
        if name in out:
            raise MalformedPayload(f"duplicate block {name!r}")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise MalformedPayload(f"block {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        n = math.prod(dims)
        raw = take(n * dt.itemsize)
        out[name] = np.frombuffer(raw, dtype=dt).astype(np.float32).reshape(dims)
    if pos != len(view):
        raise MalformedPayload(f"{len(view) - pos} trailing bytes after {count} blocks")
    return out


def block_param_bytes(blocks: Mapping[str, np.ndarray]) -> int:
    return sum(int(np.asarray(a).size) * 4 for a in blocks.values())


# --- control payloads -------------------------------------------------------------


def encode_hello(node: int, config_hash: bytes) -> bytes:
    if len(config_hash) != CONFIG_HASH_LEN:
        raise ValueError("config hash must be 32 bytes")
    return struct.pack("<I", node) + config_hash


def decode_hello(buf: bytes) -> tuple[int, bytes]:
    if len(buf) != 4 + CONFIG_HASH_LEN:
        raise MalformedPayload(f"HELLO payload must be {4 + CONFIG_HASH_LEN} bytes, got {len(buf)}")
    return struct.unpack_from("<I", buf)[0], bytes(buf[4:])


@dataclass(frozen=True)
class Assignment:
    node: int
    nodes: int
    rounds: int
    start_round: int
    experts: tuple[int, ...]


def encode_assign(a: Assignment) -> bytes:
    return struct.pack(f"<5I{len(a.experts)}I", a.node, a.nodes, a.rounds, a.start_round, len(a.experts), *a.experts)


def decode_assign(buf: bytes) -> Assignment:
    if len(buf) < 20:
        raise MalformedPayload("ASSIGN payload too short")
    node, nodes, rounds, start, count = struct.unpack_from("<5I", buf)
    if len(buf) != 20 + 4 * count:
        raise MalformedPayload(f"ASSIGN declares {count} experts but carries {(len(buf) - 20) / 4}")
    experts = struct.unpack_from(f"<{count}I", buf, 20)
    return Assignment(node, nodes, rounds, start, tuple(experts))


def encode_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_json(buf: bytes):
    try:
        return json.loads(bytes(buf).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedPayload(f"bad JSON payload: {e}") from None


# --- ledger -----------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    direction: str  # "up" (worker -> server) or "down"
    node: int
    kind: Kind
    round: int
    nbytes: int
    param_bytes: int
    blocks: tuple[str, ...] = ()


@dataclass
class CommLedger:
    """Every message crossing the server boundary, counted as header + payload."""

    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, direction: str, node: int, msg: Message, blocks: Mapping[str, np.ndarray] | None = None) -> None:
        names = tuple(blocks) if blocks is not None else ()
        pbytes = block_param_bytes(blocks) if blocks is not None else 0
        self.entries.append(LedgerEntry(direction, node, msg.kind, msg.round, msg.wire_size, pbytes, names))

    def count(self, kind: Kind, direction: str | None = None) -> int:
        return sum(1 for e in self.entries if e.kind == kind and (direction is None or e.direction == direction))

    def total(self, direction: str | None = None) -> int:
        return sum(e.nbytes for e in self.entries if direction is None or e.direction == direction)

    def per_node_round(self) -> dict[tuple[int, int], dict[str, int]]:
        out: dict[tuple[int, int], dict[str, int]] = defaultdict(lambda: {"bytes_up": 0, "bytes_down": 0})
        for e in self.entries:
            out[(e.node, e.round)]["bytes_up" if e.direction == "up" else "bytes_down"] += e.nbytes
        return dict(out)

    def sync_cycle(self, t: int) -> dict[str, int]:
        """Traffic of synchronisation round t: broadcast of theta^(t-1) down plus round-t uploads."""
        total = params = 0
        for e in self.entries:
            if (e.kind == Kind.GLOBAL_MODEL and e.round == t - 1) or (e.kind == Kind.LOCAL_UPDATE and e.round == t):
                total += e.nbytes
                params += e.param_bytes
        return {"bytes": total, "param_bytes": params, "overhead": total - params}

    def snapshot(self) -> dict:
        rows = sorted(self.per_node_round().items())
        return {
            "bytes_up": self.total("up"),
            "bytes_down": self.total("down"),
            "messages": len(self.entries),
            "per_node_round": [{"node": n, "round": r, **v} for (n, r), v in rows],
        }
