"""Sensor event ingestion: trace parsing, clock normalization, ordered streams.

The gateway consumes a single pre-merged stream of normalized observations.
Each observation is one line of the v1 trace format:

    event_id|kind|ts_mono_ns|ntp_stamp|source_addr|source_mac|node|payload

where payload is a ``;``-separated list of ``key=value`` pairs whose keys are
fixed per event kind (see ``PAYLOAD_SCHEMAS``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Iterator

# Timestamps are carried as non-negative signed-64-bit values.
TS_MAX = 2**63 - 1

NS_PER_S = 1_000_000_000


class TraceError(Exception):
    """Base class for trace ingestion failures."""


class MalformedLine(TraceError):
    """A trace line violates the v1 format (field count, enum, number, schema)."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        super().__init__(message if line_no is None else f"line {line_no}: {message}")


class UnknownKind(MalformedLine):
    """The kind field names no known event kind."""


class Overflow(TraceError):
    """A shifted timestamp left the representable range."""


class IoFailure(TraceError):
    """The trace source could not be read."""


class InvariantViolation(TraceError):
    """A stream-level invariant failed at a specific line."""

    def __init__(self, message: str, line_no: int):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class EventKind(str, Enum):
    CONN_OPEN = "ConnOpen"
    HANDSHAKE_INIT = "HandshakeInit"
    SSL_RECORD = "SslRecord"
    AUTH_ATTEMPT = "AuthAttempt"
    DNS_ANSWER = "DnsAnswer"
    ARP_BINDING = "ArpBinding"
    HTTP_REQUEST = "HttpRequest"
    CONN_CLOSE = "ConnClose"
    HOST_LOG = "HostLog"


# Required and optional payload keys per kind, in canonical emission order.
PAYLOAD_SCHEMAS: dict[EventKind, tuple[tuple[str, ...], tuple[str, ...]]] = {
    EventKind.CONN_OPEN: (("server",), ()),
    EventKind.HANDSHAKE_INIT: (
        (
            "client",
            "server",
            "mac",
            "key",
            "suite",
            "cert_subject",
            "cert_issuer",
            "cert_class",
            "cert_nb",
            "cert_na",
            "cert_pub",
            "cert_sig",
        ),
        ("resume",),
    ),
    EventKind.SSL_RECORD: (("session", "rtype"), ()),
    EventKind.AUTH_ATTEMPT: (("user", "ok"), ()),
    EventKind.DNS_ANSWER: (("qname", "ip"), ()),
    EventKind.ARP_BINDING: (("ip", "mac"), ()),
    EventKind.HTTP_REQUEST: (("request", "session", "server"), ("digest",)),
    EventKind.CONN_CLOSE: (("session",), ()),
    EventKind.HOST_LOG: (("file", "digest", "owner", "group"), ()),
}

SSL_RECORD_TYPES = frozenset(
    {"HandshakeFinish", "ChangeCipherSpec", "AlertClose", "AlertError", "AppData"}
)
CERT_CLASS_TOKENS = frozenset({"DV", "OV", "EV"})
SUPPORTED_SUITES = frozenset({"1", "2"})

_MAC_RE = re.compile(r"^[0-9a-f]{2}(:[0-9a-f]{2}){5}$")
_IPV4_RE = re.compile(r"^(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3})$")
_HEX32_RE = re.compile(r"^[0-9a-f]{64}$")


def is_ipv4(text: str) -> bool:
    m = _IPV4_RE.match(text)
    return bool(m) and all(int(part) <= 255 for part in m.groups())


def is_mac(text: str) -> bool:
    return bool(_MAC_RE.match(text))


@dataclass(frozen=True)
class SensorEvent:
    """One normalized sensor observation."""

    event_id: int
    kind: EventKind
    ts_mono: int
    ntp_stamp: int
    source_addr: str
    source_mac: str
    node: str
    payload: dict[str, str]


@dataclass(frozen=True)
class TraceSource:
    """Descriptor for a v1 trace: a path or an open text handle."""

    path: str | Path | None = None
    handle: IO[str] | None = None
    format_version: int = 1

    def __post_init__(self) -> None:
        if self.format_version != 1:
            raise ValueError(f"unsupported trace format version {self.format_version}")
        if self.path is None and self.handle is None:
            raise ValueError("TraceSource needs a path or a handle")


def _check_int(text: str, field: str, line_no: int | None) -> int:
    try:
        value = int(text)
    except ValueError:
        raise MalformedLine(f"non-numeric {field}: {text!r}", line_no) from None
    if not 0 <= value <= TS_MAX:
        raise MalformedLine(f"{field} out of range: {value}", line_no)
    return value


def _check_payload(kind: EventKind, payload: dict[str, str], line_no: int | None) -> None:
    required, optional = PAYLOAD_SCHEMAS[kind]
    missing = [k for k in required if k not in payload]
    if missing:
        raise MalformedLine(f"{kind.value} payload missing {missing}", line_no)
    unknown = [k for k in payload if k not in required and k not in optional]
    if unknown:
        raise MalformedLine(f"{kind.value} payload has unknown keys {unknown}", line_no)

    if kind is EventKind.SSL_RECORD and payload["rtype"] not in SSL_RECORD_TYPES:
        raise MalformedLine(f"bad record type {payload['rtype']!r}", line_no)
    if kind is EventKind.AUTH_ATTEMPT and payload["ok"] not in ("0", "1"):
        raise MalformedLine(f"bad ok flag {payload['ok']!r}", line_no)
    if kind is EventKind.HANDSHAKE_INIT:
        if payload["cert_class"] not in CERT_CLASS_TOKENS:
            raise MalformedLine(f"bad cert class {payload['cert_class']!r}", line_no)
        if payload["suite"] not in SUPPORTED_SUITES:
            raise MalformedLine(f"bad cipher suite {payload['suite']!r}", line_no)
        if not _HEX32_RE.match(payload["key"]):
            raise MalformedLine("client key must be 32 bytes of hex", line_no)
        if not _HEX32_RE.match(payload["cert_sig"]):
            raise MalformedLine("certificate signature must be 32 bytes of hex", line_no)
        _check_int(payload["cert_nb"], "cert_nb", line_no)
        _check_int(payload["cert_na"], "cert_na", line_no)


def parse_trace_line(line: str, line_no: int | None = None) -> SensorEvent:
    """Parse one v1 trace line into a SensorEvent.

    Raises MalformedLine (or its subclass UnknownKind) on any format
    violation; malformed input is never silently skipped.
    """
    fields = line.rstrip("\n").split("|")
    if len(fields) != 8:
        raise MalformedLine(f"expected 8 fields, got {len(fields)}", line_no)
    raw_id, raw_kind, raw_ts, raw_ntp, addr, mac, node, raw_payload = fields

    event_id = _check_int(raw_id, "event_id", line_no)
    try:
        kind = EventKind(raw_kind)
    except ValueError:
        raise UnknownKind(f"unknown kind {raw_kind!r}", line_no) from None
    ts_mono = _check_int(raw_ts, "ts_mono", line_no)
    ntp_stamp = _check_int(raw_ntp, "ntp_stamp", line_no)

    if not is_ipv4(addr):
        raise MalformedLine(f"bad source address {addr!r}", line_no)
    if not is_mac(mac):
        raise MalformedLine(f"bad source mac {mac!r}", line_no)
    if not node:
        raise MalformedLine("empty node", line_no)

    payload: dict[str, str] = {}
    if raw_payload:
        for pair in raw_payload.split(";"):
            key, eq, value = pair.partition("=")
            if not eq or not key:
                raise MalformedLine(f"bad payload pair {pair!r}", line_no)
            if key in payload:
                raise MalformedLine(f"duplicate payload key {key!r}", line_no)
            payload[key] = value
    _check_payload(kind, payload, line_no)

    return SensorEvent(event_id, kind, ts_mono, ntp_stamp, addr, mac, node, payload)


def format_trace_line(event: SensorEvent) -> str:
    """Emit one v1 trace line, newline terminated. Inverse of parse_trace_line.

    Payload keys are written in schema order so identical events always
    produce identical bytes.
    """
    required, optional = PAYLOAD_SCHEMAS[event.kind]
    keys = [k for k in required if k in event.payload]
    keys += sorted(k for k in optional if k in event.payload)
    for key, value in event.payload.items():
        if any(ch in value for ch in "|;=\n") or any(ch in key for ch in "|;=\n"):
            raise ValueError(f"payload {key}={value!r} contains reserved characters")
    payload = ";".join(f"{k}={event.payload[k]}" for k in keys)
    return (
        f"{event.event_id}|{event.kind.value}|{event.ts_mono}|{event.ntp_stamp}"
        f"|{event.source_addr}|{event.source_mac}|{event.node}|{payload}\n"
    )


def normalize_clock(event: SensorEvent, offset_ns: int) -> SensorEvent:
    """Shift an event's monotonic clock, keeping the NTP clock consistent.

    The implied NTP epoch (ntp_stamp - ts_mono // 1e9) is preserved, so a
    whole stream shifted by the same offset keeps one coherent dual clock.
    """
    new_ts = event.ts_mono + offset_ns
    new_ntp = event.ntp_stamp - event.ts_mono // NS_PER_S + new_ts // NS_PER_S
    if not 0 <= new_ts <= TS_MAX or not 0 <= new_ntp <= TS_MAX:
        raise Overflow(f"shifted timestamp out of range (ts={new_ts}, ntp={new_ntp})")
    return replace(event, ts_mono=new_ts, ntp_stamp=new_ntp)


def iter_events(lines: Iterable[str]) -> Iterator[SensorEvent]:
    """Yield events from trace lines, enforcing per-stream invariants.

    event_id must strictly increase and ts_mono must never decrease; the
    first offending line raises InvariantViolation with its line number.
    """
    last_id: int | None = None
    last_ts: int | None = None
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        event = parse_trace_line(line, line_no)
        if last_id is not None and event.event_id <= last_id:
            raise InvariantViolation(
                f"event_id {event.event_id} does not increase past {last_id}", line_no
            )
        if last_ts is not None and event.ts_mono < last_ts:
            raise InvariantViolation(
                f"ts_mono {event.ts_mono} decreases below {last_ts}", line_no
            )
        last_id, last_ts = event.event_id, event.ts_mono
        yield event


def open_stream(src: TraceSource) -> Iterator[SensorEvent]:
    """Open a trace source and yield its events in file order."""
    if src.handle is not None:
        yield from iter_events(src.handle)
        return
    assert src.path is not None
    try:
        fh = open(src.path, "r", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot open trace {src.path}: {exc}") from exc
    with fh:
        yield from iter_events(fh)
