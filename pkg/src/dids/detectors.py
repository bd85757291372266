"""Six attack detectors over the normalized event stream.

Each detector is state-in/state-out: it owns a small piece of mutable
window or table state held by the analyzer, takes one event, and either
returns an AlertSpec or nothing.  Replaying a trace twice yields identical
alert sequences.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .events import EventKind, SensorEvent
from .session import (
    CertFailure,
    CertVerdict,
    SessionRegistry,
    is_well_formed_session_id,
)

NS_PER_S = 1_000_000_000


class AlertMessage(str, Enum):
    DDOS_FLOOD = "DDOS_FLOOD"
    AUTH_BRUTE_FORCE = "AUTH_BRUTE_FORCE"
    MITM_FORGED_CERT = "MITM_FORGED_CERT"
    CERT_EXPIRED = "CERT_EXPIRED"
    SESSION_HIJACK = "SESSION_HIJACK"
    DNS_SPOOF = "DNS_SPOOF"
    ARP_POISON = "ARP_POISON"
    PROTOCOL_VIOLATION = "PROTOCOL_VIOLATION"
    TRUNCATION_SUSPECTED = "TRUNCATION_SUSPECTED"


class Severity(str, Enum):
    INFO = "Info"
    WARNING = "Warning"
    CRITICAL = "Critical"


# Drives console triage and the blocking decision in classification.
SEVERITY_BY_MESSAGE: dict[AlertMessage, Severity] = {
    AlertMessage.MITM_FORGED_CERT: Severity.CRITICAL,
    AlertMessage.DDOS_FLOOD: Severity.CRITICAL,
    AlertMessage.SESSION_HIJACK: Severity.CRITICAL,
    AlertMessage.AUTH_BRUTE_FORCE: Severity.WARNING,
    AlertMessage.ARP_POISON: Severity.WARNING,
    AlertMessage.DNS_SPOOF: Severity.WARNING,
    AlertMessage.CERT_EXPIRED: Severity.INFO,
    AlertMessage.PROTOCOL_VIOLATION: Severity.INFO,
    AlertMessage.TRUNCATION_SUSPECTED: Severity.INFO,
}

# Certificate failures that mark a forged certificate rather than a stale one.
FORGERY_REASONS = frozenset(
    {
        CertFailure.SELF_SIGNED,
        CertFailure.UNKNOWN_ISSUER,
        CertFailure.BAD_SIGNATURE,
        CertFailure.REVOKED,
    }
)


@dataclass(frozen=True)
class AlertSpec:
    """What a detector saw: the message token, the target, and a detail code."""

    message: AlertMessage
    address: str
    detail: str = ""

    @property
    def severity(self) -> Severity:
        return SEVERITY_BY_MESSAGE[self.message]


@dataclass
class DetectorConfig:
    ddos_window_s: int = 10
    ddos_threshold: int = 100
    bf_window_s: int = 60
    bf_threshold: int = 5
    hijack_enabled: bool = True
    dns_expected: dict[str, str] = field(default_factory=dict)
    arp_authoritative: dict[str, str] = field(default_factory=dict)

    def validate(self) -> list[str]:
        problems = []
        for name in ("ddos_window_s", "ddos_threshold", "bf_window_s", "bf_threshold"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        return problems


class SlidingWindow:
    """Per-key sample counts over a trailing time window.

    Samples older than the window span are evicted before any count is
    read; a sample at exactly now - window is already outside.
    """

    def __init__(self, window_ns: int):
        self.window_ns = window_ns
        self._samples: deque[tuple[int, str]] = deque()
        self._counts: dict[str, int] = {}
        self._last_fired: dict[str, int] = {}

    def _evict(self, now: int) -> None:
        cutoff = now - self.window_ns
        samples = self._samples
        while samples and samples[0][0] <= cutoff:
            _, key = samples.popleft()
            remaining = self._counts[key] - 1
            if remaining:
                self._counts[key] = remaining
            else:
                del self._counts[key]

    def add(self, ts: int, key: str) -> int:
        """Record one sample and return the key's in-window count."""
        self._evict(ts)
        self._samples.append((ts, key))
        self._counts[key] = self._counts.get(key, 0) + 1
        return self._counts[key]

    def count(self, now: int, key: str) -> int:
        self._evict(now)
        return self._counts.get(key, 0)

    def clear_key(self, key: str) -> None:
        if key not in self._counts:
            return
        self._samples = deque(s for s in self._samples if s[1] != key)
        del self._counts[key]

    def should_fire(self, ts: int, key: str) -> bool:
        """At most one alert per key per window span."""
        last = self._last_fired.get(key)
        if last is not None and ts - last < self.window_ns:
            return False
        self._last_fired[key] = ts
        return True


def detect_ddos(window: SlidingWindow, ev: SensorEvent, cfg: DetectorConfig) -> AlertSpec | None:
    """Flag a flood toward one target; counts across distinct sources."""
    if ev.kind not in (EventKind.CONN_OPEN, EventKind.HTTP_REQUEST):
        return None
    target = ev.payload["server"]
    count = window.add(ev.ts_mono, target)
    if count > cfg.ddos_threshold and window.should_fire(ev.ts_mono, target):
        return AlertSpec(AlertMessage.DDOS_FLOOD, address=target)
    return None


def detect_bruteforce(window: SlidingWindow, ev: SensorEvent, cfg: DetectorConfig) -> AlertSpec | None:
    """Flag repeated authentication failures from one source; success resets."""
    if ev.kind is not EventKind.AUTH_ATTEMPT:
        return None
    key = ev.source_addr
    if ev.payload["ok"] == "1":
        window.clear_key(key)
        return None
    failures = window.add(ev.ts_mono, key)
    if failures >= cfg.bf_threshold and window.should_fire(ev.ts_mono, key):
        return AlertSpec(
            AlertMessage.AUTH_BRUTE_FORCE,
            address=ev.payload["user"],
            detail=f"failures={failures}",
        )
    return None


def detect_mitm(verdict: CertVerdict, ev: SensorEvent) -> AlertSpec | None:
    """Classify a bad handshake certificate: forged vs merely out of validity."""
    if ev.kind is not EventKind.HANDSHAKE_INIT or verdict.valid:
        return None
    reasons = set(verdict.reasons)
    detail = ",".join(r.value for r in verdict.reasons)
    if reasons & FORGERY_REASONS:
        return AlertSpec(
            AlertMessage.MITM_FORGED_CERT, address=ev.payload["server"], detail=detail
        )
    return AlertSpec(AlertMessage.CERT_EXPIRED, address=ev.payload["server"], detail=detail)


def detect_session_hijack(registry: SessionRegistry, ev: SensorEvent, cfg: DetectorConfig) -> AlertSpec | None:
    """Flag a session token used from the wrong source, or one never issued."""
    if not cfg.hijack_enabled or ev.kind is not EventKind.HTTP_REQUEST:
        return None
    token = ev.payload["session"]
    s = registry.get(token)
    if s is not None:
        if (ev.source_addr, ev.source_mac) != (s.source_addr, s.source_mac):
            return AlertSpec(
                AlertMessage.SESSION_HIJACK, address=s.server_id, detail="BindingMismatch"
            )
        return None
    if token not in registry.issued and is_well_formed_session_id(token):
        return AlertSpec(
            AlertMessage.SESSION_HIJACK,
            address=ev.payload["server"],
            detail="TokenPrediction",
        )
    return None


def detect_dns_spoof(expected: dict[str, str], ev: SensorEvent) -> AlertSpec | None:
    """Flag an answer that contradicts the expected name-to-address table."""
    if ev.kind is not EventKind.DNS_ANSWER:
        return None
    qname = ev.payload["qname"]
    answer = ev.payload["ip"]
    known = expected.get(qname)
    if known is not None and answer != known:
        return AlertSpec(
            AlertMessage.DNS_SPOOF, address=qname, detail=f"expected={known};got={answer}"
        )
    return None


def detect_arp_poison(
    authoritative: dict[str, str], learned: dict[str, str], ev: SensorEvent
) -> AlertSpec | None:
    """Flag a binding contradicting the authoritative table or a learned one.

    First sight of an unlisted ip is learned; authoritative entries are
    never overwritten by traffic.
    """
    if ev.kind is not EventKind.ARP_BINDING:
        return None
    ip = ev.payload["ip"]
    mac = ev.payload["mac"]
    trusted = authoritative.get(ip)
    if trusted is not None:
        if mac != trusted:
            return AlertSpec(
                AlertMessage.ARP_POISON, address=ip, detail=f"expected={trusted};got={mac}"
            )
        return None
    seen = learned.get(ip)
    if seen is None:
        learned[ip] = mac
        return None
    if mac != seen:
        return AlertSpec(
            AlertMessage.ARP_POISON, address=ip, detail=f"learned={seen};got={mac}"
        )
    return None
