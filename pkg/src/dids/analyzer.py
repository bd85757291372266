"""The gateway core: drives sessions, renders trust verdicts, batches forwards.

One analyzer consumes one ordered event stream.  Every event is offered to
every detector first, then the event advances session state or gets
classified; trusted requests queue FIFO toward the next hop and alerts go
to the append-only store.  Identical inputs always produce identical
reports, alert logs, and batches.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable

from .alerts import AlertRecord, AlertStore, make_alert
from .detectors import (
    AlertMessage,
    AlertSpec,
    DetectorConfig,
    Severity,
    SlidingWindow,
    detect_arp_poison,
    detect_bruteforce,
    detect_ddos,
    detect_dns_spoof,
    detect_mitm,
    detect_session_hijack,
)
from .events import EventKind, SensorEvent, is_ipv4
from .session import (
    Certificate,
    CertClass,
    CipherParams,
    DuplicateLiveSession,
    HandshakeRequest,
    InvalidState,
    RecordType,
    Rejection,
    SessionRegistry,
    SessionState,
    State,
    TrustStore,
    CloseOutcome,
    advance,
    begin_handshake,
    close_session,
    resume_session,
    validate_certificate,
)

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000

DEQUE_CAPACITY = 10_000

_CERT_CLASS_BY_TOKEN = {
    "DV": CertClass.DOMAIN_VALIDATED,
    "OV": CertClass.ORG_VALIDATED,
    "EV": CertClass.EXTENDED_VALIDATION,
}


class SessionUnknown(Exception):
    """A request referenced no registered session."""


class QueueFull(Exception):
    """The trusted deque is at capacity; the caller must flush."""


class NoExpectedDigest(Exception):
    """No content digest is registered for the requested server."""


class PolicyError(ValueError):
    """A PolicyConfig violates its invariants."""


class Verdict(str, Enum):
    TRUSTED = "Trusted"
    UNTRUSTED = "Untrusted"


class SubPath(str, Enum):
    P1_USER_TO_ROUTER = "P1_UserToRouter"
    P2_DIDS_CHECK = "P2_DidsCheck"
    P3_CONTENT_INTEGRITY = "P3_ContentIntegrity"
    P4_TO_WEB_SERVER = "P4_ToWebServer"


@dataclass(frozen=True)
class TrustVerdict:
    verdict: Verdict
    reasons: tuple[str, ...]
    session_id: str
    decided_at: int


@dataclass(frozen=True)
class TrustedRequest:
    request_id: str
    session_id: str
    source_addr: str
    target: str
    enqueued_at: int


@dataclass(frozen=True)
class ForwardBatch:
    batch_id: int
    requests: tuple[TrustedRequest, ...]
    flushed_at: int
    next_hop: str


@dataclass(frozen=True)
class RequestOutcome:
    """Final verdict for one request and the furthest sub-path it reached."""

    request_id: str
    verdict: TrustVerdict
    path_reached: SubPath


@dataclass
class PolicyConfig:
    """Detector thresholds, block/allow lists and batch policy.

    Swapped atomically at event boundaries by the control API.
    """

    detector: DetectorConfig = field(default_factory=DetectorConfig)
    blocklist: set[str] = field(default_factory=set)
    allowlist: set[str] = field(default_factory=set)
    batch_max: int = 8
    flush_interval_ms: int = 50
    access_policy: dict[str, set[str]] = field(default_factory=dict)
    content_digests: dict[str, str] = field(default_factory=dict)
    version: int = 1

    def validate(self) -> list[str]:
        problems = self.detector.validate()
        if self.batch_max < 1:
            problems.append("batch_max must be >= 1")
        if self.flush_interval_ms <= 0:
            problems.append("flush_interval_ms must be positive")
        overlap = self.blocklist & self.allowlist
        if overlap:
            problems.append(f"blocklist and allowlist overlap: {sorted(overlap)}")
        for addr in sorted(self.blocklist | self.allowlist):
            if not is_ipv4(addr):
                problems.append(f"bad address in lists: {addr!r}")
        return problems

    def check(self) -> "PolicyConfig":
        problems = self.validate()
        if problems:
            raise PolicyError("; ".join(problems))
        return self

    def to_json_dict(self) -> dict:
        d = self.detector
        return {
            "ddos_window_s": d.ddos_window_s,
            "ddos_threshold": d.ddos_threshold,
            "bf_window_s": d.bf_window_s,
            "bf_threshold": d.bf_threshold,
            "hijack_enabled": d.hijack_enabled,
            "dns_expected": dict(sorted(d.dns_expected.items())),
            "arp_authoritative": dict(sorted(d.arp_authoritative.items())),
            "blocklist": sorted(self.blocklist),
            "allowlist": sorted(self.allowlist),
            "batch_max": self.batch_max,
            "flush_interval_ms": self.flush_interval_ms,
            "access_policy": {k: sorted(v) for k, v in sorted(self.access_policy.items())},
            "content_digests": dict(sorted(self.content_digests.items())),
            "version": self.version,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "PolicyConfig":
        known = {
            "ddos_window_s",
            "ddos_threshold",
            "bf_window_s",
            "bf_threshold",
            "hijack_enabled",
            "dns_expected",
            "arp_authoritative",
            "blocklist",
            "allowlist",
            "batch_max",
            "flush_interval_ms",
            "access_policy",
            "content_digests",
            "version",
        }
        unknown = set(data) - known
        if unknown:
            raise PolicyError(f"unknown policy keys: {sorted(unknown)}")
        base = cls()
        det = base.detector
        try:
            detector = DetectorConfig(
                ddos_window_s=int(data.get("ddos_window_s", det.ddos_window_s)),
                ddos_threshold=int(data.get("ddos_threshold", det.ddos_threshold)),
                bf_window_s=int(data.get("bf_window_s", det.bf_window_s)),
                bf_threshold=int(data.get("bf_threshold", det.bf_threshold)),
                hijack_enabled=bool(data.get("hijack_enabled", det.hijack_enabled)),
                dns_expected=dict(data.get("dns_expected", {})),
                arp_authoritative=dict(data.get("arp_authoritative", {})),
            )
            policy = cls(
                detector=detector,
                blocklist=set(data.get("blocklist", [])),
                allowlist=set(data.get("allowlist", [])),
                batch_max=int(data.get("batch_max", base.batch_max)),
                flush_interval_ms=int(data.get("flush_interval_ms", base.flush_interval_ms)),
                access_policy={k: set(v) for k, v in data.get("access_policy", {}).items()},
                content_digests=dict(data.get("content_digests", {})),
                version=int(data.get("version", 1)),
            )
        except (TypeError, ValueError) as exc:
            raise PolicyError(f"bad policy value: {exc}") from exc
        return policy.check()


class TrustedDeque:
    """FIFO queue of trusted requests; double-ended so policy may later
    push high-priority items at the head."""

    def __init__(self, capacity: int = DEQUE_CAPACITY):
        self.capacity = capacity
        self._items: deque[TrustedRequest] = deque()

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def enqueue(self, tr: TrustedRequest) -> None:
        if len(self._items) >= self.capacity:
            raise QueueFull(f"deque at capacity {self.capacity}")
        self._items.append(tr)

    def push_priority(self, tr: TrustedRequest) -> None:
        # Head insertion; retained for policy use, unused by default.
        if len(self._items) >= self.capacity:
            raise QueueFull(f"deque at capacity {self.capacity}")
        self._items.appendleft(tr)

    def oldest(self) -> TrustedRequest | None:
        return self._items[0] if self._items else None

    def take(self, n: int) -> list[TrustedRequest]:
        return [self._items.popleft() for _ in range(min(n, len(self._items)))]


def enqueue_trusted(dq: TrustedDeque, tr: TrustedRequest) -> TrustedDeque:
    dq.enqueue(tr)
    return dq


def flush_batch(
    dq: TrustedDeque,
    policy: PolicyConfig,
    now: int,
    batch_id: int = 1,
    next_hop: str = "upstream",
    force: bool = False,
) -> ForwardBatch | None:
    """Drain up to batch_max requests from the head when a trigger holds.

    Triggers: queue size reached batch_max, or the oldest entry aged past
    flush_interval_ms.  ``force`` drains regardless (shutdown path).
    """
    oldest = dq.oldest()
    if oldest is None:
        return None
    aged = now - oldest.enqueued_at >= policy.flush_interval_ms * NS_PER_MS
    if not (force or aged or len(dq) >= policy.batch_max):
        return None
    return ForwardBatch(
        batch_id=batch_id,
        requests=tuple(dq.take(policy.batch_max)),
        flushed_at=now,
        next_hop=next_hop,
    )


def content_integrity_check(payload_digest: str, expected: str | None) -> bool:
    """Compare the response content digest against the server's registered one."""
    if expected is None:
        raise NoExpectedDigest("no content digest registered for this server")
    return payload_digest == expected


def classify_request(
    ev: SensorEvent,
    session: SessionState | None,
    policy: PolicyConfig,
    detector_hits: Iterable[AlertSpec] = (),
) -> TrustVerdict:
    """Render the trusted/untrusted decision for one request (sub-path P2).

    Every applicable reason is collected; a request is trusted only when
    its session is established, its source is not blocked, no blocking
    detector hit fired on it, and the access policy permits the pair.
    """
    if session is None:
        raise SessionUnknown(f"no session registered for {ev.payload.get('session')!r}")
    reasons: list[str] = []
    if session.state is not State.ESTABLISHED:
        reasons.append("SessionNotEstablished")
    if ev.source_addr in policy.blocklist:
        reasons.append("PolicyBlocked")
    for hit in detector_hits:
        if hit.severity is not Severity.INFO:
            reasons.append(f"DetectorHit:{hit.message.value}")
    allowed = policy.access_policy.get(session.server_id)
    if allowed is not None and session.client_id not in allowed:
        reasons.append("AccessDenied")
    verdict = Verdict.UNTRUSTED if reasons else Verdict.TRUSTED
    return TrustVerdict(verdict, tuple(reasons), session.session_id, ev.ts_mono)


@dataclass
class Counters:
    events: int = 0
    sessions: int = 0
    resumed: int = 0
    rejected_handshakes: int = 0
    trusted: int = 0
    untrusted: int = 0
    batches: int = 0
    aborted: int = 0
    clean_closes: int = 0
    truncated_closes: int = 0
    stale_closes: int = 0
    alerts: dict[str, int] = field(default_factory=dict)

    def count_alert(self, message: AlertMessage) -> None:
        self.alerts[message.value] = self.alerts.get(message.value, 0) + 1


@dataclass(frozen=True)
class PipelineReport:
    counters: Counters
    alerts: tuple[AlertRecord, ...]
    batches: tuple[ForwardBatch, ...]
    outcomes: tuple[RequestOutcome, ...]

    def alert_total(self) -> int:
        return len(self.alerts)

    def render(self) -> str:
        """Human-readable summary plus one machine-readable line per alert."""
        from .alerts import format_alert

        c = self.counters
        lines = [
            "pipeline report",
            f"events={c.events}",
            f"sessions={c.sessions}",
            f"resumed={c.resumed}",
            f"rejected_handshakes={c.rejected_handshakes}",
            f"trusted={c.trusted}",
            f"untrusted={c.untrusted}",
            f"batches={c.batches}",
            f"clean_closes={c.clean_closes}",
            f"truncated_closes={c.truncated_closes}",
            f"alerts_total={len(self.alerts)}",
        ]
        for token in sorted(c.alerts):
            lines.append(f"alert[{token}]={c.alerts[token]}")
        out = "\n".join(lines) + "\n"
        for a in self.alerts:
            out += format_alert(a)
        return out


def handshake_request_from_event(ev: SensorEvent) -> HandshakeRequest:
    """Map a HandshakeInit payload onto the session-layer request type."""
    p = ev.payload
    cert = Certificate(
        subject=p["cert_subject"],
        issuer=p["cert_issuer"],
        cert_class=_CERT_CLASS_BY_TOKEN[p["cert_class"]],
        not_before=int(p["cert_nb"]),
        not_after=int(p["cert_na"]),
        public_id=p["cert_pub"],
        signature=bytes.fromhex(p["cert_sig"]),
    )
    return HandshakeRequest(
        client_id=p["client"],
        client_mac=p["mac"],
        client_secret_key=bytes.fromhex(p["key"]),
        server_id=p["server"],
        certificate=cert,
        proposed_params=CipherParams(int(p["suite"]), mac_key_id=f"mk-{p['client']}"),
    )


class Analyzer:
    """Single logical consumer owning sessions, detector state and the deque."""

    def __init__(
        self,
        policy: PolicyConfig | None = None,
        truststore: TrustStore | None = None,
        next_hop: str = "upstream",
        on_alert: Callable[[AlertRecord], None] | None = None,
        on_batch: Callable[[ForwardBatch], None] | None = None,
    ):
        self.policy = (policy or PolicyConfig()).check()
        self.truststore = truststore or TrustStore()
        self.next_hop = next_hop
        self.on_alert = on_alert
        self.on_batch = on_batch

        self.registry = SessionRegistry()
        self.store = AlertStore()
        self.deque = TrustedDeque()
        self.counters = Counters()
        self.batches: list[ForwardBatch] = []
        self.outcomes: list[RequestOutcome] = []
        self._arp_learned: dict[str, str] = {}
        self._make_windows()

        self._policy_lock = threading.Lock()
        self._pending_policy: PolicyConfig | None = None
        self._last_ts = 0

    def _make_windows(self) -> None:
        d = self.policy.detector
        self._ddos_window = SlidingWindow(d.ddos_window_s * NS_PER_S)
        self._bf_window = SlidingWindow(d.bf_window_s * NS_PER_S)

    def submit_policy(self, policy: PolicyConfig) -> None:
        """Mailbox write; the analyzer adopts it at the next event boundary."""
        with self._policy_lock:
            self._pending_policy = policy

    def _adopt_pending_policy(self) -> None:
        with self._policy_lock:
            pending, self._pending_policy = self._pending_policy, None
        if pending is None:
            return
        old = self.policy.detector
        self.policy = pending
        new = pending.detector
        if (new.ddos_window_s, new.bf_window_s) != (old.ddos_window_s, old.bf_window_s):
            self._make_windows()

    # -- alert plumbing ------------------------------------------------

    def _emit(self, spec: AlertSpec, ev: SensorEvent, session: SessionState | None) -> None:
        record = make_alert(spec, ev, session, self.store.next_id)
        self.store.append(record)
        self.counters.count_alert(spec.message)
        if self.on_alert:
            self.on_alert(record)

    def _flush(self, now: int, force: bool = False) -> None:
        while True:
            batch = flush_batch(
                self.deque,
                self.policy,
                now,
                batch_id=self.counters.batches + 1,
                next_hop=self.next_hop,
                force=force,
            )
            if batch is None:
                return
            self.counters.batches += 1
            self.batches.append(batch)
            if self.on_batch:
                self.on_batch(batch)

    # -- per-kind handling ---------------------------------------------

    def process(self, ev: SensorEvent) -> None:
        self._adopt_pending_policy()
        self.counters.events += 1
        self._last_ts = ev.ts_mono
        kind = ev.kind
        cfg = self.policy.detector

        if kind is EventKind.CONN_OPEN:
            hit = detect_ddos(self._ddos_window, ev, cfg)
            if hit:
                self._emit(hit, ev, None)
        elif kind is EventKind.AUTH_ATTEMPT:
            hit = detect_bruteforce(self._bf_window, ev, cfg)
            if hit:
                self._emit(hit, ev, None)
        elif kind is EventKind.DNS_ANSWER:
            hit = detect_dns_spoof(cfg.dns_expected, ev)
            if hit:
                self._emit(hit, ev, None)
        elif kind is EventKind.ARP_BINDING:
            hit = detect_arp_poison(cfg.arp_authoritative, self._arp_learned, ev)
            if hit:
                self._emit(hit, ev, None)
        elif kind is EventKind.HANDSHAKE_INIT:
            self._handle_handshake(ev)
        elif kind is EventKind.SSL_RECORD:
            self._handle_record(ev)
        elif kind is EventKind.HTTP_REQUEST:
            self._handle_request(ev)
        elif kind is EventKind.CONN_CLOSE:
            self._handle_close(ev)
        # HostLog events are integrity evidence only; counted, no rules yet.

        self._flush(ev.ts_mono)

    def _handle_handshake(self, ev: SensorEvent) -> None:
        req = handshake_request_from_event(ev)
        verdict = validate_certificate(req.certificate, self.truststore, ev.ntp_stamp)
        hit = detect_mitm(verdict, ev)
        if hit:
            self._emit(hit, ev, None)
        if not verdict.valid:
            self.counters.rejected_handshakes += 1
            return

        resume_token = ev.payload.get("resume")
        if resume_token:
            resumed = resume_session(resume_token, self.registry, ev.ts_mono)
            if isinstance(resumed, SessionState):
                self.counters.resumed += 1
                return
            # Failed resumption falls back to a full handshake.

        try:
            result = begin_handshake(
                req,
                self.truststore,
                ev.ntp_stamp,
                self.registry,
                source_addr=ev.source_addr,
                source_mac=ev.source_mac,
                ts_mono=ev.ts_mono,
            )
        except DuplicateLiveSession:
            live_id = self.registry.live_for_pair(req.client_id, req.server_id)
            live = self.registry.get(live_id) if live_id else None
            self._emit(
                AlertSpec(
                    AlertMessage.PROTOCOL_VIOLATION,
                    address=req.server_id,
                    detail="DuplicateLiveSession",
                ),
                ev,
                live,
            )
            return
        if isinstance(result, Rejection):
            self.counters.rejected_handshakes += 1
        else:
            self.counters.sessions += 1

    def _handle_record(self, ev: SensorEvent) -> None:
        s = self.registry.get(ev.payload["session"])
        if s is None:
            self._emit(
                AlertSpec(
                    AlertMessage.PROTOCOL_VIOLATION, address=ev.node, detail="UnknownSession"
                ),
                ev,
                None,
            )
            return
        record_type = RecordType(ev.payload["rtype"])
        was_live = s.state
        new, actions = advance(s, record_type, ev.ts_mono)
        self.registry.update(new)
        if new.state is State.ABORTED and was_live is not State.ABORTED:
            self.counters.aborted += 1
        for action in actions:
            self._emit(
                AlertSpec(
                    AlertMessage.PROTOCOL_VIOLATION,
                    address=s.server_id,
                    detail=f"{s.state.value}+{record_type.value}",
                ),
                ev,
                s,
            )

    def _handle_request(self, ev: SensorEvent) -> None:
        cfg = self.policy.detector
        hits = []
        for hit in (
            detect_ddos(self._ddos_window, ev, cfg),
            detect_session_hijack(self.registry, ev, cfg),
        ):
            if hit:
                hits.append(hit)
                self._emit(hit, ev, self.registry.get(ev.payload["session"]))

        session = self.registry.get(ev.payload["session"])
        try:
            verdict = classify_request(ev, session, self.policy, hits)
        except SessionUnknown:
            verdict = TrustVerdict(
                Verdict.UNTRUSTED, ("SessionUnknown",), ev.payload["session"], ev.ts_mono
            )
        path = SubPath.P2_DIDS_CHECK

        if verdict.verdict is Verdict.TRUSTED and "digest" in ev.payload:
            path = SubPath.P3_CONTENT_INTEGRITY
            target = ev.payload["server"]
            try:
                ok = content_integrity_check(
                    ev.payload["digest"], self.policy.content_digests.get(target)
                )
            except NoExpectedDigest:
                ok = False
                verdict = replace(verdict, verdict=Verdict.UNTRUSTED, reasons=("NoExpectedDigest",))
            if not ok and verdict.verdict is Verdict.TRUSTED:
                verdict = replace(verdict, verdict=Verdict.UNTRUSTED, reasons=("ContentMismatch",))

        if verdict.verdict is Verdict.TRUSTED:
            assert session is not None
            tr = TrustedRequest(
                request_id=ev.payload["request"],
                session_id=session.session_id,
                source_addr=ev.source_addr,
                target=session.server_id,
                enqueued_at=ev.ts_mono,
            )
            try:
                self.deque.enqueue(tr)
            except QueueFull:
                self._flush(ev.ts_mono, force=True)
                self.deque.enqueue(tr)
            self.counters.trusted += 1
            path = SubPath.P4_TO_WEB_SERVER
        else:
            self.counters.untrusted += 1

        self.outcomes.append(RequestOutcome(ev.payload["request"], verdict, path))

    def _handle_close(self, ev: SensorEvent) -> None:
        s = self.registry.get(ev.payload["session"])
        if s is None:
            self.counters.stale_closes += 1
            return
        if s.state in (State.ESTABLISHED, State.CLOSING):
            try:
                new, outcome = close_session(s, ev.ts_mono)
            except InvalidState:
                self.counters.stale_closes += 1
                return
            self.registry.update(new)
            if outcome is CloseOutcome.CLEAN_CLOSE:
                self.counters.clean_closes += 1
            else:
                self.counters.truncated_closes += 1
                self._emit(
                    AlertSpec(
                        AlertMessage.TRUNCATION_SUSPECTED,
                        address=s.server_id,
                        detail="TcpCloseBeforeCloseNotify",
                    ),
                    ev,
                    s,
                )
        elif s.state in (State.HANDSHAKING, State.CIPHER_PENDING):
            # Torn down before establishment; terminal without ceremony.
            self.registry.update(replace(s, state=State.ABORTED, flag=False, last_seen=ev.ts_mono))
            self.counters.aborted += 1
        else:
            self.counters.stale_closes += 1

    def finish(self) -> PipelineReport:
        self._flush(self._last_ts, force=True)
        return PipelineReport(
            counters=self.counters,
            alerts=self.store.snapshot(),
            batches=tuple(self.batches),
            outcomes=tuple(self.outcomes),
        )


def run_pipeline(
    stream: Iterable[SensorEvent],
    policy: PolicyConfig | None = None,
    truststore: TrustStore | None = None,
    on_alert: Callable[[AlertRecord], None] | None = None,
    on_batch: Callable[[ForwardBatch], None] | None = None,
) -> PipelineReport:
    """Consume a whole stream deterministically and report on it."""
    analyzer = Analyzer(policy, truststore, on_alert=on_alert, on_batch=on_batch)
    for ev in stream:
        analyzer.process(ev)
    return analyzer.finish()
