"""SSL-like session lifecycle: certificate checks, handshake, record layer, closure.

Cryptography here is modeled, not real: a certificate signature is an
HMAC-SHA256 keyed digest of the canonical certificate encoding under the
issuer's 32-byte key.  The canonical encoding is byte-exact (strings are
8-byte little-endian length plus UTF-8; integers are 8-byte little-endian)
so any implementation of the scheme agrees on signatures.
"""

from __future__ import annotations

import hashlib
import hmac
import re
from dataclasses import dataclass, field, replace
from enum import Enum

KEY_LEN = 32

# Resumption is only offered to sessions idle for less than this long.
IDLE_EXPIRY_NS = 300 * 1_000_000_000

_SESSION_ID_RE = re.compile(r"^s-[0-9a-f]{12}$")


class BadKeyLength(Exception):
    """A digest key is not exactly 32 bytes."""


class DuplicateLiveSession(Exception):
    """A handshake arrived for a (client, server) pair that is already live."""


class InvalidState(Exception):
    """An operation was applied to a session in a state it does not accept."""


class CertClass(str, Enum):
    DOMAIN_VALIDATED = "DV"
    ORG_VALIDATED = "OV"
    EXTENDED_VALIDATION = "EV"


# Canonical encoding order of CertClass for signing.
_CERT_CLASS_CODE = {
    CertClass.DOMAIN_VALIDATED: 1,
    CertClass.ORG_VALIDATED: 2,
    CertClass.EXTENDED_VALIDATION: 3,
}


class CertFailure(str, Enum):
    UNKNOWN_ISSUER = "UnknownIssuer"
    SELF_SIGNED = "SelfSigned"
    EXPIRED = "Expired"
    NOT_YET_VALID = "NotYetValid"
    BAD_SIGNATURE = "BadSignature"
    REVOKED = "Revoked"


class RecordType(str, Enum):
    HANDSHAKE_FINISH = "HandshakeFinish"
    CHANGE_CIPHER_SPEC = "ChangeCipherSpec"
    ALERT_CLOSE = "AlertClose"
    ALERT_ERROR = "AlertError"
    APP_DATA = "AppData"


class State(str, Enum):
    HANDSHAKING = "Handshaking"
    CIPHER_PENDING = "CipherPending"
    ESTABLISHED = "Established"
    CLOSING = "Closing"
    CLOSED = "Closed"
    ABORTED = "Aborted"


LIVE_STATES = frozenset(
    {State.HANDSHAKING, State.CIPHER_PENDING, State.ESTABLISHED, State.CLOSING}
)


class CloseOutcome(str, Enum):
    CLEAN_CLOSE = "CleanClose"
    TRUNCATION_SUSPECTED = "TruncationSuspected"


PROTOCOL_VIOLATION = "ProtocolViolation"


@dataclass(frozen=True)
class CipherParams:
    cipher_suite_id: int
    mac_key_id: str
    established_at: int = 0

    def __post_init__(self) -> None:
        if self.cipher_suite_id not in (1, 2):
            raise ValueError(f"unsupported cipher suite {self.cipher_suite_id}")


@dataclass(frozen=True)
class Certificate:
    subject: str
    issuer: str
    cert_class: CertClass
    not_before: int
    not_after: int
    public_id: str
    signature: bytes

    def __post_init__(self) -> None:
        if self.not_before >= self.not_after:
            raise ValueError("certificate validity window is empty")


@dataclass(frozen=True)
class HandshakeRequest:
    client_id: str
    client_mac: str
    client_secret_key: bytes
    server_id: str
    certificate: Certificate
    proposed_params: CipherParams

    def __post_init__(self) -> None:
        if not self.client_id or not self.server_id or not self.client_mac:
            raise ValueError("handshake identifiers must be non-empty")
        if len(self.client_secret_key) != KEY_LEN:
            raise ValueError("client secret key must be exactly 32 bytes")


@dataclass
class TrustStore:
    """Issuer signing keys plus the revocation set."""

    issuer_keys: dict[str, bytes] = field(default_factory=dict)
    revoked: set[str] = field(default_factory=set)

    def add_issuer(self, name: str, key: bytes) -> None:
        if name in self.issuer_keys:
            raise ValueError(f"issuer {name!r} already present")
        if len(key) != KEY_LEN:
            raise BadKeyLength(f"issuer key must be {KEY_LEN} bytes")
        self.issuer_keys[name] = key

    def revoke(self, public_id: str) -> None:
        self.revoked.add(public_id)


@dataclass(frozen=True)
class CertVerdict:
    valid: bool
    reasons: tuple[CertFailure, ...]


@dataclass(frozen=True)
class Rejection:
    """A refused handshake or resumption, with every reason that applied."""

    reasons: tuple[str, ...]


@dataclass(frozen=True)
class SessionState:
    session_id: str
    client_id: str
    source_addr: str
    source_mac: str
    server_id: str
    state: State
    params: CipherParams | None
    flag: bool
    created_at: int
    last_seen: int
    close_notify_sent: bool = False
    close_notify_received: bool = False
    # Suite negotiated during the handshake, promoted into params on
    # ChangeCipherSpec; not subject to the params-iff-established invariant.
    pending_params: CipherParams | None = None


def check_session_invariants(s: SessionState) -> None:
    """Raise AssertionError if a SessionState violates its declared invariants."""
    with_params = s.state in (State.ESTABLISHED, State.CLOSING, State.CLOSED)
    assert (s.params is not None) == with_params, f"params/state mismatch in {s.state}"
    assert s.flag == (s.state is State.ESTABLISHED), f"flag/state mismatch in {s.state}"
    if s.close_notify_sent or s.close_notify_received:
        assert s.state in (State.CLOSING, State.CLOSED, State.ABORTED), (
            f"close_notify set in {s.state}"
        )


def _encode_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return len(raw).to_bytes(8, "little") + raw


def _encode_int(value: int) -> bytes:
    return value.to_bytes(8, "little")


def canonical_cert_bytes(cert: Certificate) -> bytes:
    """Byte encoding of a certificate's signed fields, in declaration order."""
    return b"".join(
        (
            _encode_str(cert.subject),
            _encode_str(cert.issuer),
            _encode_int(_CERT_CLASS_CODE[cert.cert_class]),
            _encode_int(cert.not_before),
            _encode_int(cert.not_after),
            _encode_str(cert.public_id),
        )
    )


def keyed_digest(payload: bytes, key: bytes) -> bytes:
    if len(key) != KEY_LEN:
        raise BadKeyLength(f"digest key must be {KEY_LEN} bytes, got {len(key)}")
    return hmac.new(key, payload, hashlib.sha256).digest()


def verify_signature(payload: bytes, signature: bytes, key: bytes) -> bool:
    return hmac.compare_digest(keyed_digest(payload, key), signature)


def sign_certificate(cert: Certificate, key: bytes) -> Certificate:
    """Return the certificate re-signed under the given issuer key."""
    return replace(cert, signature=keyed_digest(canonical_cert_bytes(cert), key))


def validate_certificate(cert: Certificate, store: TrustStore, now: int) -> CertVerdict:
    """Run every certificate check and report all failures; no short-circuit."""
    reasons: list[CertFailure] = []
    if cert.subject == cert.issuer:
        reasons.append(CertFailure.SELF_SIGNED)
    key = store.issuer_keys.get(cert.issuer)
    if key is None:
        reasons.append(CertFailure.UNKNOWN_ISSUER)
    elif not verify_signature(canonical_cert_bytes(cert), cert.signature, key):
        reasons.append(CertFailure.BAD_SIGNATURE)
    if now < cert.not_before:
        reasons.append(CertFailure.NOT_YET_VALID)
    if now > cert.not_after:
        reasons.append(CertFailure.EXPIRED)
    if cert.public_id in store.revoked:
        reasons.append(CertFailure.REVOKED)
    return CertVerdict(valid=not reasons, reasons=tuple(reasons))


def derive_session_id(client_id: str, server_id: str, ordinal: int) -> str:
    """Deterministic session token for the ordinal-th handshake of a pair."""
    digest = hashlib.sha256(f"{client_id}|{server_id}|{ordinal}".encode()).hexdigest()
    return f"s-{digest[:12]}"


def is_well_formed_session_id(token: str) -> bool:
    return bool(_SESSION_ID_RE.match(token))


class SessionRegistry:
    """Single-writer map of live and historical sessions.

    Owned by the analyzer; snapshots handed out are immutable values.
    """

    def __init__(self) -> None:
        self._sessions: dict[str, SessionState] = {}
        self._live_pairs: dict[tuple[str, str], str] = {}
        self._pair_ordinals: dict[tuple[str, str], int] = {}
        self.issued: set[str] = set()
        self.created = 0

    def get(self, session_id: str) -> SessionState | None:
        return self._sessions.get(session_id)

    def live_for_pair(self, client_id: str, server_id: str) -> str | None:
        return self._live_pairs.get((client_id, server_id))

    def next_ordinal(self, client_id: str, server_id: str) -> int:
        return self._pair_ordinals.get((client_id, server_id), 0) + 1

    def register(self, s: SessionState) -> None:
        pair = (s.client_id, s.server_id)
        self._sessions[s.session_id] = s
        self._live_pairs[pair] = s.session_id
        self._pair_ordinals[pair] = self._pair_ordinals.get(pair, 0) + 1
        self.issued.add(s.session_id)
        self.created += 1

    def update(self, s: SessionState) -> None:
        self._sessions[s.session_id] = s
        if s.state not in LIVE_STATES:
            pair = (s.client_id, s.server_id)
            if self._live_pairs.get(pair) == s.session_id:
                del self._live_pairs[pair]

    def sessions(self) -> list[SessionState]:
        return list(self._sessions.values())


def begin_handshake(
    req: HandshakeRequest,
    store: TrustStore,
    now: int,
    registry: SessionRegistry,
    source_addr: str = "",
    source_mac: str = "",
    ts_mono: int = 0,
) -> SessionState | Rejection:
    """Open a fresh session for a valid certificate, reject otherwise.

    ``now`` is NTP seconds for the validity check; ``ts_mono`` stamps the
    session clock.  A rejection never mutates the registry.
    """
    if registry.live_for_pair(req.client_id, req.server_id) is not None:
        raise DuplicateLiveSession(
            f"live session already exists for ({req.client_id}, {req.server_id})"
        )
    verdict = validate_certificate(req.certificate, store, now)
    if not verdict.valid:
        return Rejection(tuple(r.value for r in verdict.reasons))
    ordinal = registry.next_ordinal(req.client_id, req.server_id)
    s = SessionState(
        session_id=derive_session_id(req.client_id, req.server_id, ordinal),
        client_id=req.client_id,
        source_addr=source_addr or "0.0.0.0",
        source_mac=source_mac or req.client_mac,
        server_id=req.server_id,
        state=State.HANDSHAKING,
        params=None,
        flag=False,
        created_at=ts_mono,
        last_seen=ts_mono,
        pending_params=req.proposed_params,
    )
    registry.register(s)
    return s


def resume_session(
    session_id: str, registry: SessionRegistry, now: int
) -> SessionState | Rejection:
    """Resume an Established session within the idle window; no new handshake."""
    s = registry.get(session_id)
    if s is None:
        return Rejection(("NoSuchSession",))
    if s.state is not State.ESTABLISHED:
        return Rejection(("NotResumable",))
    if now - s.last_seen > IDLE_EXPIRY_NS:
        return Rejection(("Expired",))
    resumed = replace(s, last_seen=now)
    registry.update(resumed)
    return resumed


def advance(s: SessionState, record_type: RecordType, ts: int) -> tuple[SessionState, tuple[str, ...]]:
    """Apply one record-layer message; total over all (state, record) pairs.

    Illegal pairs leave the state untouched and report a ProtocolViolation
    action instead of failing, so detectors can alert on them.
    """
    if record_type is RecordType.ALERT_ERROR:
        aborted = replace(
            s, state=State.ABORTED, params=None, flag=False, last_seen=ts
        )
        return aborted, ()

    if s.state is State.HANDSHAKING and record_type is RecordType.HANDSHAKE_FINISH:
        return replace(s, state=State.CIPHER_PENDING, last_seen=ts), ()

    if s.state is State.CIPHER_PENDING and record_type is RecordType.CHANGE_CIPHER_SPEC:
        pending = s.pending_params
        params = replace(pending, established_at=ts) if pending else CipherParams(1, "mk-default", ts)
        established = replace(
            s,
            state=State.ESTABLISHED,
            params=params,
            pending_params=None,
            flag=True,
            last_seen=ts,
        )
        return established, ()

    if s.state is State.ESTABLISHED and record_type is RecordType.APP_DATA:
        return replace(s, last_seen=ts), ()

    if s.state is State.ESTABLISHED and record_type is RecordType.ALERT_CLOSE:
        closing = replace(
            s,
            state=State.CLOSING,
            flag=False,
            close_notify_received=True,
            last_seen=ts,
        )
        return closing, ()

    return s, (PROTOCOL_VIOLATION,)


def close_session(s: SessionState, ts: int) -> tuple[SessionState, CloseOutcome]:
    """Handle the TCP close for an Established or Closing session.

    A close_notify exchanged before the TCP close is a clean shutdown; a
    bare TCP close on an Established session is suspected truncation.
    """
    if s.state is State.CLOSING:
        closed = replace(
            s, state=State.CLOSED, flag=False, close_notify_sent=True, last_seen=ts
        )
        return closed, CloseOutcome.CLEAN_CLOSE
    if s.state is State.ESTABLISHED:
        closed = replace(s, state=State.CLOSED, flag=False, last_seen=ts)
        return closed, CloseOutcome.TRUNCATION_SUSPECTED
    raise InvalidState(f"cannot close a session in state {s.state.value}")
