"""The ten-field alert record: construction, bit-exact wire form, storage.

Canonical line shape, one alert per line, no internal spaces:

    alert:(<message_id>;<create_time>;<ntp_stamp>;<date>;<time>;<source>;<node>;<address>;<message>;<flag>)

date and time are always derived from ntp_stamp (UTC, NTP epoch
1900-01-01), never set independently.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, asdict
from datetime import datetime, timedelta, timezone

from .detectors import AlertMessage, AlertSpec
from .events import SensorEvent
from .session import SessionState, State

NTP_EPOCH = datetime(1900, 1, 1, tzinfo=timezone.utc)

ALERT_FIELD_NAMES = (
    "message_id",
    "create_time",
    "ntp_stamp",
    "date",
    "time",
    "source",
    "node",
    "address",
    "message",
    "flag",
)


class MalformedAlert(Exception):
    """An alert line does not match the canonical shape."""


class DuplicateId(Exception):
    """An appended message_id does not increase past the stored ones."""


def ntp_to_date_time(ntp_stamp: int) -> tuple[str, str]:
    moment = NTP_EPOCH + timedelta(seconds=ntp_stamp)
    return moment.strftime("%Y-%m-%d"), moment.strftime("%H:%M:%S")


@dataclass(frozen=True)
class AlertRecord:
    message_id: int
    create_time: int
    ntp_stamp: int
    date: str
    time: str
    source: str
    node: str
    address: str
    message: AlertMessage
    flag: int

    def to_export(self) -> dict:
        """Structured export object, same ten field names as the line format."""
        data = asdict(self)
        data["message"] = self.message.value
        return data


def make_alert(
    spec: AlertSpec,
    ev: SensorEvent,
    session: SessionState | None,
    next_id: int,
) -> AlertRecord:
    """Populate the ten fields from the triggering event and session.

    flag is 1 only while the implicated connection was established.
    """
    date, time = ntp_to_date_time(ev.ntp_stamp)
    return AlertRecord(
        message_id=next_id,
        create_time=ev.ts_mono,
        ntp_stamp=ev.ntp_stamp,
        date=date,
        time=time,
        source=ev.source_addr,
        node=ev.node,
        address=spec.address,
        message=spec.message,
        flag=1 if session is not None and session.state is State.ESTABLISHED else 0,
    )


def format_alert(a: AlertRecord) -> str:
    return (
        f"alert:({a.message_id};{a.create_time};{a.ntp_stamp};{a.date};{a.time};"
        f"{a.source};{a.node};{a.address};{a.message.value};{a.flag})\n"
    )


def parse_alert(line: str) -> AlertRecord:
    """Inverse of format_alert on valid lines."""
    body = line.rstrip("\n")
    if not body.startswith("alert:(") or not body.endswith(")"):
        raise MalformedAlert(f"bad alert framing: {line!r}")
    fields = body[len("alert:(") : -1].split(";")
    if len(fields) != 10:
        raise MalformedAlert(f"expected 10 fields, got {len(fields)}")
    raw_id, raw_ct, raw_ntp, date, time, source, node, address, raw_msg, raw_flag = fields
    try:
        message_id = int(raw_id)
        create_time = int(raw_ct)
        ntp_stamp = int(raw_ntp)
    except ValueError as exc:
        raise MalformedAlert(f"non-numeric field: {exc}") from None
    try:
        message = AlertMessage(raw_msg)
    except ValueError:
        raise MalformedAlert(f"unknown message token {raw_msg!r}") from None
    if raw_flag not in ("0", "1"):
        raise MalformedAlert(f"bad flag {raw_flag!r}")
    expected = ntp_to_date_time(ntp_stamp)
    if (date, time) != expected:
        raise MalformedAlert(
            f"date/time {date} {time} inconsistent with ntp_stamp {ntp_stamp}"
        )
    return AlertRecord(
        message_id=message_id,
        create_time=create_time,
        ntp_stamp=ntp_stamp,
        date=date,
        time=time,
        source=source,
        node=node,
        address=address,
        message=message,
        flag=int(raw_flag),
    )


class AlertStore:
    """Append-only record store; one writer, snapshot-isolated readers."""

    def __init__(self) -> None:
        self._records: list[AlertRecord] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._records)

    @property
    def next_id(self) -> int:
        with self._lock:
            return self._records[-1].message_id + 1 if self._records else 1

    def append(self, a: AlertRecord) -> None:
        with self._lock:
            if self._records and a.message_id <= self._records[-1].message_id:
                raise DuplicateId(
                    f"message_id {a.message_id} does not increase past "
                    f"{self._records[-1].message_id}"
                )
            self._records.append(a)

    def snapshot(self) -> tuple[AlertRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def query(
        self,
        message: AlertMessage | None = None,
        source: str | None = None,
        since: int | None = None,
        flag: int | None = None,
    ) -> list[AlertRecord]:
        """Matching records in id order; since filters on create_time."""
        out = []
        for a in self.snapshot():
            if message is not None and a.message is not message:
                continue
            if source is not None and a.source != source:
                continue
            if since is not None and a.create_time < since:
                continue
            if flag is not None and a.flag != flag:
                continue
            out.append(a)
        return out

    def stats(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for a in self.snapshot():
            counts[a.message.value] = counts.get(a.message.value, 0) + 1
        return counts
