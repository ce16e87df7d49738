"""Persistent controller state.

Layout of a data directory::

    events.jsonl   append-only log of registrations, target lists, experiments, acks
    reports.jsonl  append-only log of accepted report records
    index.json     compacted snapshot plus the log offsets it covers

On open the snapshot is loaded and both logs are replayed from the recorded
offsets. A torn final line (crash mid-append) is cut off.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Optional

from ..model import (
    ReportParseError,
    ReportRecord,
    TestTarget,
    ValidationError,
    VantageKind,
    VantagePoint,
    format_test_list,
    format_ts,
    parse_test_list,
    parse_ts,
    read_record,
    serialize_report,
    target_from_dict,
    target_to_dict,
    vantage_from_dict,
    vantage_to_dict,
)


class ControllerError(Exception):
    status = 400


class NotFound(ControllerError):
    status = 404


class Conflict(ControllerError):
    status = 409


class Unauthorized(ControllerError):
    status = 401


@dataclass(frozen=True)
class Selector:
    kind: str = "all"  # all | country | vantages
    values: tuple = ()

    def __post_init__(self) -> None:
        if self.kind not in ("all", "country", "vantages"):
            raise ValidationError(f"unknown selector kind {self.kind!r}")
        object.__setattr__(self, "values", tuple(self.values))
        if self.kind == "country":
            if len(self.values) != 1:
                raise ValidationError("country selector takes exactly one code")
            # Reuse the vantage-point country check.
            VantagePoint("x", self.values[0], 1)
        if self.kind == "vantages" and not self.values:
            raise ValidationError("vantages selector needs at least one id")

    @classmethod
    def parse(cls, text: str) -> "Selector":
        """``all``, ``country:IR`` or ``vantages:a,b``."""
        kind, _, rest = text.partition(":")
        return cls(kind, tuple(v for v in rest.split(",") if v) if rest else ())

    def __str__(self) -> str:
        return self.kind if self.kind == "all" else f"{self.kind}:{','.join(self.values)}"

    def matches(self, vp: VantagePoint) -> bool:
        if self.kind == "all":
            return True
        if self.kind == "country":
            return vp.country == self.values[0]
        return vp.id in self.values


@dataclass(frozen=True)
class ExperimentSpec:
    id: str
    target_list: str
    selector: Selector
    created_at: datetime
    every_hours: Optional[int] = None
    horizon_hours: int = 24

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("experiment id must be non-empty")
        if self.every_hours is not None and self.every_hours < 1:
            raise ValidationError("recurrence must be at least every 1 hour")
        if self.horizon_hours < 1:
            raise ValidationError("horizon must be at least 1 hour")

    def occurrences(self) -> list[datetime]:
        if self.every_hours is None:
            return [self.created_at]
        n = -(-self.horizon_hours // self.every_hours)  # ceil
        return [self.created_at + timedelta(hours=k * self.every_hours) for k in range(n)]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "target_list": self.target_list,
            "selector": str(self.selector),
            "created_at": format_ts(self.created_at),
            "every_hours": self.every_hours,
            "horizon_hours": self.horizon_hours,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(
            d["id"], d["target_list"], Selector.parse(d["selector"]), parse_ts(d["created_at"]),
            d.get("every_hours"), d.get("horizon_hours", 24),
        )


@dataclass(frozen=True)
class Assignment:
    id: str
    experiment: str
    vantage: str
    due_at: datetime
    target_list: str

    def to_dict(self) -> dict:
        return {
            "id": self.id, "experiment": self.experiment, "vantage": self.vantage,
            "due_at": format_ts(self.due_at), "target_list": self.target_list,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Assignment":
        return cls(d["id"], d["experiment"], d["vantage"], parse_ts(d["due_at"]), d["target_list"])


@dataclass
class SubmitAck:
    accepted: int = 0  # stored now or already present
    stored: int = 0  # newly stored
    duplicates: int = 0
    errors: list = field(default_factory=list)  # (record index, message)

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "stored": self.stored, "duplicates": self.duplicates,
                "errors": [list(e) for e in self.errors]}


def _report_key(rec: ReportRecord) -> tuple:
    return rec.measurement.key


class ControllerStore:
    """Vantage registry, experiment scheduler and report store."""

    def __init__(self, data_dir, compact_every: int = 256, fsync: bool = True) -> None:
        self.dir = Path(data_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.compact_every = compact_every
        self.fsync = fsync
        self._lock = threading.RLock()
        self._since_compact = 0
        self._reset()
        self._load()

    # -- state ------------------------------------------------------------
    def _reset(self) -> None:
        self.vantage_points: dict[str, VantagePoint] = {}
        self.tokens: dict[str, str] = {}  # token -> vantage id
        self.target_lists: dict[str, tuple[TestTarget, ...]] = {}
        self.experiments: dict[str, ExperimentSpec] = {}
        self.assignments: dict[str, Assignment] = {}
        self.acked: set[str] = set()
        self.reports: dict[tuple, ReportRecord] = {}
        self._events_offset = 0
        self._reports_offset = 0

    @property
    def _events_path(self) -> Path:
        return self.dir / "events.jsonl"

    @property
    def _reports_path(self) -> Path:
        return self.dir / "reports.jsonl"

    @property
    def _index_path(self) -> Path:
        return self.dir / "index.json"

    def _apply(self, ev: dict) -> None:
        op = ev["op"]
        if op == "register":
            vp = vantage_from_dict(ev["vantage"])
            self.vantage_points[vp.id] = vp
            self.tokens[ev["token"]] = vp.id
        elif op == "target_list":
            self.target_lists[ev["name"]] = tuple(target_from_dict(t) for t in ev["targets"])
        elif op == "experiment":
            spec = ExperimentSpec.from_dict(ev["spec"])
            self.experiments[spec.id] = spec
            for a in ev["assignments"]:
                asg = Assignment.from_dict(a)
                self.assignments[asg.id] = asg
        elif op == "ack":
            self.acked.update(ev["ids"])
        else:
            raise ValueError(f"unknown event {op!r}")

    def _replay(self, path: Path, offset: int, apply) -> int:
        if not path.exists():
            return 0
        size = path.stat().st_size
        with open(path, "rb") as fh:
            fh.seek(offset)
            good = offset
            for raw in fh:
                try:
                    if not raw.endswith(b"\n"):
                        raise ValueError("torn line")
                    apply(json.loads(raw))
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    if good + len(raw) < size:
                        raise ControllerError(f"{path.name} is corrupt at offset {good}") from exc
                    break
                good += len(raw)
        if good < size:
            with open(path, "r+b") as fh:
                fh.truncate(good)
        return good

    def _apply_report(self, entry: dict) -> None:
        rec = read_record(entry["record"])
        self.reports[_report_key(rec)] = rec

    def _load(self) -> None:
        if self._index_path.exists():
            snap = json.loads(self._index_path.read_text("utf-8"))
            for ev in snap["events"]:
                self._apply(ev)
            for line in snap["reports"]:
                self._apply_report({"record": line})
            self._events_offset = snap["events_offset"]
            self._reports_offset = snap["reports_offset"]
        self._events_offset = self._replay(self._events_path, self._events_offset, self._apply)
        self._reports_offset = self._replay(self._reports_path, self._reports_offset, self._apply_report)

    def _append(self, path: Path, obj: dict) -> int:
        line = (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")
        with open(path, "ab") as fh:
            fh.write(line)
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        return len(line)

    def _event(self, ev: dict) -> None:
        self._events_offset += self._append(self._events_path, ev)
        self._apply(ev)
        self._tick()

    def _tick(self) -> None:
        self._since_compact += 1
        if self.compact_every and self._since_compact >= self.compact_every:
            self.compact()

    def compact(self) -> None:
        """Write a snapshot of the current state covering the logs up to now."""
        with self._lock:
            events = [
                {"op": "register", "vantage": vantage_to_dict(self.vantage_points[vid]), "token": tok}
                for tok, vid in sorted(self.tokens.items(), key=lambda kv: kv[1])
            ]
            events += [
                {"op": "target_list", "name": n, "targets": [target_to_dict(t) for t in ts]}
                for n, ts in sorted(self.target_lists.items())
            ]
            for spec in sorted(self.experiments.values(), key=lambda s: s.id):
                events.append({
                    "op": "experiment", "spec": spec.to_dict(),
                    "assignments": [a.to_dict() for a in sorted(self.assignments.values(), key=lambda a: a.id)
                                    if a.experiment == spec.id],
                })
            events.append({"op": "ack", "ids": sorted(self.acked)})
            snap = {
                "events_offset": self._events_offset,
                "reports_offset": self._reports_offset,
                "events": events,
                "reports": [serialize_report(r) for _, r in sorted(self.reports.items())],
            }
            tmp = self._index_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(snap, sort_keys=True), "utf-8")
            os.replace(tmp, self._index_path)
            self._since_compact = 0

    def close(self) -> None:
        self.compact()

    # -- registry -----------------------------------------------------------
    def register_vantage(self, vp: VantagePoint) -> str:
        with self._lock:
            if vp.id in self.vantage_points:
                raise Conflict(f"vantage point {vp.id!r} already registered")
            token = secrets.token_hex(16)
            self._event({"op": "register", "vantage": vantage_to_dict(vp), "token": token})
            return token

    def get_vantage(self, vantage_id: str) -> VantagePoint:
        with self._lock:
            try:
                return self.vantage_points[vantage_id]
            except KeyError:
                raise NotFound(f"no vantage point {vantage_id!r}") from None

    def list_vantages(self) -> list[VantagePoint]:
        with self._lock:
            return sorted(self.vantage_points.values(), key=lambda v: v.id)

    def _authenticate(self, token: str) -> VantagePoint:
        vid = self.tokens.get(token or "")
        if vid is None:
            raise Unauthorized("invalid token")
        return self.vantage_points[vid]

    # -- scheduling -----------------------------------------------------------
    def add_target_list(self, name: str, targets: Iterable[TestTarget]) -> int:
        with self._lock:
            targets = tuple(targets)
            if self.target_lists.get(name) == targets:
                return len(targets)
            self._event({"op": "target_list", "name": name, "targets": [target_to_dict(t) for t in targets]})
            return len(targets)

    def add_target_list_csv(self, name: str, text: str) -> int:
        return self.add_target_list(name, parse_test_list(text))

    def select(self, selector: Selector) -> list[VantagePoint]:
        with self._lock:
            return [vp for vp in self.list_vantages() if selector.matches(vp)]

    def schedule(self, spec: ExperimentSpec) -> list[Assignment]:
        """Create one assignment per selected vantage point per due occurrence.

        Re-submitting an identical spec returns the existing assignments.
        """
        with self._lock:
            if spec.target_list not in self.target_lists:
                raise NotFound(f"unknown target list {spec.target_list!r}")
            existing = self.experiments.get(spec.id)
            if existing is not None:
                if existing != spec:
                    raise Conflict(f"experiment {spec.id!r} already exists with a different definition")
                return self.assignments_for(spec.id)
            assignments = [
                Assignment(f"{spec.id}:{vp.id}:{k}", spec.id, vp.id, due, spec.target_list)
                for vp in self.select(spec.selector)
                for k, due in enumerate(spec.occurrences())
            ]
            self._event({"op": "experiment", "spec": spec.to_dict(), "assignments": [a.to_dict() for a in assignments]})
            return self.assignments_for(spec.id)

    def assignments_for(self, experiment_id: str) -> list[Assignment]:
        with self._lock:
            return sorted((a for a in self.assignments.values() if a.experiment == experiment_id),
                          key=lambda a: (a.vantage, a.due_at))

    def poll(self, token: str, now: Optional[datetime] = None) -> list[Assignment]:
        """Due, unacknowledged assignments for the token's vantage point. Safe to repeat."""
        with self._lock:
            vp = self._authenticate(token)
            return sorted(
                (a for a in self.assignments.values()
                 if a.vantage == vp.id and a.id not in self.acked and (now is None or a.due_at <= now)),
                key=lambda a: (a.due_at, a.id),
            )

    def ack(self, token: str, ids: Iterable[str]) -> int:
        with self._lock:
            vp = self._authenticate(token)
            ids = sorted({i for i in ids if i in self.assignments and self.assignments[i].vantage == vp.id} - self.acked)
            if ids:
                self._event({"op": "ack", "ids": ids})
            return len(ids)

    def target_list(self, name: str) -> tuple[TestTarget, ...]:
        with self._lock:
            try:
                return self.target_lists[name]
            except KeyError:
                raise NotFound(f"unknown target list {name!r}") from None

    def export_target_list(self, name: str) -> str:
        return format_test_list(self.target_list(name))

    # -- reports ---------------------------------------------------------------
    def submit_report(self, token: str, lines: Iterable[str]) -> SubmitAck:
        """Store report records idempotently, keyed by (vantage, target, started_at)."""
        with self._lock:
            vp = self._authenticate(token)
            ack = SubmitAck()
            for i, line in enumerate(lines):
                if not line.strip():
                    continue
                try:
                    rec = read_record(line)
                except (ReportParseError, ValidationError) as exc:
                    ack.errors.append((i, str(exc)))
                    continue
                if rec.measurement.vantage != vp.id:
                    ack.errors.append((i, f"record belongs to {rec.measurement.vantage!r}, token to {vp.id!r}"))
                    continue
                if rec.local_only:
                    reason = "opted out of publication" if vp.kind is VantageKind.VOLUNTEER else "local-only flag on a non-volunteer"
                    ack.errors.append((i, f"record marked local-only ({reason})"))
                    continue
                key = _report_key(rec)
                if key in self.reports:
                    ack.duplicates += 1
                    ack.accepted += 1
                    continue
                canonical = serialize_report(rec)
                self._reports_offset += self._append(self._reports_path, {"record": canonical})
                self.reports[key] = rec
                ack.stored += 1
                ack.accepted += 1
                self._tick()
            return ack

    def query_reports(
        self,
        country: Optional[str] = None,
        vantage: Optional[str] = None,
        since: Optional[datetime] = None,
        until: Optional[datetime] = None,
        target: Optional[str] = None,
    ) -> list[ReportRecord]:
        """Stored records matching every given predicate; time bounds are inclusive."""
        with self._lock:
            out = []
            for rec in self.reports.values():
                m = rec.measurement
                if vantage is not None and m.vantage != vantage:
                    continue
                if country is not None:
                    vp = self.vantage_points.get(m.vantage)
                    if vp is None or vp.country != country:
                        continue
                if since is not None and m.started_at < since:
                    continue
                if until is not None and m.started_at > until:
                    continue
                if target is not None and m.target.url != target:
                    continue
                out.append(rec)
        out.sort(key=lambda r: (r.measurement.started_at, r.measurement.vantage, r.measurement.target.url))
        return out

    def report_count(self) -> int:
        with self._lock:
            return len(self.reports)
