"""Domain types and the line-delimited report format.

Every type here is a frozen dataclass that validates itself on construction;
invalid inputs raise :class:`ValidationError` and are never repaired.
"""

from __future__ import annotations

import base64
import csv
import io
import ipaddress
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Iterable, Optional
from urllib.parse import urlsplit

REPORT_SCHEMA_VERSION = 1
VERDICT_SCHEMA_VERSION = 1

_COUNTRY_RE = re.compile(r"^[A-Z]{2}$")
_DOMAIN_RE = re.compile(r"^(?=.{1,253}$)([A-Za-z0-9_]([A-Za-z0-9_-]{0,61}[A-Za-z0-9])?\.)*[A-Za-z0-9_]([A-Za-z0-9_-]{0,61}[A-Za-z0-9])?\.?$")
TCP_FLAGS = frozenset({"SYN", "ACK", "RST", "FIN", "PSH"})
U32 = 2**32


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


class TestListError(ValueError):
    __test__ = False

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class ReportParseError(ValueError):
    def __init__(self, message: str, offset: int = 0) -> None:
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class SchemaVersionError(ReportParseError):
    def __init__(self, version: Any) -> None:
        super().__init__(f"unsupported schema version {version!r}")
        self.version = version


class Origin(str, Enum):
    GLOBAL = "global-list"
    COUNTRY = "country-list"
    BASELINE = "baseline-alexa"


class VantageKind(str, Enum):
    VPN = "vpn"
    VOLUNTEER = "volunteer"
    DEVICE = "device"


class Consent(str, Enum):
    OPT_IN = "opt-in"
    OPT_OUT_ALLOWED = "opt-out-allowed"


class Direction(str, Enum):
    OUTBOUND = "outbound"
    INBOUND = "inbound"


class ResolverKind(str, Enum):
    SYSTEM = "system-default"
    PUBLIC = "public-alternate"
    CONTROL = "control-nonstandard-port"


class AnomalyKind(str, Enum):
    DNS_INJECTION = "DNS_INJECTION"
    DNS_INCONSISTENT = "DNS_INCONSISTENT"
    HTTP_BLOCKPAGE = "HTTP_BLOCKPAGE"
    HTTP_TAMPERING = "HTTP_TAMPERING"
    HTTP_PROXY = "HTTP_PROXY"
    TLS_MITM = "TLS_MITM"
    TCP_SEQ = "TCP_SEQ"
    TCP_TTL = "TCP_TTL"
    TCP_RST = "TCP_RST"
    TCP_CONNECT_ASYMMETRY = "TCP_CONNECT_ASYMMETRY"


class Confidence(str, Enum):
    CORROBORATING = "corroborating"
    STANDALONE = "standalone"


class Outcome(str, Enum):
    OK = "ok"
    CENSORED = "censored"
    DEAD_SITE = "dead_site"
    INCONCLUSIVE = "inconclusive"


class Mode(str, Enum):
    RAW = "raw"
    CLASSIFY = "classify"


RCODE_NOERROR = 0
RCODE_SERVFAIL = 2
RCODE_NXDOMAIN = 3


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValidationError(message)


def _enum(cls, value):
    try:
        return cls(value)
    except ValueError as exc:
        raise ValidationError(f"invalid {cls.__name__}: {value!r}") from exc


def canonical_ip(text: str) -> str:
    """Return the canonical textual form of an IPv4/IPv6 address."""
    try:
        return str(ipaddress.ip_address(text))
    except ValueError as exc:
        raise ValidationError(f"invalid IP address {text!r}") from exc


def is_valid_domain(name: str) -> bool:
    return bool(_DOMAIN_RE.match(name))


def check_url(url: str) -> None:
    try:
        parts = urlsplit(url)
        parts.port  # noqa: B018  (raises on a bad port)
    except ValueError as exc:
        raise ValidationError(f"malformed URL {url!r}: {exc}") from exc
    _require(parts.scheme in ("http", "https"), f"URL scheme must be http or https: {url!r}")
    _require(bool(parts.hostname), f"URL has no host: {url!r}")


def url_host(url: str) -> str:
    return (urlsplit(url).hostname or "").lower()


def _utc(dt: datetime) -> datetime:
    _require(dt.tzinfo is not None, "timestamps must be timezone-aware UTC")
    return dt.astimezone(timezone.utc)


def format_ts(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_ts(text: str) -> datetime:
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid timestamp {text!r}") from exc
    return _utc(dt)


# ---------------------------------------------------------------------------
# Targets and vantage points


@dataclass(frozen=True)
class TestTarget:
    __test__ = False

    url: str
    category: str
    origin: Origin = Origin.GLOBAL

    def __post_init__(self) -> None:
        check_url(self.url)
        _require(bool(self.category), "category must be non-empty")
        object.__setattr__(self, "origin", _enum(Origin, self.origin))

    @property
    def host(self) -> str:
        return url_host(self.url)

    @property
    def scheme(self) -> str:
        return urlsplit(self.url).scheme


@dataclass(frozen=True)
class VantagePoint:
    id: str
    country: str
    asn: int
    kind: VantageKind = VantageKind.VPN
    consent: Consent = Consent.OPT_IN

    def __post_init__(self) -> None:
        _require(bool(self.id), "vantage id must be non-empty")
        _require(bool(_COUNTRY_RE.match(self.country or "")), f"country must be 2 uppercase letters: {self.country!r}")
        _require(isinstance(self.asn, int) and self.asn > 0, f"asn must be a positive integer: {self.asn!r}")
        object.__setattr__(self, "kind", _enum(VantageKind, self.kind))
        object.__setattr__(self, "consent", _enum(Consent, self.consent))


# ---------------------------------------------------------------------------
# Packet traces


@dataclass(frozen=True)
class PacketEvent:
    t: int
    direction: Direction
    ip_ttl: int
    ip_id: int
    tcp_seq: int
    tcp_ack: int
    flags: frozenset
    payload_len: int = 0
    # Captured payload; may be empty when only headers were recorded.
    payload: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", _enum(Direction, self.direction))
        object.__setattr__(self, "flags", frozenset(self.flags))
        _require(self.t >= 0, "event time must be >= 0")
        _require(0 <= self.ip_ttl <= 255, f"ip_ttl out of range: {self.ip_ttl}")
        _require(0 <= self.ip_id <= 0xFFFF, f"ip_id out of range: {self.ip_id}")
        _require(0 <= self.tcp_seq < U32 and 0 <= self.tcp_ack < U32, "seq/ack must be unsigned 32-bit")
        _require(self.flags <= TCP_FLAGS, f"unknown TCP flags: {sorted(self.flags - TCP_FLAGS)}")
        _require(self.payload_len >= 0, "payload_len must be >= 0")
        _require(not self.payload or len(self.payload) == self.payload_len, "payload length mismatch")

    @property
    def inbound(self) -> bool:
        return self.direction is Direction.INBOUND


@dataclass(frozen=True)
class FiveTuple:
    src: str
    sport: int
    dst: str
    dport: int
    protocol: str = "tcp"


@dataclass(frozen=True)
class PacketTrace:
    five_tuple: FiveTuple
    events: tuple = ()
    client_initiated: bool = True

    def __post_init__(self) -> None:
        events = tuple(self.events)
        object.__setattr__(self, "events", events)
        for a, b in zip(events, events[1:]):
            _require(a.t <= b.t, "trace events must be non-decreasing in time")
        if self.client_initiated and events:
            first = events[0]
            _require(
                first.direction is Direction.OUTBOUND and "SYN" in first.flags,
                "client-initiated trace must start with an outbound SYN",
            )


# ---------------------------------------------------------------------------
# Observations


@dataclass(frozen=True)
class DnsResponse:
    arrival: int  # microseconds since test start
    answers: tuple = ()
    rcode: int = RCODE_NOERROR

    def __post_init__(self) -> None:
        answers = tuple(self.answers)
        for a in answers:
            _require(canonical_ip(a) == a, f"IP address not in canonical form: {a!r}")
        object.__setattr__(self, "answers", answers)
        _require(self.arrival >= 0, "arrival must be >= 0")


@dataclass(frozen=True)
class DnsObservation:
    qname: str
    resolver: ResolverKind
    responses: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "resolver", _enum(ResolverKind, self.resolver))
        responses = tuple(self.responses)
        object.__setattr__(self, "responses", responses)
        _require(is_valid_domain(self.qname), f"invalid domain {self.qname!r}")
        for a, b in zip(responses, responses[1:]):
            _require(a.arrival <= b.arrival, "DNS responses must be sorted by arrival")


@dataclass(frozen=True)
class HttpObservation:
    request_line: str
    request_headers: tuple = ()
    redirect_chain: tuple = ()
    status: Optional[int] = None
    response_headers: tuple = ()
    body: bytes = b""
    body_len: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "request_headers", tuple(tuple(h) for h in self.request_headers))
        object.__setattr__(self, "response_headers", tuple(tuple(h) for h in self.response_headers))
        object.__setattr__(self, "redirect_chain", tuple(self.redirect_chain))
        _require(self.body_len >= 0, "body_len must be >= 0")
        _require(not self.body or self.body_len == len(self.body), "body_len must equal len(body)")
        _require(self.status is None or 100 <= self.status <= 599, f"invalid status {self.status}")

    def header(self, name: str) -> Optional[str]:
        name = name.lower()
        for k, v in self.response_headers:
            if k.lower() == name:
                return v
        return None


@dataclass(frozen=True)
class CertSummary:
    subject: str
    issuer: str
    not_before: datetime
    not_after: datetime
    self_signed: bool = False
    issuer_trusted: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "not_before", _utc(self.not_before))
        object.__setattr__(self, "not_after", _utc(self.not_after))


@dataclass(frozen=True)
class TlsObservation:
    chain: tuple = ()
    handshake_failed: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "chain", tuple(self.chain))
        if self.handshake_failed:
            _require(not self.chain, "failed handshake carries no certificates")
        else:
            _require(bool(self.chain), "chain must be non-empty when the handshake completed")


@dataclass(frozen=True)
class ConnectResult:
    direct_ok: bool
    control_ok: bool
    trace: Optional[PacketTrace] = None


@dataclass(frozen=True)
class ProxyProbe:
    """One malformed request sent to the echo helper and what came back."""

    name: str
    sent: bytes
    echo: HttpObservation


@dataclass(frozen=True)
class RawMeasurement:
    vantage: str
    target: TestTarget
    started_at: datetime
    dns: tuple = ()
    http: Optional[HttpObservation] = None
    control_http: Optional[HttpObservation] = None
    tls: Optional[TlsObservation] = None
    trace: Optional[PacketTrace] = None
    connect: Optional[ConnectResult] = None
    proxy_probes: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "started_at", _utc(self.started_at))
        object.__setattr__(self, "dns", tuple(self.dns))
        object.__setattr__(self, "proxy_probes", tuple(self.proxy_probes))
        _require(bool(self.vantage), "vantage id must be non-empty")
        _require(
            bool(self.dns) or any(
                x is not None for x in (self.http, self.control_http, self.tls, self.trace, self.connect)
            ) or bool(self.proxy_probes),
            "measurement must carry at least one observation",
        )

    @property
    def key(self) -> tuple:
        return (self.vantage, self.target.url, format_ts(self.started_at))


# ---------------------------------------------------------------------------
# Findings


@dataclass(frozen=True)
class Anomaly:
    kind: AnomalyKind
    summary: str
    refs: tuple = ()
    detail: tuple = ()  # sorted (key, value) string pairs
    confidence: Confidence = Confidence.STANDALONE

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", _enum(AnomalyKind, self.kind))
        object.__setattr__(self, "confidence", _enum(Confidence, self.confidence))
        object.__setattr__(self, "refs", tuple(self.refs))
        detail = self.detail.items() if isinstance(self.detail, dict) else self.detail
        object.__setattr__(self, "detail", tuple(sorted((str(k), str(v)) for k, v in detail)))

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return dict(self.detail).get(key, default)


@dataclass(frozen=True)
class Verdict:
    vantage: str
    target: TestTarget
    outcome: Outcome
    methods: frozenset = frozenset()
    evidence: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "outcome", _enum(Outcome, self.outcome))
        object.__setattr__(self, "methods", frozenset(_enum(AnomalyKind, k) for k in self.methods))
        object.__setattr__(self, "evidence", tuple(self.evidence))
        if self.outcome is Outcome.CENSORED:
            _require(bool(self.methods), "censored verdict needs at least one method")
        else:
            _require(not self.methods, "only censored verdicts carry methods")


@dataclass(frozen=True)
class ReportRecord:
    """Envelope around a measurement as shipped to the controller."""

    measurement: RawMeasurement
    mode: Mode = Mode.RAW
    verdict: Optional[Verdict] = None
    local_only: bool = False
    vantage_point: Optional[VantagePoint] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", _enum(Mode, self.mode))
        if self.mode is Mode.RAW:
            _require(self.verdict is None, "raw-mode records never carry a verdict")
        else:
            _require(self.verdict is not None, "classify-mode records carry a verdict")
        if self.vantage_point is not None:
            _require(self.vantage_point.id == self.measurement.vantage, "vantage_point does not match measurement")


# ---------------------------------------------------------------------------
# Evidence references

_REF_RE = re.compile(r"^(\w+)(?:\[(\d+)\])?(?:\.(\w+)\[(\d+)\])?$")


def resolve_ref(m: RawMeasurement, ref: str) -> Any:
    """Resolve an evidence reference such as ``dns[0].responses[1]``.

    Raises KeyError when the reference does not point at an existing
    observation.
    """
    match = _REF_RE.match(ref)
    if not match:
        raise KeyError(ref)
    name, idx, sub, sub_idx = match.groups()
    if not hasattr(m, name) or name in ("vantage", "target", "started_at"):
        raise KeyError(ref)
    obj = getattr(m, name)
    if obj is None:
        raise KeyError(ref)
    if idx is not None:
        try:
            obj = obj[int(idx)]
        except (IndexError, TypeError) as exc:
            raise KeyError(ref) from exc
    if sub is not None:
        seq = getattr(obj, sub, None)
        if seq is None:
            raise KeyError(ref)
        try:
            obj = seq[int(sub_idx)]
        except (IndexError, TypeError) as exc:
            raise KeyError(ref) from exc
    return obj


# ---------------------------------------------------------------------------
# Test lists


def parse_test_list(text: str, origin: Origin = Origin.GLOBAL) -> list[TestTarget]:
    """Parse a ``url,category_code`` CSV test list.

    Extra columns are ignored. A header-only or empty file yields ``[]``.
    """
    if not text.strip():
        return []
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    if "url" not in header or "category_code" not in header:
        raise TestListError(1, "header must contain url,category_code")
    targets = []
    for row in reader:
        line = reader.line_num
        url = (row.get("url") or "").strip()
        if not url and not any((v or "").strip() for v in row.values() if isinstance(v, str)):
            continue
        try:
            targets.append(TestTarget(url, (row.get("category_code") or "").strip(), origin))
        except ValidationError as exc:
            raise TestListError(line, str(exc)) from exc
    return targets


def format_test_list(targets: Iterable[TestTarget]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["url", "category_code"])
    for t in targets:
        writer.writerow([t.url, t.category])
    return out.getvalue()


# ---------------------------------------------------------------------------
# Serialization


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


def target_to_dict(t: TestTarget) -> dict:
    return {"url": t.url, "category": t.category, "origin": t.origin.value}


def target_from_dict(d: dict) -> TestTarget:
    return TestTarget(d["url"], d["category"], d["origin"])


def vantage_to_dict(vp: VantagePoint) -> dict:
    return {"id": vp.id, "country": vp.country, "asn": vp.asn, "kind": vp.kind.value, "consent": vp.consent.value}


def vantage_from_dict(d: dict) -> VantagePoint:
    return VantagePoint(d["id"], d["country"], d["asn"], d.get("kind", "vpn"), d.get("consent", "opt-in"))


def _event_to_list(e: PacketEvent) -> list:
    return [e.t, e.direction.value, e.ip_ttl, e.ip_id, e.tcp_seq, e.tcp_ack, sorted(e.flags), e.payload_len, _b64(e.payload)]


def _event_from_list(v: list) -> PacketEvent:
    t, direction, ttl, ipid, seq, ack, flags, plen, payload = v
    return PacketEvent(t, direction, ttl, ipid, seq, ack, frozenset(flags), plen, _unb64(payload))


def trace_to_dict(tr: PacketTrace) -> dict:
    ft = tr.five_tuple
    return {
        "five_tuple": [ft.src, ft.sport, ft.dst, ft.dport, ft.protocol],
        "client_initiated": tr.client_initiated,
        "events": [_event_to_list(e) for e in tr.events],
    }


def trace_from_dict(d: dict) -> PacketTrace:
    return PacketTrace(FiveTuple(*d["five_tuple"]), tuple(_event_from_list(e) for e in d["events"]), d["client_initiated"])


def _dns_to_dict(o: DnsObservation) -> dict:
    return {
        "qname": o.qname,
        "resolver": o.resolver.value,
        "responses": [{"arrival": r.arrival, "answers": list(r.answers), "rcode": r.rcode} for r in o.responses],
    }


def _dns_from_dict(d: dict) -> DnsObservation:
    return DnsObservation(
        d["qname"], d["resolver"], tuple(DnsResponse(r["arrival"], tuple(r["answers"]), r["rcode"]) for r in d["responses"])
    )


def http_to_dict(o: HttpObservation) -> dict:
    return {
        "request_line": o.request_line,
        "request_headers": [list(h) for h in o.request_headers],
        "redirect_chain": list(o.redirect_chain),
        "status": o.status,
        "response_headers": [list(h) for h in o.response_headers],
        "body": _b64(o.body),
        "body_len": o.body_len,
    }


def http_from_dict(d: dict) -> HttpObservation:
    return HttpObservation(
        d["request_line"],
        tuple(tuple(h) for h in d["request_headers"]),
        tuple(d["redirect_chain"]),
        d["status"],
        tuple(tuple(h) for h in d["response_headers"]),
        _unb64(d["body"]),
        d["body_len"],
    )


def _cert_to_dict(c: CertSummary) -> dict:
    return {
        "subject": c.subject,
        "issuer": c.issuer,
        "not_before": format_ts(c.not_before),
        "not_after": format_ts(c.not_after),
        "self_signed": c.self_signed,
        "issuer_trusted": c.issuer_trusted,
    }


def _cert_from_dict(d: dict) -> CertSummary:
    return CertSummary(
        d["subject"], d["issuer"], parse_ts(d["not_before"]), parse_ts(d["not_after"]), d["self_signed"], d["issuer_trusted"]
    )


def tls_to_dict(o: TlsObservation) -> dict:
    return {"chain": [_cert_to_dict(c) for c in o.chain], "handshake_failed": o.handshake_failed}


def tls_from_dict(d: dict) -> TlsObservation:
    return TlsObservation(tuple(_cert_from_dict(c) for c in d["chain"]), d["handshake_failed"])


def _opt(value, fn):
    return None if value is None else fn(value)


def measurement_to_dict(m: RawMeasurement) -> dict:
    return {
        "vantage": m.vantage,
        "target": target_to_dict(m.target),
        "started_at": format_ts(m.started_at),
        "dns": [_dns_to_dict(o) for o in m.dns],
        "http": _opt(m.http, http_to_dict),
        "control_http": _opt(m.control_http, http_to_dict),
        "tls": _opt(m.tls, tls_to_dict),
        "trace": _opt(m.trace, trace_to_dict),
        "connect": _opt(
            m.connect,
            lambda c: {"direct_ok": c.direct_ok, "control_ok": c.control_ok, "trace": _opt(c.trace, trace_to_dict)},
        ),
        "proxy_probes": [
            {"name": p.name, "sent": _b64(p.sent), "echo": http_to_dict(p.echo)} for p in m.proxy_probes
        ],
    }


def measurement_from_dict(d: dict) -> RawMeasurement:
    return RawMeasurement(
        vantage=d["vantage"],
        target=target_from_dict(d["target"]),
        started_at=parse_ts(d["started_at"]),
        dns=tuple(_dns_from_dict(o) for o in d["dns"]),
        http=_opt(d["http"], http_from_dict),
        control_http=_opt(d["control_http"], http_from_dict),
        tls=_opt(d["tls"], tls_from_dict),
        trace=_opt(d["trace"], trace_from_dict),
        connect=_opt(
            d["connect"],
            lambda c: ConnectResult(c["direct_ok"], c["control_ok"], _opt(c["trace"], trace_from_dict)),
        ),
        proxy_probes=tuple(
            ProxyProbe(p["name"], _unb64(p["sent"]), http_from_dict(p["echo"])) for p in d["proxy_probes"]
        ),
    )


def anomaly_to_dict(a: Anomaly) -> dict:
    return {
        "kind": a.kind.value,
        "confidence": a.confidence.value,
        "summary": a.summary,
        "refs": list(a.refs),
        "detail": dict(a.detail),
    }


def anomaly_from_dict(d: dict) -> Anomaly:
    return Anomaly(d["kind"], d["summary"], tuple(d["refs"]), d["detail"], d["confidence"])


def verdict_to_dict(v: Verdict) -> dict:
    return {
        "vantage": v.vantage,
        "target": target_to_dict(v.target),
        "outcome": v.outcome.value,
        "methods": sorted(k.value for k in v.methods),
        "evidence": [anomaly_to_dict(a) for a in v.evidence],
    }


def verdict_from_dict(d: dict) -> Verdict:
    return Verdict(
        d["vantage"],
        target_from_dict(d["target"]),
        d["outcome"],
        frozenset(d["methods"]),
        tuple(anomaly_from_dict(a) for a in d["evidence"]),
    )


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _loads(line: str, expected_version: int) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ReportParseError(f"malformed record: {exc.msg}", exc.pos) from exc
    if not isinstance(obj, dict):
        raise ReportParseError("record is not an object", 0)
    version = obj.get("schema_version")
    if version != expected_version:
        raise SchemaVersionError(version)
    return obj


def serialize_report(item: RawMeasurement | ReportRecord) -> str:
    """Encode a measurement (or a full record envelope) as one JSON line.

    Output is deterministic: equal inputs always give identical strings. The
    returned line carries no trailing newline.
    """
    record = item if isinstance(item, ReportRecord) else ReportRecord(item)
    obj = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "mode": record.mode.value,
        "local_only": record.local_only,
        "measurement": measurement_to_dict(record.measurement),
        "verdict": _opt(record.verdict, verdict_to_dict),
        "vantage_point": _opt(record.vantage_point, vantage_to_dict),
    }
    return _dumps(obj)


def read_record(line: str) -> ReportRecord:
    obj = _loads(line, REPORT_SCHEMA_VERSION)
    try:
        return ReportRecord(
            measurement_from_dict(obj["measurement"]),
            obj["mode"],
            _opt(obj.get("verdict"), verdict_from_dict),
            obj.get("local_only", False),
            _opt(obj.get("vantage_point"), vantage_from_dict),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        if isinstance(exc, ReportParseError):
            raise
        raise ReportParseError(f"invalid record: {exc!r}", 0) from exc


def deserialize_report(line: str) -> RawMeasurement:
    return read_record(line).measurement


def serialize_verdict(v: Verdict, vantage_point: Optional[VantagePoint] = None) -> str:
    obj = verdict_to_dict(v)
    obj["schema_version"] = VERDICT_SCHEMA_VERSION
    obj["vantage_point"] = _opt(vantage_point, vantage_to_dict)
    return _dumps(obj)


def deserialize_verdict(line: str) -> tuple[Verdict, Optional[VantagePoint]]:
    obj = _loads(line, VERDICT_SCHEMA_VERSION)
    try:
        return verdict_from_dict(obj), _opt(obj.get("vantage_point"), vantage_from_dict)
    except (KeyError, TypeError, ValueError) as exc:
        raise ReportParseError(f"invalid verdict record: {exc!r}", 0) from exc


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]
