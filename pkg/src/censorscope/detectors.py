"""Anomaly detectors and the verdict classifier.

Every function here is pure. Detectors return :class:`Anomaly` findings whose
``refs`` point back into the source measurement (``dns[1].responses[0]``,
``trace.events[7]`` ...); :func:`classify` combines findings into a
:class:`Verdict`.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, replace
from datetime import datetime
from typing import Optional, Sequence

from .fingerprints import FingerprintDb
from .model import (
    U32,
    Anomaly,
    AnomalyKind,
    Confidence,
    DnsObservation,
    HttpObservation,
    Outcome,
    PacketTrace,
    RawMeasurement,
    ResolverKind,
    TlsObservation,
    Verdict,
    resolve_ref,
)

DNS_WINDOW_MS = 2000
TTL_THRESHOLD = 2
BODY_TOLERANCE = 0.30

# Kinds that establish censorship on their own. Everything else needs a
# second, distinct kind before a verdict flips to censored.
STANDALONE_SUFFICIENT = frozenset(
    {AnomalyKind.DNS_INJECTION, AnomalyKind.HTTP_BLOCKPAGE, AnomalyKind.TLS_MITM, AnomalyKind.TCP_CONNECT_ASYMMETRY}
)
UNKNOWN_PRODUCT = "unknown"


# ---------------------------------------------------------------------------
# DNS


def detect_dns_anomaly(obs: DnsObservation, window_ms: int = DNS_WINDOW_MS, *, index: int = 0) -> Optional[Anomaly]:
    """Flag a second response arriving strictly less than ``window_ms`` after the first."""
    if len(obs.responses) < 2:
        return None
    first, second = obs.responses[0], obs.responses[1]
    gap_us = second.arrival - first.arrival
    if gap_us >= window_ms * 1000:
        return None
    return Anomaly(
        AnomalyKind.DNS_INJECTION,
        f"{obs.qname}: second response {gap_us / 1000:g}ms after the first via {obs.resolver.value}",
        (f"dns[{index}].responses[0]", f"dns[{index}].responses[1]"),
        {
            "resolver": obs.resolver.value,
            "gap_us": gap_us,
            "first_answers": ",".join(first.answers),
            "second_answers": ",".join(second.answers),
        },
    )


def _first_answers(obs: DnsObservation) -> frozenset:
    for r in obs.responses:
        if r.answers:
            return frozenset(r.answers)
    return frozenset()


def detect_dns_inconsistency(obs_set: Sequence[DnsObservation]) -> Optional[Anomaly]:
    """Compare default/alternate answers against the control resolver.

    Fires when a field resolver's first answer set is non-empty and shares no
    address with the control's non-empty answer set. An empty control answer
    makes no claim.
    """
    control = [o for o in obs_set if o.resolver is ResolverKind.CONTROL]
    if not control:
        return None
    control_answers = _first_answers(control[0])
    if not control_answers:
        return None
    refs, offending = [], []
    for i, obs in enumerate(obs_set):
        if obs.resolver is ResolverKind.CONTROL:
            continue
        answers = _first_answers(obs)
        if answers and answers.isdisjoint(control_answers):
            refs.append(f"dns[{i}]")
            offending.append(f"{obs.resolver.value}={','.join(sorted(answers))}")
    if not refs:
        return None
    refs.append(f"dns[{obs_set.index(control[0])}]")
    return Anomaly(
        AnomalyKind.DNS_INCONSISTENT,
        f"{control[0].qname}: answers disjoint from control resolver",
        tuple(refs),
        {"control": ",".join(sorted(control_answers)), "field": ";".join(offending)},
    )


# ---------------------------------------------------------------------------
# HTTP


def _headers_text(headers) -> str:
    return "".join(f"{k}: {v}\n" for k, v in headers)


def detect_blockpage(http: Optional[HttpObservation], db: FingerprintDb, *, ref: str = "http") -> Optional[Anomaly]:
    if http is None or http.status is None:
        return None
    body = http.body.decode("utf-8", errors="replace")
    headers = _headers_text(http.response_headers)
    for fp in db.blockpages:
        if fp.matches(body, headers):
            detail = {"fingerprint": fp.name}
            if fp.country:
                detail["country"] = fp.country
            return Anomaly(AnomalyKind.HTTP_BLOCKPAGE, f"body matches blockpage fingerprint {fp.name}", (ref,), detail)
    return None


def detect_http_tampering(
    field: Optional[HttpObservation], control: Optional[HttpObservation], tolerance: float = BODY_TOLERANCE
) -> Optional[Anomaly]:
    """Compare field metadata against the control fetch (status, body size)."""
    if control is None or control.status is None:
        return None
    if field is None or field.status is None:
        return Anomaly(
            AnomalyKind.HTTP_TAMPERING, "no response in the field while the control fetch succeeded",
            ("control_http",) if field is None else ("http", "control_http"),
            {"reason": "field-absent", "control_status": control.status},
        )
    reasons = {}
    if field.status != control.status:
        reasons["status"] = f"{field.status}!={control.status}"
    diff = abs(field.body_len - control.body_len) / max(control.body_len, 1)
    if diff > tolerance:
        reasons["body_len"] = f"{field.body_len} vs {control.body_len} ({diff:.3f} > {tolerance})"
    if not reasons:
        return None
    return Anomaly(
        AnomalyKind.HTTP_TAMPERING, "field response differs from control: " + ", ".join(sorted(reasons)),
        ("http", "control_http"), reasons,
    )


def identify_proxy(echoed: bytes, sent: bytes, db: FingerprintDb) -> Optional[str]:
    """Return the product whose transform explains the mutation, ``"unknown"``, or None if unmodified."""
    if echoed == sent:
        return None
    for p in db.proxies:
        if p.apply(sent) == echoed:
            return p.name
    return UNKNOWN_PRODUCT


def detect_proxy(probe: HttpObservation, sent_bytes: bytes, db: FingerprintDb, *, ref: str = "proxy_probes[0]") -> Optional[Anomaly]:
    product = identify_proxy(probe.body, sent_bytes, db)
    if product is None:
        return None
    return Anomaly(AnomalyKind.HTTP_PROXY, f"malformed request was rewritten in transit ({product})", (ref,), {"product": product})


def _merge_proxy(found: list[Anomaly]) -> Optional[Anomaly]:
    if not found:
        return None
    products = sorted({a.get("product") for a in found})
    named = [p for p in products if p != UNKNOWN_PRODUCT]
    product = named[0] if len(named) == 1 else UNKNOWN_PRODUCT
    refs = tuple(r for a in found for r in a.refs)
    return Anomaly(
        AnomalyKind.HTTP_PROXY, f"{len(found)} malformed probe(s) rewritten in transit ({product})", refs,
        {"product": product, "observed": ",".join(products)},
    )


# ---------------------------------------------------------------------------
# TLS


def detect_tls_mitm(tls: Optional[TlsObservation], now: datetime) -> Optional[Anomaly]:
    if tls is None or tls.handshake_failed or not tls.chain:
        return None
    reasons = {}
    if tls.chain[0].not_after < now:
        reasons["expired"] = tls.chain[0].not_after.isoformat()
    untrusted = [i for i, c in enumerate(tls.chain) if not c.issuer_trusted]
    if untrusted:
        reasons["untrusted_issuer"] = tls.chain[untrusted[0]].issuer
    if any(c.self_signed for c in tls.chain):
        reasons["self_signed"] = "true"
    if not reasons:
        return None
    refs = ["tls.chain[0]"] + [f"tls.chain[{i}]" for i in untrusted if i != 0]
    return Anomaly(AnomalyKind.TLS_MITM, "certificate chain failed validation: " + ", ".join(sorted(reasons)), tuple(refs), reasons)


# ---------------------------------------------------------------------------
# TCP


def _ttl_mode(ttls: list[int]) -> int:
    counts = Counter(ttls)
    best = max(counts.values())
    # Ties go to the TTL seen first, normally the SYN-ACK from the real server.
    return next(t for t in ttls if counts[t] == best)


_CONTENT_LENGTH = re.compile(rb"(?im)^content-length:\s*(\d+)\s*$")


def _response_complete(segments: list[tuple[int, bytes]]) -> bool:
    """True when captured inbound bytes hold a full HTTP response (by Content-Length)."""
    if not segments:
        return False
    stream = bytearray()
    for start, payload in sorted(segments):
        end = start + len(payload)
        if start > len(stream):
            break
        if end > len(stream):
            stream += payload[len(stream) - start:]
    head_end = stream.find(b"\r\n\r\n")
    if head_end < 0:
        return False
    m = _CONTENT_LENGTH.search(bytes(stream[:head_end]))
    if not m:
        return False
    return len(stream) >= head_end + 4 + int(m.group(1))


def detect_tcp_anomalies(trace: Optional[PacketTrace], ttl_threshold: int = TTL_THRESHOLD, *, ref: str = "trace") -> list[Anomaly]:
    """TTL, premature-RST and conflicting-overlap checks over one TCP stream.

    Plain sequence gaps are ignored: load balancers produce them without any
    censor involved.
    """
    if trace is None:
        return []
    inbound = [(i, e) for i, e in enumerate(trace.events) if e.inbound]
    if not inbound:
        return []
    found: list[Anomaly] = []

    mode = _ttl_mode([e.ip_ttl for _, e in inbound])
    odd = [(i, e) for i, e in inbound if abs(e.ip_ttl - mode) >= ttl_threshold]
    if odd:
        found.append(Anomaly(
            AnomalyKind.TCP_TTL,
            f"{len(odd)} inbound packet(s) deviate from TTL mode {mode}",
            tuple(f"{ref}.events[{i}]" for i, _ in odd),
            {"mode": mode, "ttls": ",".join(str(e.ip_ttl) for _, e in odd)},
        ))

    synack = next((e for _, e in inbound if {"SYN", "ACK"} <= e.flags), None)
    data = [(i, e) for i, e in inbound if e.payload_len > 0 and "RST" not in e.flags]
    if synack is not None:
        base = (synack.tcp_seq + 1) % U32
    elif data:
        base = data[0][1].tcp_seq
    else:
        base = 0

    def rel(e) -> int:
        return (e.tcp_seq - base) % U32

    fin_seen = False
    segments: list[tuple[int, bytes]] = []
    for i, e in inbound:
        if "RST" in e.flags:
            if not fin_seen and not _response_complete(segments):
                found.append(Anomaly(
                    AnomalyKind.TCP_RST, "inbound RST before the response completed",
                    (f"{ref}.events[{i}]",), {"t": e.t, "ttl": e.ip_ttl},
                ))
            break
        if "FIN" in e.flags:
            fin_seen = True
        if e.payload_len > 0 and e.payload:
            segments.append((rel(e), e.payload))

    conflict = _overlap_conflict([(i, rel(e), e) for i, e in data])
    if conflict is not None:
        a, b = conflict
        found.append(Anomaly(
            AnomalyKind.TCP_SEQ, "inbound segments overlap with conflicting content",
            (f"{ref}.events[{a}]", f"{ref}.events[{b}]"), {},
        ))
    return found


def _overlap_conflict(segs: list) -> Optional[tuple[int, int]]:
    """Find two segments covering the same bytes with different content."""
    ordered = sorted(segs, key=lambda s: (s[1], s[0]))
    active: list = []
    for idx, start, ev in ordered:
        end = start + ev.payload_len
        active = [s for s in active if s[1] + s[2].payload_len > start]
        for pidx, pstart, pev in active:
            if not (ev.payload and pev.payload):
                continue
            lo, hi = start, min(end, pstart + pev.payload_len)
            if hi <= lo:
                continue
            mine = ev.payload[lo - start:hi - start]
            theirs = pev.payload[lo - pstart:hi - pstart]
            if mine != theirs:
                return tuple(sorted((pidx, idx)))
        active.append((idx, start, ev))
    return None


def detect_connect_asymmetry(direct_ok: bool, control_ok: bool) -> Optional[Anomaly]:
    if control_ok and not direct_ok:
        return Anomaly(
            AnomalyKind.TCP_CONNECT_ASYMMETRY, "direct connect failed while the control channel succeeded",
            ("connect",), {"direct_ok": direct_ok, "control_ok": control_ok},
        )
    return None


# ---------------------------------------------------------------------------
# Composition


@dataclass(frozen=True)
class DetectorConfig:
    dns_window_ms: int = DNS_WINDOW_MS
    ttl_threshold: int = TTL_THRESHOLD
    body_tolerance: float = BODY_TOLERANCE


@dataclass(frozen=True)
class ClassifyPolicy:
    """Which anomaly kinds are enough on their own to call a target censored."""

    sufficient: frozenset = STANDALONE_SUFFICIENT
    min_distinct_kinds: int = 2
    # A rewrite attributed to a known interception product counts as sufficient.
    identified_proxy_sufficient: bool = True


DEFAULT_POLICY = ClassifyPolicy()


def analyze(m: RawMeasurement, db: FingerprintDb, config: DetectorConfig = DetectorConfig()) -> list[Anomaly]:
    """Run every applicable detector over one measurement, in a fixed order."""
    found: list[Optional[Anomaly]] = []
    for i, obs in enumerate(m.dns):
        found.append(detect_dns_anomaly(obs, config.dns_window_ms, index=i))
    found.append(detect_dns_inconsistency(m.dns))
    found.append(detect_blockpage(m.http, db))
    found.append(detect_http_tampering(m.http, m.control_http, config.body_tolerance))
    found.append(_merge_proxy([
        a for j, p in enumerate(m.proxy_probes)
        if (a := detect_proxy(p.echo, p.sent, db, ref=f"proxy_probes[{j}]")) is not None
    ]))
    found.append(detect_tls_mitm(m.tls, m.started_at))
    found.extend(detect_tcp_anomalies(m.trace, config.ttl_threshold))
    if m.connect is not None:
        found.append(detect_connect_asymmetry(m.connect.direct_ok, m.connect.control_ok))
    return [a for a in found if a is not None]


def _sufficient(a: Anomaly, policy: ClassifyPolicy) -> bool:
    if a.kind in policy.sufficient:
        return True
    return (
        policy.identified_proxy_sufficient
        and a.kind is AnomalyKind.HTTP_PROXY
        and a.get("product", UNKNOWN_PRODUCT) != UNKNOWN_PRODUCT
    )


def classify(m: RawMeasurement, anomalies: Sequence[Anomaly], policy: ClassifyPolicy = DEFAULT_POLICY) -> Verdict:
    kinds = {a.kind for a in anomalies}
    label = Confidence.CORROBORATING if len(kinds) >= 2 else Confidence.STANDALONE
    evidence = tuple(replace(a, confidence=label) for a in anomalies)
    censored = any(_sufficient(a, policy) for a in anomalies) or len(kinds) >= policy.min_distinct_kinds
    if censored:
        return Verdict(m.vantage, m.target, Outcome.CENSORED, frozenset(kinds), evidence)
    responded = m.http is not None and m.http.status is not None
    outcome = Outcome.OK if responded else Outcome.INCONCLUSIVE
    return Verdict(m.vantage, m.target, outcome, frozenset(), evidence)


def detect(
    m: RawMeasurement, db: FingerprintDb, policy: ClassifyPolicy = DEFAULT_POLICY, config: DetectorConfig = DetectorConfig()
) -> Verdict:
    return classify(m, analyze(m, db, config), policy)


def unresolved_refs(m: RawMeasurement, anomalies: Sequence[Anomaly]) -> list[str]:
    """Evidence references that do not resolve inside ``m`` (should always be empty)."""
    bad = []
    for a in anomalies:
        for r in a.refs:
            try:
                resolve_ref(m, r)
            except KeyError:
                bad.append(r)
    return bad
