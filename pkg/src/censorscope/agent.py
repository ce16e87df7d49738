"""Probe agent: runs the test battery and emits report records.

In raw mode the agent ships observations only and leaves analysis to the
controller. In classify mode it runs the detectors locally and attaches the
verdict; both paths use the same detector code, so the two agree.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Optional, Sequence

from . import detectors
from .circumvention import get_mimic
from .fingerprints import MALFORMED_REQUESTS, FingerprintDb, load_fingerprints, malformed_request
from .model import (
    ConnectResult,
    DnsObservation,
    HttpObservation,
    Mode,
    PacketTrace,
    ProxyProbe,
    RawMeasurement,
    ReportRecord,
    ResolverKind,
    TestTarget,
    TlsObservation,
    ValidationError,
    VantageKind,
    VantagePoint,
    is_valid_domain,
)
from .transport import Transport

log = logging.getLogger(__name__)

DNS_COLLECTION_WINDOW_MS = 4000
RESOLVER_ORDER = (ResolverKind.SYSTEM, ResolverKind.PUBLIC, ResolverKind.CONTROL)


def _resolve_one(transport: Transport, qname: str, kind: ResolverKind) -> DnsObservation:
    try:
        obs = transport.resolve(qname, kind)
    except (TimeoutError, OSError) as exc:
        log.info("resolver %s timed out for %s: %s", kind.value, qname, exc)
        return DnsObservation(qname, kind, ())
    window_us = DNS_COLLECTION_WINDOW_MS * 1000
    kept = tuple(r for r in obs.responses if r.arrival <= window_us)
    return obs if len(kept) == len(obs.responses) else DnsObservation(obs.qname, obs.resolver, kept)


def run_dns_test(transport: Transport, qname: str) -> list[DnsObservation]:
    """Query the system, public and control resolvers at once, without waits."""
    if not is_valid_domain(qname):
        raise ValidationError(f"invalid domain {qname!r}")
    with ThreadPoolExecutor(max_workers=len(RESOLVER_ORDER)) as pool:
        futures = [pool.submit(_resolve_one, transport, qname, kind) for kind in RESOLVER_ORDER]
        return [f.result() for f in futures]


def run_http_test(
    transport: Transport, target: TestTarget, follow_redirects: bool = True
) -> tuple[HttpObservation, Optional[PacketTrace]]:
    try:
        return transport.fetch_http(target.url, follow_redirects)
    except (TimeoutError, OSError) as exc:
        log.info("fetch of %s failed: %s", target.url, exc)
        return HttpObservation(f"GET {target.url} HTTP/1.1"), None


def run_proxy_probe(transport: Transport, host: str, name: str = "header-case") -> ProxyProbe:
    """Send one malformed request from :data:`MALFORMED_REQUESTS` to the echo helper."""
    sent = malformed_request(name, host)
    return ProxyProbe(name, sent, transport.probe_proxy(sent))


def run_proxy_battery(transport: Transport, host: str) -> tuple[ProxyProbe, ...]:
    probes = []
    for name in MALFORMED_REQUESTS:
        try:
            probes.append(run_proxy_probe(transport, host, name))
        except (TimeoutError, OSError) as exc:
            log.info("proxy probe %s failed: %s", name, exc)
    return tuple(probes)


def run_tls_test(transport: Transport, host: str) -> TlsObservation:
    try:
        return transport.tls(host)
    except (TimeoutError, OSError):
        return TlsObservation((), handshake_failed=True)


def run_connect_test(transport: Transport, control: Transport, host: str, port: int) -> ConnectResult:
    try:
        direct_ok, trace = transport.tcp_connect(host, port)
    except (TimeoutError, OSError):
        direct_ok, trace = False, None
    try:
        control_ok, _ = control.tcp_connect(host, port)
    except (TimeoutError, OSError):
        control_ok = False
    return ConnectResult(direct_ok, control_ok, trace)


def run_circumvention_mimic(transport: Transport, protocol_name: str) -> bool:
    """True iff the bridge answered the mimic handshake with the expected bytes.

    Raises KeyError for a protocol outside the mimic table.
    """
    proto = get_mimic(protocol_name)
    try:
        reply = transport.mimic(proto)
    except (TimeoutError, OSError):
        return False
    return reply == proto.expected_reply()


def measure(
    transport: Transport,
    control: Transport,
    target: TestTarget,
    vantage: str,
    started_at: Optional[datetime] = None,
    follow_redirects: bool = True,
) -> RawMeasurement:
    """Run every applicable test for one target."""
    host = target.host
    dns = run_dns_test(transport, host) if is_valid_domain(host) else []
    http, trace = run_http_test(transport, target, follow_redirects)
    control_http, _ = run_http_test(control, target, follow_redirects)
    tls = run_tls_test(transport, host) if target.scheme == "https" else None
    port = 443 if target.scheme == "https" else 80
    connect = run_connect_test(transport, control, host, port)
    probes = run_proxy_battery(transport, host)
    return RawMeasurement(
        vantage=vantage,
        target=target,
        started_at=started_at if started_at is not None else transport.now(),
        dns=tuple(dns),
        http=http,
        control_http=control_http,
        tls=tls,
        trace=trace,
        connect=connect,
        proxy_probes=probes,
    )


def run_baseline(
    transport: Transport,
    targets: Sequence[TestTarget],
    control: Optional[Transport] = None,
    vantage: str = "local",
    started_at: Optional[datetime] = None,
    workers: int = 1,
) -> list[RawMeasurement]:
    """One measurement per target, in input order. Failures stay inside each record."""
    if control is None:
        control = transport.control()  # type: ignore[attr-defined]

    def one(target: TestTarget) -> RawMeasurement:
        return measure(transport, control, target, vantage, started_at)

    if workers <= 1:
        return [one(t) for t in targets]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, targets))


@dataclass
class ProbeAgent:
    vantage: VantagePoint
    transport: Transport
    control: Transport
    mode: Mode = Mode.RAW
    fingerprints: Optional[FingerprintDb] = None
    policy: detectors.ClassifyPolicy = detectors.DEFAULT_POLICY
    workers: int = 1

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if self.mode is Mode.CLASSIFY and self.fingerprints is None:
            self.fingerprints = load_fingerprints()

    def to_records(self, measurements: Iterable[RawMeasurement], local_only: bool = False) -> list[ReportRecord]:
        if local_only and self.vantage.kind is not VantageKind.VOLUNTEER:
            raise ValidationError("only volunteer vantage points may keep reports local")
        out = []
        for m in measurements:
            verdict = None
            if self.mode is Mode.CLASSIFY:
                verdict = detectors.detect(m, self.fingerprints, self.policy)
            out.append(ReportRecord(m, self.mode, verdict, local_only, self.vantage))
        return out

    def run(self, targets: Sequence[TestTarget], started_at: Optional[datetime] = None, local_only: bool = False) -> list[ReportRecord]:
        measurements = run_baseline(self.transport, targets, self.control, self.vantage.id, started_at, self.workers)
        return self.to_records(measurements, local_only)
