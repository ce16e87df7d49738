"""Deterministic censor-network simulator.

A :class:`SimScenario` declares origin servers, honest DNS answers and an
ordered list of on-path censor elements. The ``sim_*`` functions return the
same observation types a field probe records, so detectors run unchanged on
simulated and recorded data.

Timing model: every server path has a fixed round-trip latency and hop count.
Honest inbound packets carry TTL ``64 - hops``; injected packets derive their
TTL from the injecting element. Optional jitter is drawn from a hash of the
scenario seed, never from global randomness.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Optional, Union
from urllib.parse import urljoin, urlsplit

from . import fingerprints
from .circumvention import MimicProtocol, reply_for
from .model import (
    RCODE_NOERROR,
    RCODE_NXDOMAIN,
    CertSummary,
    Direction,
    DnsObservation,
    DnsResponse,
    FiveTuple,
    HttpObservation,
    PacketEvent,
    PacketTrace,
    ResolverKind,
    TlsObservation,
    ValidationError,
    canonical_ip,
    parse_ts,
    url_host,
)

DEFAULT_EPOCH = datetime(2016, 3, 1, tzinfo=timezone.utc)
CLIENT_IP = "10.0.0.2"
ECHO_HELPER_IP = "198.51.100.7"
MSS = 1400
MAX_REDIRECTS = 10
SYN_RETRIES_US = (1_000_000, 3_000_000)
REDIRECT_STATUSES = frozenset({301, 302, 303, 307, 308})
CONTROL_CLIENT = "control"


def domain_matches(host: str, patterns) -> bool:
    host = host.lower().rstrip(".")
    for p in patterns:
        p = p.lower().rstrip(".")
        if host == p or host.endswith("." + p):
            return True
    return False


def _stable_int(*parts) -> int:
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "big")


# ---------------------------------------------------------------------------
# Path elements


def _nonempty(values, what: str) -> tuple:
    values = tuple(values)
    if not values:
        raise ValidationError(f"{what} must be non-empty")
    return values


@dataclass(frozen=True)
class DnsInjector:
    match_domains: tuple
    fake_ips: tuple
    injection_delay_ms: int = 5

    def __post_init__(self) -> None:
        object.__setattr__(self, "match_domains", _nonempty(self.match_domains, "match_domains"))
        object.__setattr__(self, "fake_ips", tuple(canonical_ip(ip) for ip in _nonempty(self.fake_ips, "fake_ips")))
        if self.injection_delay_ms < 0:
            raise ValidationError("injection_delay_ms must be >= 0")


@dataclass(frozen=True)
class RstInjector:
    match_domains: tuple = ()
    keywords: tuple = ()
    ttl_offset: int = -3
    # Round trip from client to the injecting box.
    latency_ms: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "match_domains", tuple(self.match_domains))
        object.__setattr__(self, "keywords", tuple(self.keywords))
        if not self.match_domains and not self.keywords:
            raise ValidationError("RstInjector needs match_domains or keywords")

    def triggers(self, host: str, cleartext: bytes) -> bool:
        if host and domain_matches(host, self.match_domains):
            return True
        low = cleartext.lower()
        return any(k.encode().lower() in low for k in self.keywords)


@dataclass(frozen=True)
class BlockpageProxy:
    match_domains: tuple
    page_body: str
    status: int = 403

    def __post_init__(self) -> None:
        object.__setattr__(self, "match_domains", _nonempty(self.match_domains, "match_domains"))


@dataclass(frozen=True)
class TransparentProxy:
    fingerprint: str
    match_domains: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "match_domains", _nonempty(self.match_domains, "match_domains"))
        if self.fingerprint not in fingerprints.PROXY_TRANSFORMS:
            raise ValidationError(f"unknown proxy fingerprint {self.fingerprint!r}")


TLS_MITM_CERTS = ("self-signed", "untrusted-issuer", "expired")


@dataclass(frozen=True)
class TlsMitm:
    match_domains: tuple
    cert: str = "untrusted-issuer"

    def __post_init__(self) -> None:
        object.__setattr__(self, "match_domains", _nonempty(self.match_domains, "match_domains"))
        if self.cert not in TLS_MITM_CERTS:
            raise ValidationError(f"TlsMitm cert must be one of {TLS_MITM_CERTS}")


@dataclass(frozen=True)
class IpBlocker:
    match_hosts: tuple
    mode: str = "drop-syn"

    def __post_init__(self) -> None:
        object.__setattr__(self, "match_hosts", _nonempty(self.match_hosts, "match_hosts"))
        if self.mode not in ("drop-syn", "rst-on-syn"):
            raise ValidationError("IpBlocker mode must be drop-syn or rst-on-syn")


PathElement = Union[DnsInjector, RstInjector, BlockpageProxy, TransparentProxy, TlsMitm, IpBlocker]


# ---------------------------------------------------------------------------
# Server behaviours

DEFAULT_BODY = "<html><head><title>{host}</title></head><body><h1>{host}</h1><p>{filler}</p></body></html>"


@dataclass(frozen=True)
class Honest:
    body: Optional[str] = None
    status: int = 200
    redirect_to: Optional[str] = None


@dataclass(frozen=True)
class Dead:
    pass


@dataclass(frozen=True)
class VpnBlocker:
    blocked_client_kinds: tuple = ("vpn",)
    body: Optional[str] = None
    status: int = 200


@dataclass(frozen=True)
class QuirkyLoadBalancer:
    seq_gap: int = 1000
    body: Optional[str] = None
    status: int = 200

    def __post_init__(self) -> None:
        if self.seq_gap <= 0:
            raise ValidationError("seq_gap must be positive")


@dataclass(frozen=True)
class ChineseQuirk:
    body: Optional[str] = None
    status: int = 200


ServerBehavior = Union[Honest, Dead, VpnBlocker, QuirkyLoadBalancer, ChineseQuirk]


@dataclass(frozen=True)
class PathProfile:
    latency_ms: int = 40
    hops: int = 12


@dataclass(frozen=True)
class SimScenario:
    seed: int = 0
    servers: dict = field(default_factory=dict)
    resolvers: dict = field(default_factory=dict)
    path_elements: tuple = ()
    paths: dict = field(default_factory=dict)
    dns_latency_ms: dict = field(default_factory=dict)
    unresponsive_resolvers: frozenset = frozenset()
    epoch: datetime = DEFAULT_EPOCH
    jitter_ms: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "path_elements", tuple(self.path_elements))
        object.__setattr__(
            self, "resolvers",
            {k.lower(): tuple(canonical_ip(ip) for ip in v) for k, v in self.resolvers.items()},
        )
        object.__setattr__(self, "servers", {k.lower(): v for k, v in self.servers.items()})
        object.__setattr__(
            self, "unresponsive_resolvers", frozenset(ResolverKind(r) for r in self.unresponsive_resolvers)
        )

    def server(self, host: str) -> ServerBehavior:
        return self.servers.get(host.lower(), Dead())

    def path(self, host: str) -> PathProfile:
        return self.paths.get(host.lower(), PathProfile())

    def dns_latency(self, kind: ResolverKind) -> int:
        defaults = {ResolverKind.SYSTEM: 20, ResolverKind.PUBLIC: 35, ResolverKind.CONTROL: 60}
        return self.dns_latency_ms.get(kind, self.dns_latency_ms.get(kind.value, defaults[kind]))

    def address(self, host: str) -> str:
        answers = self.resolvers.get(host.lower())
        if answers:
            return answers[0]
        n = _stable_int(self.seed, "addr", host)
        return f"203.0.113.{n % 250 + 1}"

    def jitter_us(self, *key) -> int:
        if self.jitter_ms <= 0:
            return 0
        return _stable_int(self.seed, "jitter", *key) % (self.jitter_ms * 1000 + 1)

    def elements(self, cls, channel: str = "direct") -> list:
        if channel != "direct":
            return []
        return [e for e in self.path_elements if isinstance(e, cls)]

    def without_censors(self) -> "SimScenario":
        return SimScenario(
            self.seed, self.servers, self.resolvers, (), self.paths, self.dns_latency_ms,
            self.unresponsive_resolvers, self.epoch, self.jitter_ms,
        )


# ---------------------------------------------------------------------------
# DNS


def sim_resolve(scenario: SimScenario, qname: str, resolver_kind, channel: str = "direct") -> DnsObservation:
    """Resolve ``qname`` through the simulated resolver of the given kind.

    Queries to the non-standard-port control resolver bypass injection.
    """
    kind = ResolverKind(resolver_kind)
    qname = qname.lower().rstrip(".")
    if kind in scenario.unresponsive_resolvers:
        return DnsObservation(qname, kind, ())
    arrival = scenario.dns_latency(kind) * 1000 + scenario.jitter_us("dns", qname, kind.value)
    answers = scenario.resolvers.get(qname)
    if not answers and qname in scenario.servers:
        answers = (scenario.address(qname),)
    if answers:
        honest = DnsResponse(arrival, answers, RCODE_NOERROR)
    else:
        honest = DnsResponse(arrival, (), RCODE_NXDOMAIN)
    responses = [honest]
    if kind is not ResolverKind.CONTROL:
        for inj in scenario.elements(DnsInjector, channel):
            if domain_matches(qname, inj.match_domains):
                responses.append(DnsResponse(inj.injection_delay_ms * 1000, inj.fake_ips, RCODE_NOERROR))
    # Forged answers win ties: the injector is closer than the resolver.
    responses.sort(key=lambda r: (r.arrival, r is honest))
    return DnsObservation(qname, kind, tuple(responses))


# ---------------------------------------------------------------------------
# TCP trace construction


class _TraceBuilder:
    def __init__(self, scenario: SimScenario, host: str, port: int, salt: str) -> None:
        self.scenario = scenario
        self.host = host
        prof = scenario.path(host)
        self.rtt_us = prof.latency_ms * 1000 + scenario.jitter_us("rtt", host, salt)
        self.ttl = max(1, 64 - prof.hops)
        seed = scenario.seed
        self.sport = 32768 + _stable_int(seed, "sport", host, port, salt) % 28000
        self.c_isn = _stable_int(seed, "cisn", host, port, salt) % 2**32
        self.s_isn = _stable_int(seed, "sisn", host, port, salt) % 2**32
        self.c_ipid = _stable_int(seed, "cipid", host, salt) % 60000
        self.s_ipid = _stable_int(seed, "sipid", host, salt) % 60000
        self.five = FiveTuple(CLIENT_IP, self.sport, scenario.address(host), port, "tcp")
        self.events: list[PacketEvent] = []
        self.c_next = self.c_isn
        self.s_next = self.s_isn

    def out(self, t: int, flags, payload: bytes = b"", seq: Optional[int] = None) -> None:
        self.c_ipid = (self.c_ipid + 1) % 65536
        s = self.c_next if seq is None else seq
        ack = (self.s_next) % 2**32 if "ACK" in flags else 0
        self.events.append(
            PacketEvent(t, Direction.OUTBOUND, 64, self.c_ipid, s % 2**32, ack, frozenset(flags), len(payload), payload)
        )

    def inbound(self, t: int, flags, payload: bytes = b"", *, seq=None, ttl=None, ipid=None) -> None:
        if ipid is None:
            self.s_ipid = (self.s_ipid + 1) % 65536
            ipid = self.s_ipid
        s = self.s_next if seq is None else seq
        self.events.append(
            PacketEvent(
                t, Direction.INBOUND, self.ttl if ttl is None else ttl, ipid, s % 2**32,
                self.c_next % 2**32 if "ACK" in flags else 0, frozenset(flags), len(payload), payload,
            )
        )

    def syn_unanswered(self) -> None:
        self.out(0, {"SYN"})
        for t in SYN_RETRIES_US:
            self.out(t, {"SYN"})

    def handshake(self) -> int:
        self.out(0, {"SYN"})
        self.c_next += 1
        self.inbound(self.rtt_us, {"SYN", "ACK"})
        self.s_next += 1
        t = self.rtt_us + 100
        self.out(t, {"ACK"})
        return t

    def trace(self) -> PacketTrace:
        events = sorted(self.events, key=lambda e: e.t)
        return PacketTrace(self.five, tuple(events))


def _ip_blocked(scenario: SimScenario, host: str, channel: str) -> Optional[IpBlocker]:
    addr = scenario.address(host)
    for blk in scenario.elements(IpBlocker, channel):
        if domain_matches(host, blk.match_hosts) or addr in blk.match_hosts:
            return blk
    return None


def _blocked_syn(tb: _TraceBuilder, blocker: IpBlocker) -> None:
    if blocker.mode == "drop-syn":
        tb.syn_unanswered()
        return
    tb.out(0, {"SYN"})
    tb.c_next += 1
    # RST/ACK from a box halfway along the path.
    prof = tb.scenario.path(tb.host)
    tb.inbound(tb.rtt_us // 2, {"RST", "ACK"}, seq=0, ttl=max(1, 64 - prof.hops // 2), ipid=0)


def _body_for(host: str, body: Optional[str]) -> bytes:
    if body is not None:
        return body.encode("utf-8")
    filler = hashlib.sha256(host.encode()).hexdigest() * 8
    return DEFAULT_BODY.format(host=host, filler=filler).encode("utf-8")


def _response_bytes(status: int, headers: list, body: bytes) -> bytes:
    reason = {200: "OK", 301: "Moved Permanently", 302: "Found", 303: "See Other", 307: "Temporary Redirect",
              308: "Permanent Redirect", 403: "Forbidden", 404: "Not Found", 451: "Unavailable For Legal Reasons"}
    head = f"HTTP/1.1 {status} {reason.get(status, 'Status')}\r\n"
    head += "".join(f"{k}: {v}\r\n" for k, v in headers) + "\r\n"
    return head.encode("latin-1") + body


def _server_response(scenario, host, client_kind, channel, url):
    """Return (status, headers, body, behavior) for an uncensored hop."""
    srv = scenario.server(host)
    status, body, location = 200, None, None
    if isinstance(srv, Honest):
        status, body, location = srv.status, srv.body, srv.redirect_to
        if location and status not in REDIRECT_STATUSES:
            status = 302
    elif isinstance(srv, VpnBlocker):
        if client_kind in srv.blocked_client_kinds:
            status, body = 403, "<html><body><h1>Access denied</h1><p>Traffic from VPN or hosting networks is not permitted.</p></body></html>"
        else:
            status, body = srv.status, srv.body
    elif isinstance(srv, (QuirkyLoadBalancer, ChineseQuirk)):
        status, body = srv.status, srv.body
    payload = _body_for(host, body)
    headers = [("Server", "sim-httpd"), ("Content-Type", "text/html; charset=utf-8")]
    if location:
        headers.append(("Location", location))
    headers.append(("Content-Length", str(len(payload))))
    return status, headers, payload, srv


def _send_response(tb: _TraceBuilder, t_req: int, raw: bytes, srv) -> None:
    t = t_req + tb.rtt_us
    segments = [raw[i:i + MSS] for i in range(0, len(raw), MSS)]
    chinese = isinstance(srv, ChineseQuirk)
    gap = srv.seq_gap if isinstance(srv, QuirkyLoadBalancer) else 0
    if gap and len(segments) == 1 and len(raw) > 1:
        # Balancer hand-off happens mid-response, so always split once.
        half = len(raw) // 2
        segments = [raw[:half], raw[half:]]
    if chinese:
        # SYN-ACK carried an unrelated IPID; the data packets use a far-off counter.
        tb.s_ipid = (tb.s_ipid + 31337) % 65536
    for i, seg in enumerate(segments):
        if i == 1 and gap:
            tb.s_next += gap
        tb.inbound(t, {"PSH", "ACK"}, seg)
        tb.s_next += len(seg)
        t += 50
    if chinese and raw:
        n = min(8, len(raw))
        overlap = bytes(b ^ 0x20 for b in raw[-n:])
        tb.inbound(t, {"PSH", "ACK"}, overlap, seq=tb.s_next - n)
        t += 50
    tb.inbound(t, {"FIN", "ACK"})
    tb.s_next += 1
    tb.out(t + 100, {"ACK"})
    tb.out(t + 200, {"FIN", "ACK"})
    tb.c_next += 1
    tb.inbound(t + 200 + tb.rtt_us, {"ACK"})


def _parse_http(raw: bytes):
    head, _, body = raw.partition(b"\r\n\r\n")
    lines = head.decode("latin-1").split("\r\n")
    status = int(lines[0].split()[1])
    headers = tuple((k.strip(), v.strip()) for k, _, v in (ln.partition(":") for ln in lines[1:]))
    return status, headers, body


def _fetch_once(scenario, url, client_kind, channel, hop):
    parts = urlsplit(url)
    host = url_host(url)
    port = parts.port or (443 if parts.scheme == "https" else 80)
    path = parts.path or "/"
    if parts.query:
        path += "?" + parts.query
    request_headers = (("Host", host), ("User-Agent", "censorscope/0.1"), ("Accept", "*/*"), ("Connection", "close"))
    request_line = f"GET {path} HTTP/1.1"
    request = (request_line + "\r\n" + "".join(f"{k}: {v}\r\n" for k, v in request_headers) + "\r\n").encode()
    tb = _TraceBuilder(scenario, host, port, f"http:{channel}:{hop}:{url}")
    no_response = HttpObservation(request_line, request_headers)

    blocker = _ip_blocked(scenario, host, channel)
    if blocker is not None:
        _blocked_syn(tb, blocker)
        return no_response, tb.trace(), None
    srv = scenario.server(host)
    if isinstance(srv, Dead):
        tb.syn_unanswered()
        return no_response, tb.trace(), None

    t = tb.handshake()
    t_req = t + 100
    # On https only the SNI host is visible to on-path boxes.
    cleartext = request if parts.scheme == "http" else host.encode()
    # The simulator carries plaintext bytes in https traces as a stand-in for ciphertext.
    tb.out(t_req, {"PSH", "ACK"}, request)
    tb.c_next += len(request)

    for rst in scenario.elements(RstInjector, channel):
        if rst.triggers(host, cleartext):
            t_rst = t_req + rst.latency_ms * 1000
            tb.inbound(t_rst, {"RST", "ACK"}, ttl=tb.ttl + rst.ttl_offset, ipid=_stable_int(scenario.seed, "rstipid", host) % 65536)
            # The real server's ACK still arrives after the connection was torn down.
            t_late = max(t_req + tb.rtt_us, t_rst + 1)
            tb.inbound(t_late, {"ACK"})
            tb.out(t_late + 100, {"RST"})
            return no_response, tb.trace(), None

    status, headers, payload, srv = _server_response(scenario, host, client_kind, channel, url)
    if parts.scheme == "http":
        for bp in scenario.elements(BlockpageProxy, channel):
            if domain_matches(host, bp.match_domains):
                payload = bp.page_body.encode("utf-8")
                status = bp.status
                headers = [("Content-Type", "text/html"), ("Content-Length", str(len(payload))), ("Connection", "close")]
                srv = Honest()
                break
        for tp in scenario.elements(TransparentProxy, channel):
            if domain_matches(host, tp.match_domains):
                headers = headers + [("Via", f"1.1 {tp.fingerprint}")]
    raw = _response_bytes(status, headers, payload)
    _send_response(tb, t_req, raw, srv)
    status, resp_headers, body = _parse_http(raw)
    obs = HttpObservation(request_line, request_headers, (), status, resp_headers, body, len(body))
    return obs, tb.trace(), obs.header("Location")


def sim_fetch_http(
    scenario: SimScenario, url: str, client_kind: str = "vpn", follow_redirects: bool = True, channel: str = "direct"
) -> tuple[HttpObservation, PacketTrace]:
    """GET ``url`` through the scenario, returning the observation and the trace of the last hop."""
    chain: list[str] = []
    current = url
    for hop in range(MAX_REDIRECTS + 1):
        obs, trace, location = _fetch_once(scenario, current, client_kind, channel, hop)
        if not (follow_redirects and location and obs.status in REDIRECT_STATUSES) or hop == MAX_REDIRECTS:
            break
        current = urljoin(current, location)
        chain.append(current)
    if chain:
        obs = HttpObservation(
            obs.request_line, obs.request_headers, tuple(chain), obs.status, obs.response_headers, obs.body, obs.body_len
        )
    return obs, trace


def _request_host(raw: bytes) -> str:
    _, headers = fingerprints._split_request(raw)
    for name, value in headers:
        if name.lower() == b"host":
            return value.decode("latin-1").strip().lower()
    return ""


def sim_probe_proxy(scenario: SimScenario, malformed_request: bytes, channel: str = "direct") -> HttpObservation:
    """Send raw request bytes to the echo helper; on-path proxies may rewrite them."""
    data = malformed_request
    host = _request_host(malformed_request)
    for tp in scenario.elements(TransparentProxy, channel):
        if host and domain_matches(host, tp.match_domains):
            data = fingerprints.PROXY_TRANSFORMS[tp.fingerprint](data)
    first_line = malformed_request.replace(b"\r\n", b"\n").split(b"\n", 1)[0].decode("latin-1")
    return HttpObservation(
        first_line, (), (), 200,
        (("Content-Type", "application/octet-stream"), ("Content-Length", str(len(data)))),
        data, len(data),
    )


# ---------------------------------------------------------------------------
# TLS and connectivity


def _honest_chain(scenario: SimScenario, host: str) -> tuple:
    e = scenario.epoch
    leaf = CertSummary(f"CN={host}", "CN=Sim Issuing CA 1", e - timedelta(days=90), e + timedelta(days=275), False, True)
    inter = CertSummary("CN=Sim Issuing CA 1", "CN=Sim Root CA", e - timedelta(days=900), e + timedelta(days=2000), False, True)
    return (leaf, inter)


def _mitm_chain(scenario: SimScenario, host: str, kind: str) -> tuple:
    e = scenario.epoch
    if kind == "self-signed":
        return (CertSummary(f"CN={host}", f"CN={host}", e - timedelta(days=10), e + timedelta(days=355), True, False),)
    if kind == "untrusted-issuer":
        leaf = CertSummary(f"CN={host}", "CN=Interception CA", e - timedelta(days=10), e + timedelta(days=355), False, False)
        ca = CertSummary("CN=Interception CA", "CN=Interception CA", e - timedelta(days=700), e + timedelta(days=3000), True, False)
        return (leaf, ca)
    leaf, inter = _honest_chain(scenario, host)
    expired = CertSummary(leaf.subject, leaf.issuer, e - timedelta(days=400), e - timedelta(days=30), False, True)
    return (expired, inter)


def sim_tls(scenario: SimScenario, host: str, channel: str = "direct") -> TlsObservation:
    host = host.lower()
    if isinstance(scenario.server(host), Dead) or _ip_blocked(scenario, host, channel):
        return TlsObservation((), handshake_failed=True)
    for mitm in scenario.elements(TlsMitm, channel):
        if domain_matches(host, mitm.match_domains):
            return TlsObservation(_mitm_chain(scenario, host, mitm.cert))
    return TlsObservation(_honest_chain(scenario, host))


def sim_tcp_connect(scenario: SimScenario, host: str, port: int = 80, via: str = "direct") -> tuple[bool, PacketTrace]:
    """Open and close a TCP connection. ``via='control'`` bypasses all censors."""
    host = host.lower()
    tb = _TraceBuilder(scenario, host, port, f"connect:{via}")
    blocker = _ip_blocked(scenario, host, via)
    if blocker is not None:
        _blocked_syn(tb, blocker)
        return False, tb.trace()
    if isinstance(scenario.server(host), Dead):
        tb.syn_unanswered()
        return False, tb.trace()
    t = tb.handshake()
    tb.out(t + 100, {"FIN", "ACK"})
    tb.c_next += 1
    tb.inbound(t + 100 + tb.rtt_us, {"FIN", "ACK"})
    tb.s_next += 1
    tb.out(t + 200 + tb.rtt_us, {"ACK"})
    return True, tb.trace()


def sim_mimic(scenario: SimScenario, proto: MimicProtocol, channel: str = "direct") -> Optional[bytes]:
    """Run a circumvention handshake mimic against its bridge; return the reply or None."""
    host = proto.bridge_host
    if _ip_blocked(scenario, host, channel):
        return None
    for rst in scenario.elements(RstInjector, channel):
        if rst.triggers(host, proto.client_hello):
            return None
    return reply_for(proto.name, proto.client_hello)


# ---------------------------------------------------------------------------
# Scenario files

_ELEMENTS = {
    "dns_injector": DnsInjector,
    "rst_injector": RstInjector,
    "blockpage_proxy": BlockpageProxy,
    "transparent_proxy": TransparentProxy,
    "tls_mitm": TlsMitm,
    "ip_blocker": IpBlocker,
}
_SERVERS = {
    "honest": Honest,
    "dead": Dead,
    "vpn_blocker": VpnBlocker,
    "quirky_load_balancer": QuirkyLoadBalancer,
    "chinese_quirk": ChineseQuirk,
}
_ELEMENT_NAMES = {v: k for k, v in _ELEMENTS.items()}
_SERVER_NAMES = {v: k for k, v in _SERVERS.items()}


def _build(table: dict, spec: dict, what: str):
    spec = dict(spec)
    kind = spec.pop("type", None)
    if kind not in table:
        raise ValidationError(f"unknown {what} type {kind!r}; expected one of {sorted(table)}")
    for k, v in spec.items():
        if isinstance(v, list):
            spec[k] = tuple(v)
    try:
        return table[kind](**spec)
    except TypeError as exc:
        raise ValidationError(f"bad {what} {kind!r}: {exc}") from exc


def scenario_from_dict(d: dict) -> SimScenario:
    servers, paths = {}, {}
    for host, spec in d.get("servers", {}).items():
        spec = dict(spec)
        latency = spec.pop("latency_ms", None)
        hops = spec.pop("hops", None)
        servers[host] = _build(_SERVERS, spec, "server")
        if latency is not None or hops is not None:
            paths[host] = PathProfile(latency if latency is not None else 40, hops if hops is not None else 12)
    return SimScenario(
        seed=int(d.get("seed", 0)),
        servers=servers,
        resolvers={k: tuple(v) for k, v in d.get("resolvers", {}).items()},
        path_elements=tuple(_build(_ELEMENTS, e, "path element") for e in d.get("path_elements", [])),
        paths=paths,
        dns_latency_ms={ResolverKind(k): int(v) for k, v in d.get("dns_latency_ms", {}).items()},
        unresponsive_resolvers=frozenset(d.get("unresponsive_resolvers", [])),
        epoch=parse_ts(d["epoch"]) if "epoch" in d else DEFAULT_EPOCH,
        jitter_ms=int(d.get("jitter_ms", 0)),
    )


def _plain(obj) -> dict:
    out = {}
    for k, v in obj.__dict__.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def scenario_to_dict(s: SimScenario) -> dict:
    servers = {}
    for host, srv in sorted(s.servers.items()):
        entry = {"type": _SERVER_NAMES[type(srv)], **_plain(srv)}
        if host in s.paths:
            entry.update(latency_ms=s.paths[host].latency_ms, hops=s.paths[host].hops)
        servers[host] = entry
    return {
        "seed": s.seed,
        "epoch": s.epoch.strftime("%Y-%m-%dT%H:%M:%SZ"),
        "jitter_ms": s.jitter_ms,
        "resolvers": {k: list(v) for k, v in sorted(s.resolvers.items())},
        "dns_latency_ms": {ResolverKind(k).value: v for k, v in s.dns_latency_ms.items()},
        "unresponsive_resolvers": sorted(r.value for r in s.unresponsive_resolvers),
        "servers": servers,
        "path_elements": [{"type": _ELEMENT_NAMES[type(e)], **_plain(e)} for e in s.path_elements],
    }


def load_scenario(path) -> SimScenario:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))
