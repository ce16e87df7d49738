"""Transports the probe agent measures through.

``SimTransport`` drives the simulator; ``RecordingTransport`` wraps any
transport and captures its answers; ``RecordedTransport`` replays such a
capture so tests can run from fixtures without a scenario.
"""

from __future__ import annotations

import base64
import json
import threading
from datetime import datetime
from typing import Optional, Protocol

from . import netsim
from .circumvention import MimicProtocol
from .model import (
    DnsObservation,
    HttpObservation,
    PacketTrace,
    ResolverKind,
    TlsObservation,
    _dns_from_dict,
    _dns_to_dict,
    format_ts,
    http_from_dict,
    http_to_dict,
    parse_ts,
    tls_from_dict,
    tls_to_dict,
    trace_from_dict,
    trace_to_dict,
)


class Transport(Protocol):
    def now(self) -> datetime: ...
    def resolve(self, qname: str, resolver: ResolverKind) -> DnsObservation: ...
    def fetch_http(self, url: str, follow_redirects: bool = True) -> tuple[HttpObservation, PacketTrace]: ...
    def probe_proxy(self, request: bytes) -> HttpObservation: ...
    def tls(self, host: str) -> TlsObservation: ...
    def tcp_connect(self, host: str, port: int) -> tuple[bool, PacketTrace]: ...
    def mimic(self, proto: MimicProtocol) -> Optional[bytes]: ...


class SimTransport:
    """View of a scenario from one client; ``channel='control'`` sees no censors."""

    def __init__(self, scenario: netsim.SimScenario, client_kind: str = "vpn", channel: str = "direct") -> None:
        self.scenario = scenario
        self.client_kind = client_kind
        self.channel = channel

    def control(self) -> "SimTransport":
        return SimTransport(self.scenario, netsim.CONTROL_CLIENT, "control")

    def now(self) -> datetime:
        return self.scenario.epoch

    def resolve(self, qname, resolver):
        return netsim.sim_resolve(self.scenario, qname, resolver, self.channel)

    def fetch_http(self, url, follow_redirects=True):
        return netsim.sim_fetch_http(self.scenario, url, self.client_kind, follow_redirects, self.channel)

    def probe_proxy(self, request):
        return netsim.sim_probe_proxy(self.scenario, request, self.channel)

    def tls(self, host):
        return netsim.sim_tls(self.scenario, host, self.channel)

    def tcp_connect(self, host, port):
        return netsim.sim_tcp_connect(self.scenario, host, port, self.channel)

    def mimic(self, proto):
        return netsim.sim_mimic(self.scenario, proto, self.channel)


def _b64(b: Optional[bytes]):
    return None if b is None else base64.b64encode(b).decode("ascii")


def _unb64(s):
    return None if s is None else base64.b64decode(s)


_CODECS = {
    "now": (format_ts, parse_ts),
    "resolve": (_dns_to_dict, _dns_from_dict),
    "fetch_http": (
        lambda r: [http_to_dict(r[0]), trace_to_dict(r[1])],
        lambda v: (http_from_dict(v[0]), trace_from_dict(v[1])),
    ),
    "probe_proxy": (http_to_dict, http_from_dict),
    "tls": (tls_to_dict, tls_from_dict),
    "tcp_connect": (lambda r: [r[0], trace_to_dict(r[1])], lambda v: (v[0], trace_from_dict(v[1]))),
    "mimic": (_b64, _unb64),
}


def _key(op: str, args: tuple) -> str:
    norm = []
    for a in args:
        if isinstance(a, bytes):
            a = _b64(a)
        elif isinstance(a, MimicProtocol):
            a = a.name
        elif isinstance(a, ResolverKind):
            a = a.value
        norm.append(a)
    return json.dumps([op, norm], separators=(",", ":"))


class RecordingTransport:
    """Pass-through transport that remembers every answer for later replay."""

    def __init__(self, inner) -> None:
        self.inner = inner
        self._lock = threading.Lock()
        self.entries: dict[str, object] = {}

    def _call(self, op, *args):
        result = getattr(self.inner, op)(*args)
        encoded = _CODECS[op][0](result)
        with self._lock:
            self.entries[_key(op, args)] = encoded
        return result

    def now(self):
        return self._call("now")

    def resolve(self, qname, resolver):
        return self._call("resolve", qname, ResolverKind(resolver))

    def fetch_http(self, url, follow_redirects=True):
        return self._call("fetch_http", url, follow_redirects)

    def probe_proxy(self, request):
        return self._call("probe_proxy", request)

    def tls(self, host):
        return self._call("tls", host)

    def tcp_connect(self, host, port):
        return self._call("tcp_connect", host, port)

    def mimic(self, proto):
        return self._call("mimic", proto)

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(self.entries):
                op, args = json.loads(key)
                fh.write(json.dumps({"op": op, "args": args, "result": self.entries[key]}, sort_keys=True) + "\n")


class RecordedTransport:
    """Replays a fixture file written by :meth:`RecordingTransport.dump`.

    A call with no recorded answer raises ``TimeoutError``, which the agent
    records as a failed test.
    """

    def __init__(self, entries: dict[str, object]) -> None:
        self.entries = entries

    @classmethod
    def load(cls, path) -> "RecordedTransport":
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    entries[json.dumps([rec["op"], rec["args"]], separators=(",", ":"))] = rec["result"]
        return cls(entries)

    def _replay(self, op, *args):
        key = _key(op, args)
        if key not in self.entries:
            raise TimeoutError(f"no recorded answer for {op}{args!r}")
        return _CODECS[op][1](self.entries[key])

    def now(self):
        return self._replay("now")

    def resolve(self, qname, resolver):
        return self._replay("resolve", qname, ResolverKind(resolver))

    def fetch_http(self, url, follow_redirects=True):
        return self._replay("fetch_http", url, follow_redirects)

    def probe_proxy(self, request):
        return self._replay("probe_proxy", request)

    def tls(self, host):
        return self._replay("tls", host)

    def tcp_connect(self, host, port):
        return self._replay("tcp_connect", host, port)

    def mimic(self, proto):
        return self._replay("mimic", proto)
