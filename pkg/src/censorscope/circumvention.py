"""Byte-level mimics of circumvention protocol handshakes.

Each mimic sends a fixed opening flight that looks like the real protocol on
the wire and expects a deterministic reply from a cooperating bridge. No real
tool is launched.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass


def _stream(label: str, n: int) -> bytes:
    out = b""
    counter = 0
    while len(out) < n:
        out += hashlib.sha256(f"{label}:{counter}".encode()).digest()
        counter += 1
    return out[:n]


@dataclass(frozen=True)
class MimicProtocol:
    name: str
    bridge_host: str
    port: int
    client_hello: bytes

    def expected_reply(self) -> bytes:
        return reply_for(self.name, self.client_hello)


def reply_for(name: str, client_hello: bytes) -> bytes:
    return hashlib.sha256(b"bridge-reply|" + name.encode() + b"|" + client_hello).digest()


def _proto(name: str, port: int, hello: bytes) -> MimicProtocol:
    return MimicProtocol(name, f"bridge-{name}.mimic.test", port, hello)


MIMICS: dict[str, MimicProtocol] = {
    p.name: p
    for p in (
        # Randomised-looking transports: uniformly high-entropy first flight.
        _proto("obfs2", 4432, _stream("obfs2", 64)),
        _proto("obfs3", 4433, _stream("obfs3", 192)),
        _proto("obfs4", 4434, _stream("obfs4", 141)),
        _proto("scramblesuit", 4435, _stream("scramblesuit", 128)),
        # Domain-fronted HTTP carrier.
        _proto(
            "meek", 80,
            b"POST / HTTP/1.1\r\nHost: meek-front.mimic.test\r\nX-Session-Id: cs-mimic-01\r\n"
            b"Content-Length: 0\r\n\r\n",
        ),
        # Format-transforming encryption shaped like a plain HTTP GET.
        _proto("fteproxy", 8080, b"GET /" + _stream("fte", 24).hex().encode() + b" HTTP/1.1\r\n\r\n"),
        _proto("psiphon", 22, b"SSH-2.0-OpenSSH_6.6\r\n" + _stream("psiphon", 48)),
        _proto("lantern", 443, b"\x16\x03\x01\x00\xc4\x01\x00\x00\xc0\x03\x03" + _stream("lantern", 32)),
        # OpenVPN over TCP: 2-byte length, P_CONTROL_HARD_RESET_CLIENT_V2, session id, packet id.
        _proto("openvpn", 1194, b"\x00\x0e\x38" + _stream("openvpn", 8) + b"\x00\x00\x00\x00\x00"),
    )
}


def get_mimic(name: str) -> MimicProtocol:
    try:
        return MIMICS[name]
    except KeyError:
        raise KeyError(f"unknown circumvention protocol {name!r}; known: {sorted(MIMICS)}") from None
