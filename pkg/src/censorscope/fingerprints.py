"""Blockpage and proxy fingerprints.

The proxy transform table is shared by the simulator (which applies a
product's transform to intercepted requests) and the proxy detector (which
recognises a product by re-applying the transform to what it sent).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional

from .model import ValidationError

# Malformed request corpus. Each probe breaks HTTP grammar in one declared way;
# ``{host}`` is replaced by the target host.
MALFORMED_REQUESTS: dict[str, bytes] = {
    "header-case": b"GET / HTTP/1.1\r\nhOsT: {host}\r\naCCePT: */*\r\nuSeR-aGeNt: cs-probe\r\n\r\n",
    "bad-folding": b"GET / HTTP/1.1\r\nHost: {host}\r\nX-Folded: first\r\n  second\r\nAccept: */*\r\n\r\n",
    "tab-separator": b"GET / HTTP/1.1\r\nHost:\t{host}\r\nAccept:\t*/*\r\nUser-Agent:\tcs-probe\r\n\r\n",
    "bare-lf": b"GET / HTTP/1.1\nHost: {host}\nAccept: */*\nUser-Agent: cs-probe\n\n",
}


def malformed_request(name: str, host: str) -> bytes:
    return MALFORMED_REQUESTS[name].replace(b"{host}", host.encode("ascii"))


def _split_request(raw: bytes) -> tuple[bytes, list[tuple[bytes, bytes]]]:
    """Split a request into its request line and (name, value) headers.

    Obsolete folded lines are joined onto the previous header value.
    """
    text = raw.replace(b"\r\n", b"\n")
    head = text.split(b"\n\n", 1)[0]
    lines = head.split(b"\n")
    headers: list[tuple[bytes, bytes]] = []
    for line in lines[1:]:
        if line[:1] in (b" ", b"\t") and headers:
            name, value = headers[-1]
            headers[-1] = (name, value + b" " + line.strip())
            continue
        name, _, value = line.partition(b":")
        headers.append((name.strip(), value.strip()))
    return lines[0], headers


def _join(request_line: bytes, headers: list[tuple[bytes, bytes]]) -> bytes:
    out = [request_line]
    out.extend(name + b": " + value for name, value in headers)
    return b"\r\n".join(out) + b"\r\n\r\n"


def _title(name: bytes) -> bytes:
    return b"-".join(part[:1].upper() + part[1:].lower() for part in name.split(b"-"))


def squid_transform(raw: bytes) -> bytes:
    line, headers = _split_request(raw)
    headers = [(_title(n), v) for n, v in headers]
    headers += [(b"Via", b"1.1 squid-cache (squid/3.5)"), (b"X-Forwarded-For", b"10.0.0.2")]
    return _join(line, headers)


def bluecoat_transform(raw: bytes) -> bytes:
    line, headers = _split_request(raw)
    headers = [(n.lower(), v) for n, v in headers]
    headers.append((b"x-bluecoat-via", b"4c2a0e0fb2a8d1c8"))
    return _join(line, headers)


def netsweeper_transform(raw: bytes) -> bytes:
    line, headers = _split_request(raw)
    headers = sorted(headers, key=lambda h: h[0].lower())
    headers.append((b"X-Netsweeper-Client", b"10.0.0.2"))
    return _join(line, headers)


def fortigate_transform(raw: bytes) -> bytes:
    text = raw.replace(b"\r\n", b"\n")
    head = text.split(b"\n\n", 1)[0].split(b"\n")
    # Drops folded continuation lines instead of joining them.
    kept = [head[0]] + [ln for ln in head[1:] if ln[:1] not in (b" ", b"\t")]
    line, headers = _split_request(b"\n".join(kept) + b"\n\n")
    headers = [(n.upper(), v) for n, v in headers]
    headers.append((b"X-FORTIGATE-SESSION", b"fgt-0001"))
    return _join(line, headers)


PROXY_TRANSFORMS: dict[str, Callable[[bytes], bytes]] = {
    "squid": squid_transform,
    "bluecoat": bluecoat_transform,
    "netsweeper": netsweeper_transform,
    "fortigate": fortigate_transform,
}


@dataclass(frozen=True)
class BlockpageFingerprint:
    name: str
    pattern: re.Pattern
    country: Optional[str] = None
    header_pattern: Optional[re.Pattern] = None

    def matches(self, body: str, headers: str) -> bool:
        if not self.pattern.search(body):
            return False
        return self.header_pattern is None or bool(self.header_pattern.search(headers))


@dataclass(frozen=True)
class ProxyFingerprint:
    name: str
    transform: str

    def apply(self, raw: bytes) -> bytes:
        return PROXY_TRANSFORMS[self.transform](raw)


@dataclass(frozen=True)
class FingerprintDb:
    """Ordered fingerprint tables; earlier entries win."""

    blockpages: tuple = ()
    proxies: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "blockpages", tuple(self.blockpages))
        object.__setattr__(self, "proxies", tuple(self.proxies))
        names = [f.name for f in self.blockpages] + [p.name for p in self.proxies]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValidationError(f"duplicate fingerprint names: {dupes}")
        for p in self.proxies:
            if p.transform not in PROXY_TRANSFORMS:
                raise ValidationError(f"unknown proxy transform {p.transform!r}")


def _compile(pattern: str, where: str) -> re.Pattern:
    try:
        return re.compile(pattern, re.DOTALL)
    except re.error as exc:
        raise ValidationError(f"{where}: bad regex {pattern!r}: {exc}") from exc


def parse_fingerprints(text: str) -> FingerprintDb:
    """Parse a line-delimited fingerprint file.

    Blockpage records look like ``{"name", "pattern", "country"?,
    "header_pattern"?}``; proxy records add ``"type": "proxy"`` and name a
    ``transform`` from :data:`PROXY_TRANSFORMS`.
    """
    blockpages, proxies = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            rec = json.loads(line)
            kind = rec.get("type", "blockpage")
            if kind == "proxy":
                proxies.append(ProxyFingerprint(rec["name"], rec["transform"]))
            elif kind == "blockpage":
                header = rec.get("header_pattern")
                blockpages.append(
                    BlockpageFingerprint(
                        rec["name"],
                        _compile(rec["pattern"], f"line {lineno}"),
                        rec.get("country"),
                        _compile(header, f"line {lineno}") if header else None,
                    )
                )
            else:
                raise ValidationError(f"line {lineno}: unknown record type {kind!r}")
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"line {lineno}: malformed fingerprint record: {exc}") from exc
    return FingerprintDb(tuple(blockpages), tuple(proxies))


def load_fingerprints(path=None) -> FingerprintDb:
    if path is None:
        text = resources.files("censorscope.data").joinpath("fingerprints.jsonl").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_fingerprints(text)
