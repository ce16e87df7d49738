"""HTTP front end for :class:`ControllerStore` and a matching client.

Endpoints (JSON bodies unless noted; record payloads are line-delimited)::

    POST /v1/vantages                 register a vantage point -> {"token"}
    GET  /v1/vantages                 list vantage points (JSON lines)
    GET  /v1/vantages/<id>            one vantage point
    PUT  /v1/target-lists/<name>      CSV test list body -> {"count"}
    POST /v1/experiments              experiment spec -> {"assignments": n}
    GET  /v1/assignments?now=<ts>     due assignments for the bearer token (JSON lines)
    POST /v1/assignments/ack          {"ids": [...]} -> {"acked": n}
    POST /v1/reports                  report records (JSON lines) -> submit ack
    GET  /v1/reports?country=&vantage=&since=&until=&target=   records (JSON lines)

Agents authenticate with ``Authorization: Bearer <token>``. Agents always
pull; the controller never connects out to a vantage point.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from datetime import datetime
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, quote, urlencode, urlsplit

from ..model import (
    ReportParseError,
    ReportRecord,
    ValidationError,
    VantagePoint,
    format_ts,
    parse_ts,
    read_record,
    serialize_report,
    vantage_from_dict,
    vantage_to_dict,
)
from .store import Assignment, ControllerError, ControllerStore, ExperimentSpec, SubmitAck

log = logging.getLogger(__name__)
NDJSON = "application/x-ndjson"


class _Handler(BaseHTTPRequestHandler):
    store: ControllerStore
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route through logging instead of stderr
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: bytes, ctype: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, obj) -> None:
        self._send(status, json.dumps(obj, sort_keys=True).encode())

    def _lines(self, lines) -> None:
        self._send(200, "".join(line + "\n" for line in lines).encode("utf-8"), NDJSON)

    def _body(self) -> bytes:
        n = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(n) if n else b""

    def _token(self) -> str:
        auth = self.headers.get("Authorization", "")
        return auth[7:].strip() if auth.lower().startswith("bearer ") else ""

    def _dispatch(self, method: str) -> None:
        parts = urlsplit(self.path)
        path = [p for p in parts.path.split("/") if p]
        query = {k: v[0] for k, v in parse_qs(parts.query).items()}
        try:
            self._route(method, path, query)
        except ControllerError as exc:
            self._json(exc.status, {"error": str(exc)})
        except (ValidationError, ReportParseError, KeyError, ValueError) as exc:
            self._json(400, {"error": str(exc)})

    def _route(self, method, path, query) -> None:
        s = self.store
        if path[:1] != ["v1"] or len(path) < 2:
            self._json(404, {"error": "not found"})
            return
        res, rest = path[1], path[2:]
        if res == "vantages" and method == "POST" and not rest:
            vp = vantage_from_dict(json.loads(self._body()))
            self._json(201, {"token": s.register_vantage(vp)})
        elif res == "vantages" and method == "GET" and not rest:
            self._lines(json.dumps(vantage_to_dict(v), sort_keys=True) for v in s.list_vantages())
        elif res == "vantages" and method == "GET" and len(rest) == 1:
            self._json(200, vantage_to_dict(s.get_vantage(rest[0])))
        elif res == "target-lists" and method == "PUT" and len(rest) == 1:
            self._json(200, {"count": s.add_target_list_csv(rest[0], self._body().decode("utf-8"))})
        elif res == "target-lists" and method == "GET" and len(rest) == 1:
            self._send(200, s.export_target_list(rest[0]).encode("utf-8"), "text/csv")
        elif res == "experiments" and method == "POST" and not rest:
            spec = ExperimentSpec.from_dict(json.loads(self._body()))
            self._json(200, {"assignments": len(s.schedule(spec))})
        elif res == "assignments" and method == "GET" and not rest:
            now = parse_ts(query["now"]) if "now" in query else None
            self._lines(json.dumps(a.to_dict(), sort_keys=True) for a in s.poll(self._token(), now))
        elif res == "assignments" and method == "POST" and rest == ["ack"]:
            ids = json.loads(self._body())["ids"]
            self._json(200, {"acked": s.ack(self._token(), ids)})
        elif res == "reports" and method == "POST" and not rest:
            lines = self._body().decode("utf-8").splitlines()
            self._json(200, s.submit_report(self._token(), lines).to_dict())
        elif res == "reports" and method == "GET" and not rest:
            recs = s.query_reports(
                country=query.get("country"),
                vantage=query.get("vantage"),
                since=parse_ts(query["since"]) if "since" in query else None,
                until=parse_ts(query["until"]) if "until" in query else None,
                target=query.get("target"),
            )
            self._lines(serialize_report(r) for r in recs)
        else:
            self._json(404, {"error": "not found"})

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")


def make_server(store: ControllerStore, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"store": store})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


class ServerThread:
    """Run a controller server in a background thread (tests, embedding)."""

    def __init__(self, store: ControllerStore, host: str = "127.0.0.1", port: int = 0) -> None:
        self.server = make_server(store, host, port)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "ServerThread":
        self.thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.server.shutdown()
        self.server.server_close()


class ControllerClientError(Exception):
    def __init__(self, status: int, message: str) -> None:
        super().__init__(f"HTTP {status}: {message}")
        self.status = status


class ControllerClient:
    def __init__(self, base_url: str, token: Optional[str] = None, timeout: float = 10.0) -> None:
        self.base = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout

    def _request(self, method: str, path: str, body: Optional[bytes] = None, ctype: str = "application/json") -> bytes:
        req = urllib.request.Request(self.base + path, data=body, method=method)
        if body is not None:
            req.add_header("Content-Type", ctype)
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            payload = exc.read()
            try:
                message = json.loads(payload)["error"]
            except (ValueError, KeyError):
                message = payload.decode("utf-8", "replace")
            raise ControllerClientError(exc.code, message) from None

    def register(self, vp: VantagePoint) -> str:
        out = json.loads(self._request("POST", "/v1/vantages", json.dumps(vantage_to_dict(vp)).encode()))
        self.token = out["token"]
        return self.token

    def vantage(self, vantage_id: str) -> VantagePoint:
        return vantage_from_dict(json.loads(self._request("GET", f"/v1/vantages/{quote(vantage_id, safe='')}")))

    def vantages(self) -> list[VantagePoint]:
        raw = self._request("GET", "/v1/vantages").decode("utf-8")
        return [vantage_from_dict(json.loads(line)) for line in raw.splitlines() if line]

    def put_target_list(self, name: str, csv_text: str) -> int:
        out = self._request("PUT", f"/v1/target-lists/{quote(name, safe='')}", csv_text.encode("utf-8"), "text/csv")
        return json.loads(out)["count"]

    def schedule(self, spec: ExperimentSpec) -> int:
        return json.loads(self._request("POST", "/v1/experiments", json.dumps(spec.to_dict()).encode()))["assignments"]

    def poll(self, now: Optional[datetime] = None) -> list[Assignment]:
        q = "?" + urlencode({"now": format_ts(now)}) if now is not None else ""
        raw = self._request("GET", "/v1/assignments" + q).decode("utf-8")
        return [Assignment.from_dict(json.loads(line)) for line in raw.splitlines() if line]

    def ack(self, ids) -> int:
        return json.loads(self._request("POST", "/v1/assignments/ack", json.dumps({"ids": list(ids)}).encode()))["acked"]

    def submit(self, records) -> SubmitAck:
        lines = [r if isinstance(r, str) else serialize_report(r) for r in records]
        out = json.loads(self._request("POST", "/v1/reports", "".join(l + "\n" for l in lines).encode("utf-8"), NDJSON))
        return SubmitAck(out["accepted"], out["stored"], out["duplicates"], [tuple(e) for e in out["errors"]])

    def query(self, **filters) -> list[ReportRecord]:
        params = {}
        for k, v in filters.items():
            if v is None:
                continue
            params[k] = format_ts(v) if isinstance(v, datetime) else v
        q = "?" + urlencode(params) if params else ""
        raw = self._request("GET", "/v1/reports" + q).decode("utf-8")
        return [read_record(line) for line in raw.splitlines() if line]
