import random
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from censorscope import netsim
from censorscope.fingerprints import load_fingerprints
from censorscope.model import (
    Anomaly,
    AnomalyKind,
    Outcome,
    TestTarget,
    VantagePoint,
    Verdict,
)

FIXTURES = Path(__file__).parent / "fixtures"
EPOCH = datetime(2016, 3, 1, tzinfo=timezone.utc)


@pytest.fixture(scope="session")
def db():
    return load_fingerprints()


def honest_scenario(hosts, **kw):
    return netsim.SimScenario(seed=kw.pop("seed", 7), servers={h: netsim.Honest() for h in hosts}, **kw)


def censor_cases():
    """One scenario per censor element, each aimed at a matching target."""
    iran_page = '<html><iframe src="http://10.10.34.34?type=Invalid Site&policy=MainPolicy"></iframe></html>'
    return {
        "DnsInjector": (
            netsim.DnsInjector(("target.example",), ("10.10.34.35",)),
            "http://target.example/",
            {AnomalyKind.DNS_INJECTION},
        ),
        "RstInjector": (
            netsim.RstInjector(("target.example",), ttl_offset=-3),
            "http://target.example/",
            {AnomalyKind.TCP_RST, AnomalyKind.TCP_TTL},
        ),
        "BlockpageProxy": (
            netsim.BlockpageProxy(("target.example",), iran_page),
            "http://target.example/",
            {AnomalyKind.HTTP_BLOCKPAGE},
        ),
        "TransparentProxy": (
            netsim.TransparentProxy("squid", ("target.example",)),
            "http://target.example/",
            {AnomalyKind.HTTP_PROXY},
        ),
        "TlsMitm": (
            netsim.TlsMitm(("target.example",), "untrusted-issuer"),
            "https://target.example/",
            {AnomalyKind.TLS_MITM},
        ),
        "IpBlocker": (
            netsim.IpBlocker(("target.example",), "drop-syn"),
            "http://target.example/",
            {AnomalyKind.TCP_CONNECT_ASYMMETRY},
        ),
    }


def vp(i, country="IR", asn=None, kind="vpn"):
    return VantagePoint(f"vp{i}", country, asn if asn is not None else 1000 + i, kind)


def target(host, scheme="http"):
    return TestTarget(f"{scheme}://{host}/", "NEWS")


def make_verdict(vantage, host, outcome, methods=(), evidence_kinds=()):
    evidence = tuple(Anomaly(AnomalyKind(k), "synthetic", ("trace",)) for k in evidence_kinds)
    return Verdict(vantage, target(host), Outcome(outcome), frozenset(methods), evidence)


KINDS = list(AnomalyKind)


def random_verdicts(rng: random.Random, n_vps=None, n_targets=None, n=None):
    """Random registry plus verdicts; used by the aggregation oracle checks."""
    countries = rng.sample(["IR", "SA", "CN", "IN", "TR", "RU", "US", "PK"], rng.randint(1, 6))
    n_vps = n_vps or rng.randint(1, 25)
    kinds = ["vpn", "device", "volunteer"]
    registry = {}
    for i in range(n_vps):
        v = VantagePoint(f"vp{i:03d}", rng.choice(countries), rng.randint(1, 12), rng.choice(kinds))
        registry[v.id] = v
    n_targets = n_targets or rng.randint(1, 60)
    hosts = [f"site{j:03d}.example" for j in range(n_targets)]
    n = n if n is not None else rng.randint(0, 1000)
    verdicts = []
    for _ in range(n):
        outcome = rng.choice(["ok", "censored", "censored", "inconclusive", "dead_site"])
        methods = set(rng.sample(KINDS, rng.randint(1, 3))) if outcome == "censored" else set()
        evidence = set(methods)
        if rng.random() < 0.2:
            evidence.add(AnomalyKind.TCP_RST)
        vid = rng.choice(list(registry))
        if rng.random() < 0.05:
            vid = "unregistered"
        verdicts.append(make_verdict(vid, rng.choice(hosts), outcome, methods, sorted(evidence, key=lambda k: k.value)))
    return registry, verdicts


def random_times(rng: random.Random, n, days=10):
    return [EPOCH + timedelta(seconds=rng.randint(0, days * 86400 - 1)) for _ in range(n)]
