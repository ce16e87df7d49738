"""Acceptance criteria, one test each.

Every test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (visible even
under output capture) and fails normally when the criterion is not met.
"""

import csv
import json
import os
import random
import subprocess
import sys
import time
from contextlib import contextmanager
from datetime import timedelta
from pathlib import Path

from censorscope import aggregate, detectors, netsim
from censorscope.agent import ProbeAgent
from censorscope.controller import ControllerStore, ExperimentSpec, Selector
from censorscope.model import (
    Anomaly,
    AnomalyKind,
    DnsObservation,
    DnsResponse,
    HttpObservation,
    Mode,
    Outcome,
    RawMeasurement,
    TestTarget,
    VantagePoint,
    Verdict,
    deserialize_verdict,
    read_lines,
    serialize_report,
    vantage_from_dict,
)
from censorscope.transport import SimTransport

import oracles
from conftest import EPOCH, FIXTURES, censor_cases, honest_scenario, random_times, random_verdicts

REPO = Path(__file__).resolve().parents[1]


@contextmanager
def criterion(n, title, capsys):
    ok = False
    detail = ""
    try:
        yield
        ok = True
    except AssertionError as exc:
        detail = f" ({str(exc).splitlines()[0][:120]})" if str(exc) else ""
        raise
    finally:
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {title}{detail}")


# 1 ------------------------------------------------------------------------------


def test_c01_detector_completeness(capsys, db):
    with criterion(1, "detector completeness matrix, 6/6 censor elements, < 10 s", capsys):
        start = time.perf_counter()
        passed = []
        for name, (element, url, expected) in sorted(censor_cases().items()):
            results = []
            for _ in range(2):  # determinism: repeat and compare
                sc = honest_scenario(["target.example"], seed=42, path_elements=(element,))
                tr = SimTransport(sc)
                vp = VantagePoint("vp-accept", "IR", 197207)
                (rec,) = ProbeAgent(vp, tr, tr.control(), Mode.CLASSIFY, db).run([TestTarget(url, "POLR")], EPOCH)
                results.append(rec.verdict)
            v = results[0]
            assert results[0] == results[1], f"{name}: non-deterministic verdict"
            assert v.outcome is Outcome.CENSORED, f"{name}: outcome {v.outcome.value}"
            assert expected <= v.methods, f"{name}: methods {sorted(k.value for k in v.methods)}"
            passed.append(name)
        elapsed = time.perf_counter() - start
        assert len(passed) == 6
        assert elapsed < 10.0, f"took {elapsed:.2f}s"


# 2 ------------------------------------------------------------------------------


def _benign_servers(rng):
    servers = {}
    for i in range(20):
        servers[f"honest{i:02d}.example"] = netsim.Honest(body=None if i % 2 else "<html>" + "x" * rng.randint(10, 5000) + "</html>")
    for i in range(12):
        servers[f"lb{i:02d}.example"] = netsim.QuirkyLoadBalancer(seq_gap=rng.randint(1, 100_000))
    for i in range(12):
        servers[f"cnquirk{i:02d}.example"] = netsim.ChineseQuirk()
    for i in range(10):
        servers[f"geo{i:02d}.example"] = netsim.VpnBlocker()
    servers["digikala.example"] = netsim.ChineseQuirk()
    servers["redir.example"] = netsim.Honest(redirect_to="http://honest00.example/")
    return servers


def test_c02_false_positive_suite(capsys, db):
    with criterion(2, "false-positive suite, 0 censored over >= 50 benign targets, digikala case", capsys):
        rng = random.Random(2)
        servers = _benign_servers(rng)
        sc = netsim.SimScenario(seed=99, servers=servers, jitter_ms=40)
        targets = [TestTarget(f"{'https' if i % 5 == 0 else 'http'}://{h}/", "COMM")
                   for i, h in enumerate(sorted(servers))]
        assert len(targets) >= 50
        tr = SimTransport(sc)
        recs = ProbeAgent(VantagePoint("vp-fp", "IR", 58224), tr, tr.control(), Mode.CLASSIFY, db).run(targets, EPOCH)
        censored = [r.measurement.target.url for r in recs if r.verdict.outcome is Outcome.CENSORED]
        assert censored == [], f"false positives: {censored}"
        digi = next(r.verdict for r in recs if r.measurement.target.host == "digikala.example")
        assert digi.outcome is Outcome.OK
        assert AnomalyKind.TCP_SEQ in {a.kind for a in digi.evidence}


# 3 ------------------------------------------------------------------------------


def _gap_fires(gap_us):
    obs = DnsObservation("a.example", "system-default", (DnsResponse(0, ("10.0.0.1",)), DnsResponse(gap_us, ("10.0.0.2",))))
    return detectors.detect_dns_anomaly(obs) is not None


def test_c03_two_second_rule(capsys):
    with criterion(3, "2-second DNS rule boundary and monotonicity (1000 pairs)", capsys):
        for ms in (1, 500, 1999):
            assert _gap_fires(ms * 1000), f"{ms}ms should fire"
        for ms in (2000, 2001, 10_000):
            assert not _gap_fires(ms * 1000), f"{ms}ms should not fire"
        rng = random.Random(3)
        for _ in range(1000):
            a, b = sorted((rng.randint(0, 20_000_000), rng.randint(0, 20_000_000)))
            if _gap_fires(b):
                assert _gap_fires(a), f"monotonicity broken at {a} < {b}"


# 4 ------------------------------------------------------------------------------

TABLE1 = [("battle.net", 1459), ("163.com", 1417), ("baidu.com", 1350), ("hao123.com", 1333),
          ("youth.cn", 918), ("uol.com.br", 842), ("alibaba.com", 748), ("yahoo.com", 700),
          ("directrev.com", 564), ("roblox.com", 415)]


def _rst_verdict(vid, host, censored):
    ev = (Anomaly(AnomalyKind.TCP_RST, "rst", ("trace.events[4]",)),)
    if censored:
        ev += (Anomaly(AnomalyKind.TCP_TTL, "ttl", ("trace.events[4]",)),)
        return Verdict(vid, TestTarget(f"http://{host}/", "X"), Outcome.CENSORED,
                       frozenset({AnomalyKind.TCP_RST, AnomalyKind.TCP_TTL}), ev)
    return Verdict(vid, TestTarget(f"http://{host}/", "X"), Outcome.OK, frozenset(), ev)


def test_c04_table1_reproduction(capsys):
    with criterion(4, "RST ranking reproduces the published per-site vantage-point counts", capsys):
        with open(FIXTURES / "table1_rst_counts.csv", newline="") as fh:
            rows = [(r["target"], int(r["vantage_points"])) for r in csv.DictReader(fh)]
        rng = random.Random(4)
        verdicts = []
        for host, n in rows:
            for i in range(n):
                verdicts.append(_rst_verdict(f"vp{i:05d}", host, rng.random() < 0.5))
            # repeat measurements from the same vantage points must not inflate counts
            for i in rng.sample(range(n), 50):
                verdicts.append(_rst_verdict(f"vp{i:05d}", host, False))
            # vantage points that saw the site without any RST
            for i in range(n, n + 30):
                verdicts.append(Verdict(f"vp{i:05d}", TestTarget(f"http://{host}/", "X"), Outcome.OK))
        for j in range(20):  # long tail below the top ten
            for i in range(rng.randint(1, 400)):
                verdicts.append(_rst_verdict(f"vp{i:05d}", f"tail{j:02d}.example", False))
        rng.shuffle(verdicts)
        top = aggregate.rst_ranking(verdicts)[:10]
        assert top == TABLE1, f"got {top}"
        assert rows == TABLE1


# 5 ------------------------------------------------------------------------------


def test_c05_dead_site_filtering(capsys):
    with criterion(5, "dead-site filtering on the 20-target fixture matches the oracle", capsys):
        pairs = [deserialize_verdict(l) for l in read_lines(FIXTURES / "dead_sites_verdicts.jsonl")]
        verdicts = [v for v, _ in pairs]
        registry = {vp.id: vp for _, vp in pairs}
        assert len({v.target.url for v in verdicts}) == 20
        split = aggregate.dead_site_filter(verdicts)
        kept, discarded = oracles.dead_sites(verdicts)
        assert set(split.kept) == kept and set(split.discarded) == discarded
        assert split.discarded == {f"http://gone{i}.example/" for i in (1, 2, 3)}
        # discarded targets contribute nothing to any statistic
        live = [v for v in verdicts if v.target.url not in discarded]
        assert aggregate.least_free_ranking(verdicts, registry) == aggregate.least_free_ranking(live, registry, drop_dead=False)
        for f in aggregate.least_free_ranking(verdicts, registry):
            assert f.tested == len({v.target.url for v in live if registry[v.vantage].country == f.country})
        assert aggregate.rst_ranking(verdicts) == aggregate.rst_ranking(live, drop_dead=False)
        assert aggregate.centralization_by_country(verdicts, registry) == \
            aggregate.centralization_by_country(live, registry, drop_dead=False)


# 6 ------------------------------------------------------------------------------


def test_c06_aggregation_oracle_equivalence(capsys):
    with criterion(6, "aggregations equal brute-force recomputation on 100 random instances", capsys):
        for seed in range(100):
            rng = random.Random(6000 + seed)
            registry, verdicts = random_verdicts(rng)
            assert len(verdicts) <= 1000
            live = aggregate.without_dead_sites(verdicts)
            countries = sorted({vp.country for vp in registry.values()})
            for c in countries:
                got = aggregate.censorship_fraction(live, c, registry)
                tested, censored, counts, total = oracles.fraction(live, c, registry)
                assert (got.tested, got.censored, dict(got.method_counts)) == (tested, censored, counts), f"seed {seed} {c}"
                assert abs(got.total - total) <= 1e-9
                for k, n in counts.items():
                    assert abs(got.methods[k] - n / censored) <= 1e-9
                country_vs = [v for v in live if v.vantage in registry and registry[v.vantage].country == c]
                share, method, label = oracles.centralization(country_vs)
                cz = aggregate.centralization_score(country_vs)
                assert (cz.dominant_method, cz.label) == (method, label), f"seed {seed} {c}"
                assert (cz.share is None and share is None) or abs(cz.share - share) <= 1e-9
            ranking = [(f.country, f.total) for f in aggregate.least_free_ranking(verdicts, registry)]
            want = oracles.ranking(verdicts, registry)
            assert [c for c, _ in ranking] == [c for c, _ in want], f"seed {seed}"
            assert all(abs(a - b) <= 1e-9 for (_, a), (_, b) in zip(ranking, want))

            reporting = set(rng.sample(sorted(registry), rng.randint(0, len(registry))))
            reports = [(vid, ts) for vid in sorted(reporting) for ts in random_times(rng, rng.randint(1, 5))]
            div = aggregate.as_diversity(registry, reports)
            counts, mean = oracles.diversity(registry, reporting)
            assert div.per_country == counts
            assert (div.mean is None and mean is None) or abs(div.mean - mean) <= 1e-9

            start = EPOCH.date()
            end = start + timedelta(days=9)
            m = aggregate.availability_matrix(reports, registry, start, end)
            assert m.cells == oracles.matrix(reports, registry, start, end), f"seed {seed}"


# 7 ------------------------------------------------------------------------------


def _registry_file(name):
    return {vp.id: vp for vp in (vantage_from_dict(json.loads(l)) for l in read_lines(FIXTURES / name))}


def test_c07_as_diversity_figures(capsys):
    with criterion(7, "AS-diversity fixture means 3.15 and 1.46 within 0.01", capsys):
        vol = aggregate.as_diversity(_registry_file("as_registry_volunteer.jsonl"))
        fleet = aggregate.as_diversity(_registry_file("as_registry_fleet.jsonl"))
        assert abs(vol.mean - 3.15) <= 0.01, f"volunteer mean {vol.mean}"
        assert abs(fleet.mean - 1.46) <= 0.01, f"fleet mean {fleet.mean}"


# 8 ------------------------------------------------------------------------------

ELEMENT_FACTORIES = [
    lambda rng, h: netsim.DnsInjector((h,), (f"10.{rng.randint(0, 255)}.0.1",), rng.choice([1, 5, 900, 2500])),
    lambda rng, h: netsim.RstInjector((h,), ttl_offset=rng.choice([-5, -3, -1, 0, 2])),
    lambda rng, h: netsim.BlockpageProxy((h,), rng.choice(['<iframe src="http://10.10.34.35">', "<p>plain denial</p>"])),
    lambda rng, h: netsim.TransparentProxy(rng.choice(["squid", "bluecoat", "netsweeper", "fortigate"]), (h,)),
    lambda rng, h: netsim.TlsMitm((h,), rng.choice(["self-signed", "untrusted-issuer", "expired"])),
    lambda rng, h: netsim.IpBlocker((h,), rng.choice(["drop-syn", "rst-on-syn"])),
]
SERVER_FACTORIES = [
    lambda rng: netsim.Honest(),
    lambda rng: netsim.Dead(),
    lambda rng: netsim.VpnBlocker(),
    lambda rng: netsim.QuirkyLoadBalancer(rng.randint(1, 5000)),
    lambda rng: netsim.ChineseQuirk(),
]


def _random_scenario(rng):
    hosts = [f"h{i}.example" for i in range(rng.randint(1, 4))]
    servers = {h: rng.choice(SERVER_FACTORIES)(rng) for h in hosts}
    elements = tuple(rng.choice(ELEMENT_FACTORIES)(rng, rng.choice(hosts)) for _ in range(rng.randint(0, 3)))
    sc = netsim.SimScenario(seed=rng.getrandbits(64), servers=servers, path_elements=elements,
                            jitter_ms=rng.choice([0, 0, 30]))
    targets = [TestTarget(f"{rng.choice(['http', 'https'])}://{h}/", "X") for h in hosts]
    return sc, targets


def test_c08_architecture_equivalence(capsys, db, tmp_path):
    with criterion(8, "classify-on-agent equals detect-on-controller on 100 random scenarios", capsys):
        rng = random.Random(8)
        store = ControllerStore(tmp_path / "ctl", fsync=False)
        compared = 0
        for i in range(100):
            sc, targets = _random_scenario(rng)
            vp = VantagePoint(f"vp{i:03d}", rng.choice(["IR", "CN", "SA"]), 1000 + i, rng.choice(["vpn", "volunteer"]))
            token = store.register_vantage(vp)
            tr = SimTransport(sc, vp.kind.value)
            agent_side = ProbeAgent(vp, tr, tr.control(), Mode.CLASSIFY, db).run(targets, EPOCH)
            raw = ProbeAgent(vp, tr, tr.control(), Mode.RAW).run(targets, EPOCH)
            ack = store.submit_report(token, [serialize_report(r) for r in raw])
            assert ack.stored == len(targets)
            central = {r.measurement.key: detectors.detect(r.measurement, db) for r in store.query_reports(vantage=vp.id)}
            for rec in agent_side:
                assert rec.verdict == central[rec.measurement.key], f"scenario {i} {rec.measurement.target.url}"
                compared += 1
        store.close()
        assert compared >= 100


# 9 ------------------------------------------------------------------------------


def _synthetic_record(vid, host, t):
    m = RawMeasurement(vid, TestTarget(f"http://{host}/", "X"), t,
                       http=HttpObservation("GET / HTTP/1.1", status=200, body=b"ok", body_len=2))
    return serialize_report(m)


def test_c09_controller_contract(capsys, tmp_path):
    with criterion(9, "selector correctness + idempotent ingestion over 200 interleavings with restart", capsys):
        countries = ["IR", "SA", "CN", "US"]
        for run in range(200):
            rng = random.Random(9000 + run)
            d = tmp_path / f"run{run}"
            store = ControllerStore(d, compact_every=rng.choice([0, 2, 5]), fsync=False)
            store.add_target_list("g", [TestTarget("http://a.example/", "X")])
            registry, tokens, expected_reports = {}, {}, set()
            ops = rng.randint(10, 30)
            restart_at = rng.randrange(ops)
            for step in range(ops):
                if step == restart_at:
                    del store
                    store = ControllerStore(d, fsync=False)
                op = rng.choice(["register", "register", "schedule", "submit", "submit"])
                if op == "register":
                    vid = f"vp{len(registry)}"
                    vp = VantagePoint(vid, rng.choice(countries), rng.randint(1, 9), rng.choice(["vpn", "volunteer", "device"]))
                    tokens[vid] = store.register_vantage(vp)
                    registry[vid] = vp
                elif op == "schedule":
                    kind = rng.choice(["all", "country", "vantages"])
                    if kind == "all":
                        sel = Selector()
                    elif kind == "country":
                        sel = Selector("country", (rng.choice(countries),))
                    else:
                        sel = Selector("vantages", tuple(rng.sample(sorted(registry) + ["ghost"], rng.randint(1, len(registry) + 1))))
                    every = rng.choice([None, 6, 24])
                    spec = ExperimentSpec(f"e{step}", "g", sel, EPOCH, every, rng.choice([24, 72]))
                    got = store.schedule(spec)
                    selected = sorted(v for v, vp in registry.items() if sel.matches(vp))
                    brute = sorted((v, k) for v in selected for k in range(len(spec.occurrences())))
                    assert sorted((a.vantage, int(a.id.rsplit(":", 1)[1])) for a in got) == brute, f"run {run} step {step}"
                    assert store.schedule(spec) == got
                elif registry:
                    vid = rng.choice(sorted(registry))
                    batch = [_synthetic_record(vid, rng.choice(["a.example", "b.example"]),
                                               EPOCH + timedelta(hours=rng.randint(0, 3))) for _ in range(rng.randint(1, 4))]
                    store.submit_report(tokens[vid], batch)
                    before = store.report_count()
                    again = store.submit_report(tokens[vid], batch)
                    assert again.stored == 0 and store.report_count() == before
                    for line in batch:
                        expected_reports.add(line)
            store = ControllerStore(d, fsync=False)  # final restart: everything durable
            assert {vp.id: vp for vp in store.list_vantages()} == registry
            assert {serialize_report(r) for r in store.query_reports()} == expected_reports, f"run {run}"
            store.close()


# 10 -----------------------------------------------------------------------------

PIPELINE = """
import sys
from censorscope.cli import main
out, scenario, targets = sys.argv[1:4]
def run(*a):
    assert main(list(a)) == 0, a
run("sim", "run", "--scenario", scenario, "--targets", targets, "--out", out + "/reports.jsonl",
    "--country", "IR", "--started-at", "2016-03-01T00:00:00Z", "--workers", "4")
run("detect", "--reports", out + "/reports.jsonl", "--out", out + "/verdicts.jsonl")
for kind in ("fractions", "rst", "centralization", "diversity"):
    run("aggregate", "--verdicts", out + "/verdicts.jsonl", "--reports", out + "/reports.jsonl",
        "--kind", kind, "--out", out + "/" + kind + ".tsv")
run("aggregate", "--reports", out + "/reports.jsonl", "--kind", "matrix", "--start", "2016-02-28",
    "--end", "2016-03-03", "--out", out + "/matrix.tsv")
"""


def test_c10_determinism(capsys, tmp_path):
    with criterion(10, "pipeline output byte-identical across 3 runs", capsys):
        data = REPO / "src" / "censorscope" / "data"
        outputs = []
        for i in range(3):
            out = tmp_path / f"run{i}"
            out.mkdir()
            env = dict(os.environ, PYTHONHASHSEED=str(i * 7919))
            proc = subprocess.run(
                [sys.executable, "-c", PIPELINE, str(out), str(data / "sample_scenario.json"), str(data / "sample_targets.csv")],
                env=env, capture_output=True, text=True,
            )
            assert proc.returncode == 0, proc.stderr[-400:]
            outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert len(outputs[0]) == 7
        assert outputs[0]["reports.jsonl"] and outputs[0]["verdicts.jsonl"]
        assert outputs[0] == outputs[1] == outputs[2]
