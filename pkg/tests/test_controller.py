import json
import threading
from datetime import timedelta

import pytest

from censorscope import netsim
from censorscope.agent import ProbeAgent
from censorscope.controller import (
    Conflict,
    ControllerClient,
    ControllerClientError,
    ControllerError,
    ControllerStore,
    ExperimentSpec,
    NotFound,
    Selector,
    ServerThread,
    Unauthorized,
)
from censorscope.model import Mode, TestTarget, ValidationError, VantagePoint, serialize_report
from censorscope.transport import SimTransport

from conftest import EPOCH, honest_scenario

TARGETS = [TestTarget("http://a.example/", "NEWS"), TestTarget("http://b.example/", "POLR")]


def _records(vp, started_at=EPOCH, mode=Mode.RAW, local_only=False):
    tr = SimTransport(honest_scenario(["a.example", "b.example"]), vp.kind.value)
    return ProbeAgent(vp, tr, tr.control(), mode).run(TARGETS, started_at, local_only)


@pytest.fixture
def store(tmp_path):
    s = ControllerStore(tmp_path / "data", fsync=False)
    yield s
    s.close()


def test_register_query_duplicate(store):
    vp = VantagePoint("vp1", "IR", 197207)
    token = store.register_vantage(vp)
    assert len(token) == 32 and int(token, 16) >= 0
    assert store.get_vantage("vp1") == vp
    with pytest.raises(Conflict):
        store.register_vantage(vp)
    with pytest.raises(NotFound):
        store.get_vantage("nope")


def test_schedule_selectors(store):
    for i in range(2):
        store.register_vantage(VantagePoint(f"ir{i}", "IR", 10 + i))
    for i in range(3):
        store.register_vantage(VantagePoint(f"us{i}", "US", 20 + i))
    store.add_target_list("global", TARGETS)
    ir = store.schedule(ExperimentSpec("e-ir", "global", Selector.parse("country:IR"), EPOCH))
    assert sorted(a.vantage for a in ir) == ["ir0", "ir1"]
    everyone = store.schedule(ExperimentSpec("e-all", "global", Selector(), EPOCH))
    assert len(everyone) == 5
    some = store.schedule(ExperimentSpec("e-some", "global", Selector.parse("vantages:us1,ir0,ghost"), EPOCH))
    assert sorted(a.vantage for a in some) == ["ir0", "us1"]


def test_recurrence_occurrences(store):
    store.register_vantage(VantagePoint("vp1", "IR", 1))
    store.add_target_list("g", TARGETS)
    spec = ExperimentSpec("daily", "g", Selector(), EPOCH, every_hours=24, horizon_hours=72)
    out = store.schedule(spec)
    assert [a.due_at for a in out] == [EPOCH + timedelta(hours=24 * k) for k in range(3)]
    with pytest.raises(ValidationError):
        ExperimentSpec("x", "g", Selector(), EPOCH, every_hours=0)
    with pytest.raises(ValidationError):
        Selector.parse("country:Iran")


def test_schedule_errors_and_idempotency(store):
    store.register_vantage(VantagePoint("vp1", "IR", 1))
    with pytest.raises(NotFound):
        store.schedule(ExperimentSpec("e", "missing", Selector(), EPOCH))
    store.add_target_list("g", TARGETS)
    spec = ExperimentSpec("e", "g", Selector(), EPOCH)
    assert store.schedule(spec) == store.schedule(spec)
    with pytest.raises(Conflict):
        store.schedule(ExperimentSpec("e", "g", Selector.parse("country:US"), EPOCH))


def test_poll_and_ack(store):
    tok = store.register_vantage(VantagePoint("vp1", "IR", 1))
    other = store.register_vantage(VantagePoint("vp2", "US", 2))
    store.add_target_list("g", TARGETS)
    store.schedule(ExperimentSpec("e", "g", Selector(), EPOCH, every_hours=12, horizon_hours=24))
    due = store.poll(tok, EPOCH)
    assert [a.id for a in due] == ["e:vp1:0"]
    assert len(store.poll(tok)) == 2
    assert store.ack(other, ["e:vp1:0"]) == 0  # not theirs
    assert store.ack(tok, ["e:vp1:0"]) == 1
    assert store.ack(tok, ["e:vp1:0"]) == 0
    assert [a.id for a in store.poll(tok)] == ["e:vp1:1"]
    with pytest.raises(Unauthorized):
        store.poll("bogus")


def test_submit_idempotent_and_errors(store):
    vp = VantagePoint("vp1", "IR", 1)
    tok = store.register_vantage(vp)
    lines = [serialize_report(r) for r in _records(vp)]
    lines.append(serialize_report(_records(vp, EPOCH + timedelta(hours=1))[0]))
    ack = store.submit_report(tok, lines)
    assert (ack.accepted, ack.stored, ack.duplicates) == (3, 3, 0)
    ack = store.submit_report(tok, lines)
    assert (ack.accepted, ack.stored, ack.duplicates) == (3, 0, 3)
    assert store.report_count() == 3
    with pytest.raises(Unauthorized):
        store.submit_report("bad", lines)
    ack = store.submit_report(tok, ["{not json", lines[0][:40], '{"schema_version":999}'])
    assert ack.stored == 0 and [i for i, _ in ack.errors] == [0, 1, 2]


def test_submit_partial_failure_keeps_valid(store):
    vp = VantagePoint("vp1", "IR", 1)
    tok = store.register_vantage(vp)
    good = [serialize_report(r) for r in _records(vp)]
    ack = store.submit_report(tok, [good[0], "garbage", good[1]])
    assert ack.stored == 2 and ack.errors[0][0] == 1


def test_foreign_and_local_only_rejected(store):
    a, b = VantagePoint("vp1", "IR", 1), VantagePoint("vol", "IR", 2, "volunteer")
    tok_a, tok_b = store.register_vantage(a), store.register_vantage(b)
    ack = store.submit_report(tok_a, [serialize_report(_records(b)[0])])
    assert ack.stored == 0 and len(ack.errors) == 1
    ack = store.submit_report(tok_b, [serialize_report(r) for r in _records(b, local_only=True)])
    assert ack.stored == 0 and "local-only" in ack.errors[0][1]


def test_raw_and_classified_both_accepted(store, db):
    vp = VantagePoint("vp1", "IR", 1)
    tok = store.register_vantage(vp)
    store.submit_report(tok, [serialize_report(_records(vp)[0])])
    store.submit_report(tok, [serialize_report(_records(vp, EPOCH + timedelta(days=1), Mode.CLASSIFY)[0])])
    modes = [r.mode for r in store.query_reports()]
    assert modes == [Mode.RAW, Mode.CLASSIFY]


def test_query_filters(store):
    ir, us = VantagePoint("ir1", "IR", 1), VantagePoint("us1", "US", 2)
    for vp in (ir, us):
        tok = store.register_vantage(vp)
        for h in range(3):
            store.submit_report(tok, [serialize_report(r) for r in _records(vp, EPOCH + timedelta(hours=h))])
    assert store.query_reports(country="ZZ") == []
    only_ir = store.query_reports(country="IR")
    assert len(only_ir) == 6 and {r.measurement.vantage for r in only_ir} == {"ir1"}
    lo, hi = EPOCH + timedelta(hours=1), EPOCH + timedelta(hours=2)
    ranged = store.query_reports(since=lo, until=hi)
    assert {r.measurement.started_at for r in ranged} == {lo, hi}
    brute = [r for r in store.query_reports() if lo <= r.measurement.started_at <= hi]
    assert ranged == brute
    keys = [(r.measurement.started_at, r.measurement.vantage, r.measurement.target.url) for r in store.query_reports()]
    assert keys == sorted(keys)
    assert len(store.query_reports(target="http://a.example/")) == 6


def test_empty_store_query(store):
    assert store.query_reports() == []


def test_restart_durability(tmp_path):
    d = tmp_path / "data"
    s = ControllerStore(d, compact_every=3, fsync=False)
    vp = VantagePoint("vp1", "IR", 1)
    tok = s.register_vantage(vp)
    s.add_target_list("g", TARGETS)
    s.schedule(ExperimentSpec("e", "g", Selector(), EPOCH, every_hours=6))
    s.ack(tok, ["e:vp1:0"])
    s.submit_report(tok, [serialize_report(r) for r in _records(vp)])
    before = (s.list_vantages(), s.target_lists, s.experiments, s.assignments, s.acked, s.query_reports())
    del s  # no clean shutdown
    s2 = ControllerStore(d, fsync=False)
    assert (s2.list_vantages(), s2.target_lists, s2.experiments, s2.assignments, s2.acked, s2.query_reports()) == before
    assert s2.submit_report(tok, [serialize_report(r) for r in _records(vp)]).stored == 0


def test_torn_tail_recovered_mid_file_corruption_raises(tmp_path):
    d = tmp_path / "data"
    s = ControllerStore(d, compact_every=0, fsync=False)
    vp = VantagePoint("vp1", "IR", 1)
    tok = s.register_vantage(vp)
    s.submit_report(tok, [serialize_report(r) for r in _records(vp)])
    log = d / "reports.jsonl"
    good = log.read_bytes()
    log.write_bytes(good + b'{"record": "half')
    s2 = ControllerStore(d, fsync=False)
    assert s2.report_count() == 2 and log.read_bytes() == good
    lines = good.splitlines(keepends=True)
    log.write_bytes(b"garbage\n" + lines[1])
    with pytest.raises(ControllerError):
        ControllerStore(d, fsync=False)


def test_concurrent_submissions(store):
    vps = [VantagePoint(f"vp{i}", "IR", i + 1) for i in range(4)]
    toks = [store.register_vantage(v) for v in vps]
    batches = [[serialize_report(r) for r in _records(v)] for v in vps]

    def work(i):
        for _ in range(3):
            store.submit_report(toks[i], batches[i])

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert store.report_count() == 8


# -- HTTP service -----------------------------------------------------------------


def test_http_round_trip(store):
    with ServerThread(store) as srv:
        admin = ControllerClient(srv.url)
        agent = ControllerClient(srv.url)
        vp = VantagePoint("vp1", "IR", 197207)
        agent.register(vp)
        assert admin.vantage("vp1") == vp
        assert admin.vantages() == [vp]
        with pytest.raises(ControllerClientError) as err:
            admin.vantage("ghost")
        assert err.value.status == 404
        with pytest.raises(ControllerClientError) as err:
            admin.register(vp)
        assert err.value.status == 409

        assert admin.put_target_list("g", "url,category_code\nhttp://a.example/,NEWS\nhttp://b.example/,POLR\n") == 2
        assert admin.schedule(ExperimentSpec("e", "g", Selector.parse("country:IR"), EPOCH)) == 1
        due = agent.poll(EPOCH)
        assert [a.id for a in due] == ["e:vp1:0"]
        assert agent.ack([a.id for a in due]) == 1
        assert agent.poll(EPOCH) == []

        recs = _records(vp)
        ack = agent.submit(recs)
        assert (ack.accepted, ack.stored) == (2, 2)
        assert agent.submit(recs).duplicates == 2
        got = admin.query(country="IR", since=EPOCH, until=EPOCH)
        assert [r.measurement for r in got] == [r.measurement for r in recs]
        assert admin.query(country="US") == []

        with pytest.raises(ControllerClientError) as err:
            ControllerClient(srv.url, token="nope").submit(recs)
        assert err.value.status == 401


def test_http_bad_requests(store):
    import urllib.request
    import urllib.error

    with ServerThread(store) as srv:
        req = urllib.request.Request(srv.url + "/v1/vantages", data=b'{"id": "x"}', method="POST")
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(req)
        assert err.value.code == 400
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(srv.url + "/v2/nothing")
        assert err.value.code == 404
        body = json.loads(err.value.read())
        assert "error" in body
