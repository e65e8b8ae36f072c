import json
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cryptocatch.probe import (
    ALL_VARIANTS,
    Outcome,
    ProbeConfig,
    ProbeTarget,
    ProbeVerdict,
    ProtocolVariant,
    Transport,
    attempt_plan,
    build_message,
    classify_response,
    infer_variant,
    probe_batch,
    probe_one,
    read_targets,
)
from cryptocatch.sim.pool import (
    ConnectionLimit,
    SilentDrop,
    closed_port,
    error_body,
    serve_html,
    serve_json_echo,
    serve_pool,
    success_body,
)
from cryptocatch.probe import encode

BUDGET_MS = 255 + 50

SNAPSHOT = {
    ProtocolVariant.BTC: b'{"id":1,"method":"mining.subscribe","params":[]}\n',
    ProtocolVariant.XMR: b'{"id":1,"jsonrpc":"2.0","method":"login","params":{"login":"4'
    + b"0" * 94 + b'","pass":"x"}}\n',
    ProtocolVariant.ETH: b'{"id":1,"jsonrpc":"2.0","method":"eth_submitLogin",'
    b'"params":["0x000000000000000000000000000000000000dEaD"]}\n',
    ProtocolVariant.WEBMINE: b'{"id":"start","m":"start","p":{"token":"00000000000000000000000000000000"},"subscribe":1}\n',
}


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_message_snapshots(variant):
    msg = build_message(variant)
    assert msg == SNAPSHOT[variant]
    assert msg.count(b"\n") == 1 and msg.endswith(b"\n")
    json.loads(msg)


def test_wallet_placeholder():
    msg = json.loads(build_message(ProtocolVariant.ETH, ProbeConfig(wallet="0xabc")))
    assert msg["params"] == ["0xabc"]
    msg = json.loads(build_message(ProtocolVariant.WEBMINE, ProbeConfig(token="tok")))
    assert msg["p"] == {"token": "tok"}


TABLE_BODIES = [
    (ProtocolVariant.BTC, b'{"id":1,"result":[["mining.set_difficulty","x"],["mining.notify","y"]],"error":null}', "success"),
    (ProtocolVariant.BTC, b'{"id":1,"result":false,"error":[20,"Not supported"]}', "error"),
    (ProtocolVariant.XMR, b'{"id":1,"jsonrpc":"2.0","result":{"id":"m","job":{"algo":"rx/0","blob":"00","target":"ff"},"status":"OK"},"error":null}', "success"),
    (ProtocolVariant.XMR, b'{"id":1,"jsonrpc":"2.0","error":{"code":-1,"message":"Invalid address"}}', "error"),
    (ProtocolVariant.ETH, b'{"id":1,"jsonrpc":"2.0","result":true,"error":null}', "success"),
    (ProtocolVariant.ETH, b'{"id":1,"jsonrpc":"2.0","result":null,"error":{"code":-1,"message":"Invalid login"}}', "error"),
    (ProtocolVariant.WEBMINE, b'{"r":{"subscribed":0},"id":"start"}', "success"),
    (ProtocolVariant.WEBMINE, b'{"e":"noRights","id":"start"}', "error"),
]


@pytest.mark.parametrize("variant,body,kind", TABLE_BODIES)
def test_response_grid(variant, body, kind):
    assert classify_response(variant, body) == (Outcome.POSITIVE, kind)
    assert infer_variant(body) is variant


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_simulator_bodies_classify_positive(variant):
    for make, kind in ((success_body, "success"), (error_body, "error")):
        body = encode(make(variant))
        assert classify_response(variant, body) == (Outcome.POSITIVE, kind)
        assert infer_variant(body) is variant


@pytest.mark.parametrize("body", [
    b"<html><body>It works</body></html>", b"", b"null", b"[1,2]", b'{"id":1}', b'{"result":true}',
    b'{"id":1,"method":"mining.subscribe","params":[]}', b"\xff\xfe", b"[" * 5000,
])
def test_negative_bodies(body):
    for v in ALL_VARIANTS:
        assert classify_response(v, body) == (Outcome.NEGATIVE, None)


def test_webmine_needs_r_or_e():
    assert classify_response(ProtocolVariant.WEBMINE, b'{"id":1,"result":true}')[0] is Outcome.NEGATIVE
    assert classify_response(ProtocolVariant.BTC, b'{"id":"start","r":{}}')[0] is Outcome.NEGATIVE
    assert classify_response(ProtocolVariant.BTC, b'{"id":1,"result":null}') == (Outcome.POSITIVE, "success")


@given(st.binary(max_size=300))
def test_classify_total_on_bytes(body):
    for v in ALL_VARIANTS:
        outcome, kind = classify_response(v, body)
        assert outcome in (Outcome.POSITIVE, Outcome.NEGATIVE)
        assert (kind is None) == (outcome is Outcome.NEGATIVE)


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.text(max_size=5),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.sampled_from(["id", "result", "error", "r", "e", "x"]), inner, max_size=4),
    max_leaves=8,
)


@given(json_values)
def test_classify_total_on_json(value):
    body = json.dumps(value).encode()
    for v in ALL_VARIANTS:
        outcome, _ = classify_response(v, body)
        if isinstance(value, dict) and "id" in value:
            keys = ("r", "e") if v is ProtocolVariant.WEBMINE else ("result", "error")
            assert (outcome is Outcome.POSITIVE) == any(k in value for k in keys)
        else:
            assert outcome is Outcome.NEGATIVE


def test_attempt_plan_order():
    plan = attempt_plan(ProbeTarget("h", 1), ALL_VARIANTS)
    assert plan[:3] == [(Transport.TCP, v) for v in ALL_VARIANTS[:3]]
    assert plan[3:6] == [(Transport.TLS, v) for v in ALL_VARIANTS[:3]]
    assert plan[6:] == [(Transport.WEBSOCKET, ProtocolVariant.WEBMINE)]
    assert attempt_plan(ProbeTarget("h", 1, (Transport.TCP,)), [ProtocolVariant.WEBMINE]) == []


def test_target_parsing():
    assert ProbeTarget.parse("pool.example:3333") == ProbeTarget("pool.example", 3333)
    assert ProbeTarget.parse("[::1]:443").host == "::1"
    for bad in ("nohost", "h:0", "h:70000", ":12"):
        with pytest.raises(ValueError):
            ProbeTarget.parse(bad)
    assert len(read_targets(["a:1", "# comment", "", "b:2  # x"])) == 2
    with pytest.raises(ValueError):
        ProbeTarget("h", 1, ())


def timed(target, **kw):
    t0 = time.monotonic()
    verdict = probe_one(target, **kw)
    return verdict, (time.monotonic() - t0) * 1000


def test_probe_matrix(pool_matrix):
    for (variant, kind), server in pool_matrix.items():
        verdict, ms = timed(ProbeTarget(server.host, server.port))
        assert verdict.outcome is Outcome.POSITIVE
        assert verdict.variant is variant and verdict.response_kind == kind
        assert ms < BUDGET_MS and verdict.round_trip_ms < 255
        assert len(verdict.excerpt) <= 1024 and not verdict.tls_verified
        expected = Transport.WEBSOCKET if variant is ProtocolVariant.WEBMINE else Transport.TCP
        assert verdict.transport is expected


def test_pool_logs_probe_line(pool_matrix):
    server = pool_matrix[(ProtocolVariant.BTC, "success")]
    probe_one(ProbeTarget(server.host, server.port))
    assert SNAPSHOT[ProtocolVariant.BTC] in server.received


def test_benign_mocks():
    with serve_html() as html, serve_json_echo() as echo, serve_json_echo(wrap=False) as raw:
        for server in (html, echo, raw):
            verdict, ms = timed(ProbeTarget(server.host, server.port))
            assert verdict.outcome is Outcome.NEGATIVE and verdict.variant is None
            assert ms < BUDGET_MS
    verdict, ms = timed(ProbeTarget("127.0.0.1", closed_port()))
    assert verdict.outcome is Outcome.UNREACHABLE and verdict.excerpt == "" and ms < BUDGET_MS


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_silent_pool(variant):
    with serve_pool(variant, SilentDrop) as server:
        verdict, ms = timed(ProbeTarget(server.host, server.port))
        assert verdict.outcome is Outcome.SILENT
        assert ms < BUDGET_MS
        time.sleep(0.05)
        assert server.received  # it did read the probe


def test_connection_limit():
    with serve_pool(ProtocolVariant.XMR, ConnectionLimit(0)) as server:
        assert probe_one(ProbeTarget(server.host, server.port)).outcome is Outcome.SILENT
    with serve_pool(ProtocolVariant.XMR, ConnectionLimit(100)) as server:
        verdict = probe_one(ProbeTarget(server.host, server.port))
        assert verdict.outcome is Outcome.POSITIVE and verdict.variant is ProtocolVariant.XMR


def test_tls_pool():
    with serve_pool(ProtocolVariant.ETH, tls=True) as server:
        verdict, ms = timed(ProbeTarget(server.host, server.port))
        assert verdict.outcome is Outcome.POSITIVE and verdict.transport is Transport.TLS
        assert verdict.variant is ProtocolVariant.ETH and ms < BUDGET_MS


def test_tls_only_target_against_plain_server(pool_matrix):
    server = pool_matrix[(ProtocolVariant.BTC, "success")]
    verdict = probe_one(ProbeTarget(server.host, server.port, (Transport.TLS,)))
    assert verdict.outcome in (Outcome.SILENT, Outcome.NEGATIVE)


def test_unresolvable_host():
    verdict = probe_one(ProbeTarget("no-such-host.invalid", 3333))
    assert verdict.outcome is Outcome.UNREACHABLE


def test_http_transport_opt_in():
    with serve_html() as html:
        target = ProbeTarget(html.host, html.port, (Transport.HTTP,))
        verdict = probe_one(target, [ProtocolVariant.BTC])
        assert verdict.outcome is Outcome.NEGATIVE and "It works" in verdict.excerpt


def test_probe_batch(pool_matrix):
    targets = [ProbeTarget(s.host, s.port) for s in pool_matrix.values()]
    with serve_html() as html, serve_json_echo() as echo:
        targets += [ProbeTarget(html.host, html.port), ProbeTarget(echo.host, echo.port)]
        targets.append(targets[0])
        verdicts = probe_batch(targets, config=ProbeConfig(max_parallel=4))
    outcomes = [v.outcome for v in verdicts]
    assert outcomes[:8] == [Outcome.POSITIVE] * 8 and outcomes[8:10] == [Outcome.NEGATIVE] * 2
    assert [v.target for v in verdicts] == targets
    assert verdicts[-1].variant is verdicts[0].variant
    assert probe_batch([]) == []


def test_verdict_serialization(pool_matrix):
    server = pool_matrix[(ProtocolVariant.ETH, "error")]
    v = probe_one(ProbeTarget(server.host, server.port))
    d = v.to_dict()
    assert set(d) == {"host", "port", "outcome", "variant", "response_kind", "excerpt", "round_trip_ms",
                      "transport", "tls_verified"}
    back = ProbeVerdict.from_dict(json.loads(json.dumps(d)))
    assert back.outcome is v.outcome and back.variant is v.variant and back.transport is v.transport


def test_config_validation():
    with pytest.raises(ValueError):
        ProbeConfig(connect_timeout_ms=0)
    with pytest.raises(ValueError):
        ProbeConfig.from_dict({"retries": 3})
    assert ProbeConfig().budget_s == pytest.approx(0.255)
