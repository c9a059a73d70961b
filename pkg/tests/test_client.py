import json
import socket

import pytest

from pqdnssec import client
from pqdnssec.client import Reason, parse_dig_args, parse_server, print_result, validate_response
from pqdnssec.keystore import DnskeyRecord
from pqdnssec.signer import ValidityPolicy, Verdict, sign_response
from pqdnssec.wire import Message, ResourceRecord as Record, RRType, decode_message, make_query

from conftest import signing_key

NOW = 1_760_000_000


class CountingFactory:
    """Socket factory that records which socket types were opened."""

    def __init__(self):
        self.types = []

    def __call__(self, family, kind):
        self.types.append(kind)
        return socket.socket(family, kind)


def test_plain_query_over_udp(running_server):
    srv = running_server([signing_key("ED25519")])
    res = client.query(srv.address, "www.mysig.com.", "A")
    assert res.transport_used == "udp" and not res.retried
    assert len(res.response.answer) == 2
    assert res.wire_size == len(res.wire) and decode_message(res.wire) == res.response
    assert res.latency_us > 0


def test_sphincs_dnskey_goes_over_tcp(running_server):
    key = signing_key("SPHINCSSHA2128S")
    srv = running_server([key])
    res = client.query(srv.address, "mysig.com.", "DNSKEY", do_bit=True, bufsize=1232)
    assert res.transport_used == "tcp" and res.retried
    assert res.wire_size > 7856
    assert validate_response(res, [key.dnskey]).overall


def test_force_tcp_never_opens_udp(running_server):
    srv = running_server([signing_key("ED25519")])
    factory = CountingFactory()
    res = client.query(srv.address, "mysig.com.", "A", force_tcp=True, socket_factory=factory)
    assert res.transport_used == "tcp" and not res.retried
    assert factory.types == [socket.SOCK_STREAM]


def test_tc_retry_opens_udp_then_tcp(running_server):
    srv = running_server([signing_key("MLDSA44")])
    factory = CountingFactory()
    client.query(srv.address, "mysig.com.", "DNSKEY", do_bit=True, socket_factory=factory)
    assert factory.types == [socket.SOCK_DGRAM, socket.SOCK_STREAM]


def test_timeout_raises():
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as silent:
        silent.bind(("127.0.0.1", 0))
        with pytest.raises(client.QueryTimeout):
            client.query(silent.getsockname(), "mysig.com.", "A", timeout=0.2)


def test_connection_refused_is_query_error():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(client.QueryError):
        client.query(("127.0.0.1", port), "mysig.com.", "A", force_tcp=True, timeout=1)


def test_transport_independent_validation(running_server):
    key = signing_key("FALCON512")
    srv = running_server([key])
    udp = client.query(srv.address, "www.mysig.com.", "A", do_bit=True, bufsize=4096)
    tcp = client.query(srv.address, "www.mysig.com.", "A", do_bit=True, force_tcp=True)
    assert udp.transport_used == "udp"
    assert validate_response(udp, [key.dnskey]).overall == validate_response(tcp, [key.dnskey]).overall is True


def _signed(responder_for, mnemonic="MLDSA44", qname="www.mysig.com.", rrtype=RRType.A):
    key = signing_key(mnemonic)
    r = responder_for([key])
    return key, r.handle_query(make_query(qname, rrtype, do=True), "tcp", NOW)


def test_validate_accept(responder_for):
    key, resp = _signed(responder_for)
    report = validate_response(resp, [key.dnskey], NOW)
    assert report.overall and report.reason is None
    assert [o.verdict for o in report.outcomes] == [Verdict.ACCEPT.value]
    assert report.outcomes[0].key_tag == key.key_tag


def test_stripped_rrsig_is_missing_signature(responder_for):
    key, resp = _signed(responder_for)
    stripped = Message(id=resp.id, flags=resp.flags, questions=resp.questions,
                       answer=tuple(rr for rr in resp.answer if rr.rrtype != RRType.RRSIG), edns=resp.edns)
    report = validate_response(stripped, [key.dnskey], NOW)
    assert not report.overall and report.reason == Reason.MISSING_SIGNATURE.value


def test_wrong_anchor_rejects(responder_for):
    _, resp = _signed(responder_for)
    other = signing_key("MLDSA44", tag="other")
    report = validate_response(resp, [other.dnskey], NOW)
    assert not report.overall
    assert report.reason in (Verdict.KEY_TAG_MISMATCH.value, Verdict.BAD_SIGNATURE.value)


def test_zeroed_key_rejects(responder_for):
    key, resp = _signed(responder_for)
    forged = DnskeyRecord(key.dnskey.flags, 3, key.dnskey.algorithm, bytes(len(key.dnskey.public_key)))
    assert not validate_response(resp, [forged], NOW).overall


def test_tampered_rdata_is_bad_signature(responder_for):
    key, resp = _signed(responder_for)
    answer = list(resp.answer)
    a = answer[0]
    answer[0] = Record(a.name, a.rrtype, a.rrclass, a.ttl, bytes([10, 9, 9, 9]))
    tampered = Message(id=resp.id, flags=resp.flags, questions=resp.questions, answer=tuple(answer), edns=resp.edns)
    report = validate_response(tampered, [key.dnskey], NOW)
    assert report.reason == Verdict.BAD_SIGNATURE.value


def test_expired_and_not_yet_valid(responder_for):
    key, resp = _signed(responder_for)
    assert validate_response(resp, [key.dnskey], NOW + 30 * 86400).reason == Verdict.EXPIRED.value
    assert validate_response(resp, [key.dnskey], NOW - 2 * 86400).reason == Verdict.NOT_YET_VALID.value


def test_no_anchor_and_no_answer(responder_for):
    key, resp = _signed(responder_for)
    assert validate_response(resp, [], NOW).reason == Reason.NO_TRUST_ANCHOR.value
    r = responder_for([key])
    empty = r.handle_query(make_query("nope.mysig.com.", RRType.A, do=True), "tcp", NOW)
    assert validate_response(empty, [key.dnskey], NOW).reason == "no-answer"


def test_self_validated_dnskey(responder_for):
    _, resp = _signed(responder_for, "ED25519", "mysig.com.", RRType.DNSKEY)
    assert not validate_response(resp, [], NOW).overall
    assert validate_response(resp, [], NOW, self_validate_dnskey=True).overall


def test_trust_anchor_file(tmp_path, responder_for):
    key, resp = _signed(responder_for, "SNOVA2454")
    path = tmp_path / "anchor.key"
    path.write_text(key.dnskey.to_text(key.owner, 3600) + "\n")
    anchors = client.load_trust_anchors(path)
    assert anchors == [key.dnskey]
    assert validate_response(resp, anchors, NOW).overall


def _result(msg, transport="udp", retried=False):
    from pqdnssec.wire import encode_message

    wire = encode_message(msg)
    return client.QueryResult(msg, transport, len(wire), 812.5, retried, wire)


def test_print_result_accept(responder_for):
    key, resp = _signed(responder_for)
    text = print_result(_result(resp, "tcp", True), validate_response(resp, [key.dnskey], NOW))
    assert ";; DNSSEC: AD-equivalent: validated (client-side)" in text
    assert "transport: TCP (truncated over UDP, retried over TCP)" in text
    assert f"algorithm=MLDSA44 (17) key_tag={key.key_tag}" in text
    assert "signature=2420 bytes" in text
    assert "status: NOERROR" in text and "flags: qr aa" in text
    assert "; EDNS: version: 0, flags: do; udp: 1232" in text


def test_print_result_reject_and_unknown_algorithm(responder_for):
    from pqdnssec import algoreg

    key, resp = _signed(responder_for, "ED25519")
    report = validate_response(resp, [], NOW)
    reg = algoreg.default_registry().with_overrides({"ED25519": 199})
    text = print_result(_result(resp), report, registry=reg)
    assert "algorithm=15 key_tag=" in text
    assert ";; DNSSEC: validation failed: no-trust-anchor" in text
    assert "transport: UDP\n" in text


def test_json_output(responder_for):
    key, resp = _signed(responder_for)
    doc = json.loads(client.result_to_json(_result(resp, "tcp", True), validate_response(resp, [key.dnskey], NOW)))
    assert doc["transport"] == "tcp" and doc["retried"] is True
    assert doc["validation"]["overall"] == "accept"
    assert doc["validation"]["rrsets"][0]["verdict"] == "accept"
    assert doc["rcode"] == "NOERROR"


def test_parse_dig_args():
    a = parse_dig_args(["@127.0.0.1:5353", "mysig.com.", "DNSKEY", "+dnssec", "+bufsize=4096"])
    assert (a.name, a.rrtype, a.server, a.dnssec, a.tcp, a.bufsize) == (
        "mysig.com.", RRType.DNSKEY, ("127.0.0.1", 5353), True, False, 4096)
    b = parse_dig_args(["www.mysig.com.", "+tcp"])
    assert b.rrtype == RRType.A and b.tcp and b.server == ("127.0.0.1", 53)
    for bad in (["+frobnicate", "x."], [], ["a.", "A", "extra"], ["a.", "+bufsize=70000"]):
        with pytest.raises(ValueError):
            parse_dig_args(bad)


def test_parse_server():
    assert parse_server("@::1") == ("::1", 53)
    assert parse_server("[::1]:5353") == ("::1", 5353)
    assert parse_server("localhost:53") == ("localhost", 53)


def test_sign_response_output_validates_with_client():
    key = signing_key("MAYO1")
    from pqdnssec.wire import Question, RRType as T

    rr = Record(key.owner, T.A, 1, 60, bytes([10, 0, 0, 1]))
    q = make_query("mysig.com.", T.A, do=True)
    msg = Message(id=q.id, flags=q.flags | 0x8000, questions=(Question(key.owner, T.A),), answer=(rr,), edns=q.edns)
    assert validate_response(sign_response(msg, [key], ValidityPolicy(), NOW), [key.dnskey], NOW).overall
