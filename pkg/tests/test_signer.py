import threading
from dataclasses import replace

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from pqdnssec import algoreg
from pqdnssec.client import validate_response
from pqdnssec.signer import (
    RRSIG_PREFIX_LEN, Keyring, RrsigRecord, SignatureCache, ValidityPolicy, Verdict, rrsig_signed_data,
    serial_le, serial_lt, sign_response, sign_rrset, signature_cache_get_or_sign, validate_rrsig,
)
from pqdnssec.wire import (
    Flag, Message, Name, Question, Rcode, RRType, Rrset, a_rdata, canonical_name, canonical_rrset,
    decode_message, encode_message, make_query, txt_rdata,
)

from conftest import ALL, FAST, ZONE, signing_key

NOW = 1_760_000_000
POLICY = ValidityPolicy()


def a_set(name="mysig.com.", addrs=("10.0.0.1",), ttl=3600):
    return Rrset.of(Name.from_text(name), RRType.A, ttl, [a_rdata(a) for a in addrs])


def test_serial_arithmetic():
    assert serial_lt(1, 2) and not serial_lt(2, 1)
    assert serial_lt(0xFFFFFFF0, 5)  # wraps
    assert serial_le(7, 7) and not serial_lt(7, 7)


def test_signed_data_layout():
    key = signing_key("ED25519")
    rrset = a_set(addrs=("10.0.0.2", "10.0.0.1"))
    rrsig = sign_rrset(rrset, key, POLICY, NOW)
    data = rrsig_signed_data(rrsig, rrset)
    assert len(data) == RRSIG_PREFIX_LEN + len(canonical_name(key.owner)) + len(canonical_rrset(rrset))
    assert data == rrsig_signed_data(replace(rrsig, signature=b"other"), rrset)
    assert data == rrsig_signed_data(rrsig, a_set(name="MYSIG.com.", addrs=("10.0.0.1", "10.0.0.2")))


def test_signed_data_consistency_checks():
    key = signing_key("ED25519")
    rrset = a_set()
    rrsig = sign_rrset(rrset, key, POLICY, NOW)
    with pytest.raises(ValueError):
        rrsig_signed_data(replace(rrsig, type_covered=RRType.TXT), rrset)
    with pytest.raises(ValueError):
        rrsig_signed_data(rrsig, rrset.with_ttl(60))


def test_rrsig_fields():
    key = signing_key("MLDSA44")
    rrsig = sign_rrset(a_set("www.mysig.com."), key, POLICY, NOW)
    assert rrsig.inception == NOW - 3600 and rrsig.expiration == NOW + 14 * 86400
    assert rrsig.labels == 3 and rrsig.algorithm == 17 and rrsig.key_tag == key.key_tag
    assert rrsig.signer_name == ZONE
    assert len(rrsig.signature) == 2420
    assert RrsigRecord.from_rdata(rrsig.to_rdata()) == rrsig
    with pytest.raises(ValueError):
        replace(rrsig, inception=rrsig.expiration)


def test_falcon_padded_signature_exact():
    rrsig = sign_rrset(a_set(), signing_key("FALCONPADDED512"), POLICY, NOW)
    assert len(rrsig.signature) == 666


def test_outside_zone_rejected():
    from pqdnssec.signer import SigningError

    with pytest.raises(SigningError):
        sign_rrset(a_set("example.org."), signing_key("ED25519"), POLICY, NOW)


def test_policy_invariants():
    with pytest.raises(ValueError):
        ValidityPolicy(backdate=-1)
    with pytest.raises(ValueError):
        ValidityPolicy(lifetime=0)


@pytest.mark.parametrize("mnemonic", ALL)
def test_rrsig_rdata_length_and_round_trip(mnemonic):
    key = signing_key(mnemonic)
    rrset = a_set()
    rrsig = sign_rrset(rrset, key, POLICY, NOW)
    d = key.algorithm
    expected = RRSIG_PREFIX_LEN + ZONE.wire_length() + d.signature_len
    if d.fixed_size:
        assert len(rrsig.to_rdata()) == expected
    else:
        assert len(rrsig.to_rdata()) <= expected
    assert validate_rrsig(rrset, rrsig, key.dnskey, NOW) is Verdict.ACCEPT


def test_validation_time_boundaries():
    key = signing_key("ED25519")
    rrset = a_set()
    rrsig = sign_rrset(rrset, key, POLICY, NOW)
    assert validate_rrsig(rrset, rrsig, key.dnskey, rrsig.expiration) is Verdict.ACCEPT
    assert validate_rrsig(rrset, rrsig, key.dnskey, rrsig.expiration + 1) is Verdict.EXPIRED
    assert validate_rrsig(rrset, rrsig, key.dnskey, rrsig.inception) is Verdict.ACCEPT
    assert validate_rrsig(rrset, rrsig, key.dnskey, rrsig.inception - 1) is Verdict.NOT_YET_VALID


def test_validation_across_serial_wrap():
    key = signing_key("ED25519")
    rrset = a_set()
    near_wrap = 0xFFFFFFFF - 100
    rrsig = sign_rrset(rrset, key, ValidityPolicy(backdate=0, lifetime=1000), near_wrap)
    assert rrsig.expiration < rrsig.inception  # numerically wrapped
    assert validate_rrsig(rrset, rrsig, key.dnskey, (near_wrap + 500) & 0xFFFFFFFF) is Verdict.ACCEPT


def test_validation_reasons():
    key = signing_key("ED25519")
    rrset = a_set()
    rrsig = sign_rrset(rrset, key, POLICY, NOW)
    other = signing_key("ED25519", tag="other")
    assert validate_rrsig(rrset, rrsig, other.dnskey, NOW) in (Verdict.KEY_TAG_MISMATCH, Verdict.BAD_SIGNATURE)
    assert validate_rrsig(rrset, replace(rrsig, key_tag=other.key_tag), other.dnskey, NOW) is Verdict.BAD_SIGNATURE
    assert validate_rrsig(rrset, replace(rrsig, algorithm=13), key.dnskey, NOW) is Verdict.ALGORITHM_MISMATCH
    flipped = Rrset.of(rrset.name, RRType.A, rrset.ttl, [a_rdata("10.0.0.9")])
    assert validate_rrsig(flipped, rrsig, key.dnskey, NOW) is Verdict.BAD_SIGNATURE
    # a cache may have decremented the TTL: the original TTL is what counts
    assert validate_rrsig(rrset.with_ttl(17), rrsig, key.dnskey, NOW) is Verdict.ACCEPT


def test_unsupported_algorithm_reported():
    key = signing_key("ED25519")
    rrset = a_set()
    rrsig = sign_rrset(rrset, key, POLICY, NOW)
    reg = algoreg.default_registry().with_overrides({"ED25519": 201})
    assert validate_rrsig(rrset, rrsig, key.dnskey, NOW, reg) is Verdict.UNSUPPORTED_ALGORITHM


rr_owners = st.lists(st.sampled_from(["www", "a", "b.c", "Mail", "x-1"]), max_size=2).map(
    lambda parts: Name.from_text(".".join(parts + ["mysig.com."])))


@pytest.mark.parametrize("mnemonic", FAST)
@settings(max_examples=10, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(owner=rr_owners, strings=st.lists(st.binary(min_size=1, max_size=60), min_size=1, max_size=4, unique=True),
       ttl=st.integers(0, 86400))
def test_property_round_trip_random_rrsets(mnemonic, owner, strings, ttl):
    key = signing_key(mnemonic)
    rrset = Rrset.of(owner, RRType.TXT, ttl, [txt_rdata([s]) for s in strings])
    rrsig = sign_rrset(rrset, key, POLICY, NOW)
    assert validate_rrsig(rrset, rrsig, key.dnskey, NOW) is Verdict.ACCEPT
    # permuting rdata and changing owner case does not matter
    recased = Name(tuple(lbl.swapcase() for lbl in owner.labels))
    perm = Rrset.of(recased, RRType.TXT, ttl, list(reversed(rrset.rdatas)))
    assert validate_rrsig(perm, rrsig, key.dnskey, NOW) is Verdict.ACCEPT


# --------------------------------------------------------------------------- responses


def answered(qname="mysig.com.", rrtype=RRType.A, do=True, records=None):
    q = make_query(qname, rrtype, msg_id=7, do=do)
    answer = tuple(records if records is not None else a_set(qname).records())
    return Message(id=7, flags=Flag.QR | Flag.AA, questions=q.questions, answer=answer, edns=q.edns)


def test_one_rrsig_per_rrset_per_key():
    key = signing_key("MLDSA44")
    out = sign_response(answered(), [key], POLICY, NOW)
    types = [rr.rrtype for rr in out.answer]
    assert types == [RRType.A, RRType.RRSIG]
    assert not out.has(Flag.AD)
    two = sign_response(answered(), [key, signing_key("MLDSA44", tag="second")], POLICY, NOW)
    assert [rr.rrtype for rr in two.answer] == [RRType.A, RRType.RRSIG, RRType.RRSIG]


def test_no_do_bit_returns_response_unchanged():
    msg = answered(do=False)
    assert sign_response(msg, [signing_key("ED25519")], POLICY, NOW) is msg


def test_dnskey_response_self_consistent():
    from pqdnssec.keystore import dnskey_rrset

    key = signing_key("FALCON512")
    msg = answered(rrtype=RRType.DNSKEY, records=dnskey_rrset([key], 3600).records())
    out = sign_response(msg, [key], POLICY, NOW)
    rrsig = RrsigRecord.from_rdata(out.answer[1].rdata)
    assert rrsig.signer_name == ZONE and rrsig.type_covered == RRType.DNSKEY
    wire = decode_message(encode_message(out))
    report = validate_response(wire, [key.dnskey], NOW)
    assert report.overall


def test_authority_section_signed_and_out_of_zone_left_alone():
    key = signing_key("ED25519")
    msg = replace(answered(), authority=tuple(a_set("ns.mysig.com.").records()),
                  additional=tuple(a_set("glue.example.org.").records()))
    out = sign_response(msg, [key], POLICY, NOW)
    assert [rr.rrtype for rr in out.authority] == [RRType.A, RRType.RRSIG]
    assert [rr.rrtype for rr in out.additional] == [RRType.A]


def test_signing_failure_becomes_servfail(monkeypatch):
    def boom(key, message):
        raise algoreg.ProviderError("provider crashed")

    monkeypatch.setattr(algoreg, "sign", boom)
    out = sign_response(answered(), [signing_key("ED25519")], POLICY, NOW)
    assert out.rcode == Rcode.SERVFAIL and out.answer == ()


def test_keyring_picks_closest_zone():
    parent = signing_key("ED25519")
    child_zone = Name.from_text("sub.mysig.com.")
    child = signing_key("ED25519", zone=child_zone)
    ring = Keyring.of([parent, child])
    assert ring.keys_for(Name.from_text("www.sub.mysig.com.")) == (child,)
    assert ring.keys_for(Name.from_text("www.mysig.com.")) == (parent,)
    assert ring.keys_for(Name.from_text("example.org.")) == ()


def test_sign_response_concurrent():
    key = signing_key("MLDSA44")
    errors = []

    def worker():
        try:
            for _ in range(5):
                out = sign_response(answered(), [key], POLICY, NOW)
                assert validate_response(out, [key.dnskey], NOW).overall
        except Exception as exc:  # surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []


# --------------------------------------------------------------------------- cache


class CountingSign:
    def __init__(self, monkeypatch):
        self.calls = 0
        real = algoreg.sign

        def counted(key, message):
            self.calls += 1
            return real(key, message)

        monkeypatch.setattr(algoreg, "sign", counted)


def test_cache_hit_skips_provider(monkeypatch):
    counter = CountingSign(monkeypatch)
    cache = SignatureCache(maxsize=8, refresh_threshold=3600)
    key = signing_key("ED25519")
    sign_response(answered(), [key], POLICY, NOW, cache)
    first = counter.calls
    sign_response(answered(), [key], POLICY, NOW + 1, cache)
    assert first == 1 and counter.calls == first
    assert cache.hits == 1


def test_cache_disabled_signs_every_time(monkeypatch):
    counter = CountingSign(monkeypatch)
    key = signing_key("ED25519")
    for _ in range(3):
        signature_cache_get_or_sign(a_set(), key, POLICY, NOW)
    assert counter.calls == 3


def test_cache_refreshes_near_expiry(monkeypatch):
    counter = CountingSign(monkeypatch)
    cache = SignatureCache(maxsize=8, refresh_threshold=86400)
    key = signing_key("ED25519")
    cache.get_or_sign(a_set(), key, POLICY, NOW)
    cache.get_or_sign(a_set(), key, POLICY, NOW + POLICY.lifetime - 86400 + 1)
    assert counter.calls == 2


def test_cache_is_bounded_lru():
    cache = SignatureCache(maxsize=2, refresh_threshold=0)
    key = signing_key("ED25519")
    for i in range(4):
        cache.get_or_sign(a_set(addrs=(f"10.0.0.{i}",)), key, POLICY, NOW)
    assert len(cache) == 2
