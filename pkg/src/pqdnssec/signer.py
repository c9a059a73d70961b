"""On-the-fly RRSIG generation and RRSIG validation (RFC 4034 semantics)."""

from __future__ import annotations

import enum
import hashlib
import logging
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from . import algoreg
from .algoreg import AlgorithmError, Registry, default_registry
from .keystore import DnskeyRecord, SigningKey
from .wire import (
    Message, Name, Rcode, ResourceRecord, RRType, Rrset, WireError, Flag,
    canonical_name, canonical_rrset, group_rrsets, read_name,
)

log = logging.getLogger(__name__)

RRSIG_PREFIX_LEN = 18
DEFAULT_BACKDATE = 3600
DEFAULT_LIFETIME = 14 * 86400


class SigningError(Exception):
    """An RRset could not be signed."""


# --------------------------------------------------------------------------- serial arithmetic


def serial_lt(a: int, b: int) -> bool:
    """RFC 1982 ``a < b`` on 32-bit serials."""
    a &= 0xFFFFFFFF
    b &= 0xFFFFFFFF
    return a != b and ((b - a) & 0xFFFFFFFF) < 0x80000000


def serial_le(a: int, b: int) -> bool:
    return (a & 0xFFFFFFFF) == (b & 0xFFFFFFFF) or serial_lt(a, b)


# --------------------------------------------------------------------------- types


@dataclass(frozen=True)
class RrsigRecord:
    type_covered: int
    algorithm: int
    labels: int
    original_ttl: int
    expiration: int
    inception: int
    key_tag: int
    signer_name: Name
    signature: bytes = b""

    def __post_init__(self):
        if not serial_lt(self.inception, self.expiration):
            raise ValueError("RRSIG inception must precede expiration")

    def prefix(self) -> bytes:
        """RDATA through the canonical signer name, i.e. everything but the signature."""
        return struct.pack(
            "!HBBIIIH", self.type_covered, self.algorithm, self.labels, self.original_ttl,
            self.expiration & 0xFFFFFFFF, self.inception & 0xFFFFFFFF, self.key_tag,
        ) + canonical_name(self.signer_name)

    def to_rdata(self) -> bytes:
        return self.prefix() + self.signature

    @classmethod
    def from_rdata(cls, rdata: bytes) -> RrsigRecord:
        if len(rdata) < RRSIG_PREFIX_LEN + 1:
            raise WireError("RRSIG rdata too short")
        fields = struct.unpack("!HBBIIIH", rdata[:RRSIG_PREFIX_LEN])
        signer, off = read_name(rdata, RRSIG_PREFIX_LEN)
        try:
            return cls(*fields, signer_name=signer, signature=rdata[off:])
        except ValueError as exc:
            raise WireError(str(exc)) from exc

    def to_record(self, owner: Name, rrclass: int, ttl: int) -> ResourceRecord:
        return ResourceRecord(owner, RRType.RRSIG, rrclass, ttl, self.to_rdata())


@dataclass(frozen=True)
class ValidityPolicy:
    backdate: int = DEFAULT_BACKDATE
    lifetime: int = DEFAULT_LIFETIME

    def __post_init__(self):
        if self.backdate < 0:
            raise ValueError("backdate must be >= 0")
        if self.lifetime <= 0:
            raise ValueError("lifetime must be > 0")


class Verdict(str, enum.Enum):
    ACCEPT = "accept"
    KEY_TAG_MISMATCH = "key-tag-mismatch"
    ALGORITHM_MISMATCH = "algorithm-mismatch"
    EXPIRED = "expired"
    NOT_YET_VALID = "not-yet-valid"
    BAD_SIGNATURE = "bad-signature"
    UNSUPPORTED_ALGORITHM = "unsupported-algorithm"

    @property
    def ok(self) -> bool:
        return self is Verdict.ACCEPT


# --------------------------------------------------------------------------- signing


def owner_labels(name: Name) -> int:
    labels = name.labels
    return len(labels) - 1 if labels and labels[0] == b"*" else len(labels)


def rrsig_signed_data(rrsig: RrsigRecord, rrset: Rrset) -> bytes:
    if rrsig.type_covered != rrset.rrtype:
        raise ValueError(f"RRSIG covers type {rrsig.type_covered}, RRset is type {rrset.rrtype}")
    if rrsig.original_ttl != rrset.ttl:
        raise ValueError(f"RRSIG original TTL {rrsig.original_ttl} differs from RRset TTL {rrset.ttl}")
    return rrsig.prefix() + canonical_rrset(rrset)


def sign_rrset(rrset: Rrset, key: SigningKey, policy: ValidityPolicy, now: int) -> RrsigRecord:
    if not rrset.name.is_subdomain(key.owner):
        raise SigningError(f"{rrset.name} is outside zone {key.owner}")
    template = RrsigRecord(
        type_covered=rrset.rrtype,
        algorithm=key.dnskey.algorithm,
        labels=owner_labels(rrset.name),
        original_ttl=rrset.ttl,
        expiration=(now + policy.lifetime) & 0xFFFFFFFF,
        inception=(now - policy.backdate) & 0xFFFFFFFF,
        key_tag=key.key_tag,
        signer_name=key.owner,
    )
    try:
        sig = algoreg.sign(key.keypair, rrsig_signed_data(template, rrset))
    except AlgorithmError as exc:
        raise SigningError(f"{key.algorithm.mnemonic}: {exc}") from exc
    return replace(template, signature=sig)


def validate_rrsig(rrset: Rrset, rrsig: RrsigRecord, dnskey: DnskeyRecord, now: int,
                   registry: Registry | None = None) -> Verdict:
    if rrsig.key_tag != dnskey.key_tag:
        return Verdict.KEY_TAG_MISMATCH
    if rrsig.algorithm != dnskey.algorithm:
        return Verdict.ALGORITHM_MISMATCH
    if serial_lt(now, rrsig.inception):
        return Verdict.NOT_YET_VALID
    if serial_lt(rrsig.expiration, now):
        return Verdict.EXPIRED
    registry = registry or default_registry()
    try:
        alg = registry.by_code(rrsig.algorithm, dnskey.public_key)
    except algoreg.UnknownAlgorithm:
        return Verdict.UNSUPPORTED_ALGORITHM
    if rrsig.type_covered != rrset.rrtype or rrsig.labels > len(rrset.name):
        return Verdict.BAD_SIGNATURE
    # validators sign over the original TTL, not whatever a cache decremented it to
    data = rrsig_signed_data(rrsig, rrset.with_ttl(rrsig.original_ttl))
    if algoreg.verify(alg, dnskey.public_key, data, rrsig.signature):
        return Verdict.ACCEPT
    return Verdict.BAD_SIGNATURE


# --------------------------------------------------------------------------- cache


class SignatureCache:
    """Bounded LRU of RRSIGs keyed by (canonical RRset digest, key tag, algorithm).

    An entry is served while more than ``refresh_threshold`` seconds of validity remain.
    """

    def __init__(self, maxsize: int = 4096, refresh_threshold: int = 86400):
        if maxsize <= 0:
            raise ValueError("cache maxsize must be positive")
        self.maxsize = maxsize
        self.refresh_threshold = refresh_threshold
        self._entries: OrderedDict[tuple, RrsigRecord] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._entries)

    @staticmethod
    def _key(rrset: Rrset, key: SigningKey) -> tuple:
        return hashlib.sha256(canonical_rrset(rrset)).digest(), key.key_tag, key.dnskey.algorithm

    def get_or_sign(self, rrset: Rrset, key: SigningKey, policy: ValidityPolicy, now: int) -> RrsigRecord:
        k = self._key(rrset, key)
        with self._lock:
            hit = self._entries.get(k)
            if hit is not None and serial_lt(now + self.refresh_threshold, hit.expiration):
                self._entries.move_to_end(k)
                self.hits += 1
                return hit
            self.misses += 1
        rrsig = sign_rrset(rrset, key, policy, now)
        with self._lock:
            self._entries[k] = rrsig
            self._entries.move_to_end(k)
            while len(self._entries) > self.maxsize:
                self._entries.popitem(last=False)
        return rrsig


def signature_cache_get_or_sign(rrset: Rrset, key: SigningKey, policy: ValidityPolicy, now: int,
                                cache: SignatureCache | None = None) -> RrsigRecord:
    if cache is None:
        return sign_rrset(rrset, key, policy, now)
    return cache.get_or_sign(rrset, key, policy, now)


# --------------------------------------------------------------------------- responses


class Keyring:
    """Zone apex to signing keys; immutable once built."""

    def __init__(self, zones: Mapping[Name, Sequence[SigningKey]]):
        self._zones = {apex: tuple(keys) for apex, keys in zones.items()}
        for apex, keys in self._zones.items():
            for k in keys:
                if k.owner != apex:
                    raise ValueError(f"key {k.key_tag} belongs to {k.owner}, not {apex}")

    @classmethod
    def of(cls, keys: Iterable[SigningKey]) -> Keyring:
        zones: dict[Name, list[SigningKey]] = {}
        for k in keys:
            zones.setdefault(k.owner, []).append(k)
        return cls(zones)

    def keys_for(self, owner: Name) -> tuple[SigningKey, ...]:
        """Keys of the closest enclosing zone."""
        best: Name | None = None
        for apex in self._zones:
            if owner.is_subdomain(apex) and (best is None or len(apex) > len(best)):
                best = apex
        return self._zones[best] if best is not None else ()

    def zones(self) -> list[Name]:
        return list(self._zones)


def _sign_section(records: Sequence[ResourceRecord], keyring: Keyring, policy: ValidityPolicy,
                  now: int, cache: SignatureCache | None) -> tuple[ResourceRecord, ...]:
    out: list[ResourceRecord] = []
    for rrset in group_rrsets(records):
        out.extend(rrset.records())
        if rrset.rrtype == RRType.RRSIG:
            continue
        for key in keyring.keys_for(rrset.name):
            rrsig = signature_cache_get_or_sign(rrset, key, policy, now, cache)
            out.append(rrsig.to_record(rrset.name, rrset.rrclass, rrset.ttl))
    return tuple(out)


def sign_response(msg: Message, keys: Keyring | Iterable[SigningKey], policy: ValidityPolicy,
                  now: int, cache: SignatureCache | None = None) -> Message:
    """Attach one RRSIG per zone key after every answer and authority RRset.

    Responses without DO are returned untouched. Any signing failure turns the whole
    response into SERVFAIL with empty sections, never an unsigned answer.
    """
    if not msg.do:
        return msg
    keyring = keys if isinstance(keys, Keyring) else Keyring.of(keys)
    try:
        answer = _sign_section(msg.answer, keyring, policy, now, cache)
        authority = _sign_section(msg.authority, keyring, policy, now, cache)
    except (SigningError, AlgorithmError, WireError) as exc:
        log.error("signing failed, answering SERVFAIL: %s", exc)
        failed = replace(msg, answer=(), authority=(), additional=())
        return failed.with_flags(clear=Flag.AD | Flag.AA).with_rcode(Rcode.SERVFAIL)
    return replace(msg, answer=answer, authority=authority).with_flags(clear=Flag.AD)
