"""DNS wire format: names, records, RRsets and whole messages.

Encoding never applies name compression, so encoded sizes are exactly the sum of
the field widths. Decoding accepts compressed input. Canonical forms follow
RFC 4034 section 6 (lowercased, uncompressed owner names; RDATA sorted bytewise).
"""

from __future__ import annotations

import base64
import enum
import ipaddress
import struct
import time
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

MAX_LABEL = 63
MAX_NAME = 255
MAX_MESSAGE = 65535
HEADER_LEN = 12


class WireError(ValueError):
    """Malformed or unencodable DNS data."""


class RRType(enum.IntEnum):
    A = 1
    NS = 2
    CNAME = 5
    SOA = 6
    PTR = 12
    MX = 15
    TXT = 16
    AAAA = 28
    DNAME = 39
    OPT = 41
    RRSIG = 46
    DNSKEY = 48
    ANY = 255

    @classmethod
    def parse(cls, text: str) -> int:
        text = text.upper()
        if text in cls.__members__:
            return cls[text]
        if text.startswith("TYPE") and text[4:].isdigit():
            return int(text[4:])
        raise WireError(f"unknown RR type {text!r}")

    @classmethod
    def mnemonic(cls, value: int) -> str:
        try:
            return cls(value).name
        except ValueError:
            return f"TYPE{value}"


class RRClass(enum.IntEnum):
    IN = 1
    ANY = 255


class Opcode(enum.IntEnum):
    QUERY = 0
    NOTIFY = 4
    UPDATE = 5


class Rcode(enum.IntEnum):
    NOERROR = 0
    FORMERR = 1
    SERVFAIL = 2
    NXDOMAIN = 3
    NOTIMP = 4
    REFUSED = 5
    BADVERS = 16


class Flag(enum.IntFlag):
    QR = 0x8000
    AA = 0x0400
    TC = 0x0200
    RD = 0x0100
    RA = 0x0080
    AD = 0x0020
    CD = 0x0010


EDNS_DO = 0x8000

# types whose RDATA is made of (or starts with) domain names; these get decompressed
# on decode and lowercased in canonical form
_NAME_RDATA = {RRType.NS, RRType.CNAME, RRType.PTR, RRType.DNAME}


# --------------------------------------------------------------------------- names


@dataclass(frozen=True, eq=False)
class Name:
    """An absolute domain name as a tuple of raw labels (root is the empty tuple).

    Equality and hashing are case-insensitive; the original case is kept for encoding.
    """

    labels: tuple[bytes, ...] = ()

    def __post_init__(self):
        total = 1
        for label in self.labels:
            if not 1 <= len(label) <= MAX_LABEL:
                raise WireError(f"label length {len(label)} outside 1..{MAX_LABEL}")
            total += len(label) + 1
        if total > MAX_NAME:
            raise WireError(f"name length {total} exceeds {MAX_NAME}")

    @classmethod
    def from_text(cls, text: str, origin: Name | None = None) -> Name:
        """Parse presentation form. Relative names (no trailing dot) are joined to ``origin``."""
        if text in (".", ""):
            return ROOT
        if text == "@":
            if origin is None:
                raise WireError("'@' needs an origin")
            return origin
        # the final dot is escaped only when an odd run of backslashes precedes it
        body = text[:-1]
        absolute = text.endswith(".") and (len(body) - len(body.rstrip("\\"))) % 2 == 0
        labels = _split_labels(text[:-1] if absolute else text)
        name = cls(tuple(labels))
        if not absolute:
            if origin is None:
                origin = ROOT
            name = cls(name.labels + origin.labels)
        return name

    def to_text(self) -> str:
        if not self.labels:
            return "."
        return "".join(_escape_label(label) + "." for label in self.labels)

    def to_wire(self) -> bytes:
        return b"".join(bytes([len(label)]) + label for label in self.labels) + b"\x00"

    def canonical(self) -> Name:
        return Name(tuple(label.lower() for label in self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    def wire_length(self) -> int:
        return sum(len(label) + 1 for label in self.labels) + 1

    def is_subdomain(self, other: Name) -> bool:
        """True if self is at or below ``other``."""
        n = len(other.labels)
        if n > len(self.labels):
            return False
        return n == 0 or _fold(self.labels[-n:]) == _fold(other.labels)

    def parent(self) -> Name:
        if not self.labels:
            raise WireError("root has no parent")
        return Name(self.labels[1:])

    def _key(self) -> tuple[bytes, ...]:
        return _fold(self.labels)

    def __eq__(self, other):
        if not isinstance(other, Name):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __str__(self):
        return self.to_text()

    def __repr__(self):
        return f"Name({self.to_text()!r})"


ROOT = Name(())


def _fold(labels: Iterable[bytes]) -> tuple[bytes, ...]:
    return tuple(label.lower() for label in labels)


def _split_labels(text: str) -> list[bytes]:
    labels: list[bytes] = []
    cur = bytearray()
    i = 0
    while i < len(text):
        c = text[i]
        if c == "\\":
            if i + 3 < len(text) and text[i + 1 : i + 4].isdigit():
                value = int(text[i + 1 : i + 4])
                if value > 255:
                    raise WireError(f"bad escape in {text!r}")
                cur.append(value)
                i += 4
                continue
            if i + 1 >= len(text):
                raise WireError(f"dangling escape in {text!r}")
            cur += text[i + 1].encode("ascii")
            i += 2
            continue
        if c == ".":
            if not cur:
                raise WireError(f"empty label in {text!r}")
            labels.append(bytes(cur))
            cur = bytearray()
        else:
            try:
                cur += c.encode("ascii")
            except UnicodeEncodeError:
                raise WireError(f"non-ASCII name {text!r}") from None
        i += 1
    if not cur:
        raise WireError(f"empty label in {text!r}")
    labels.append(bytes(cur))
    return labels


def _escape_label(label: bytes) -> str:
    out = []
    for b in label:
        if b in b".\\\"();@$":
            out.append("\\" + chr(b))
        elif 0x21 <= b <= 0x7E:
            out.append(chr(b))
        else:
            out.append(f"\\{b:03d}")
    return "".join(out)


def canonical_name(name: Name) -> bytes:
    """Uncompressed wire form with ASCII A-Z folded to lowercase."""
    return name.canonical().to_wire()


# --------------------------------------------------------------------------- records


@dataclass(frozen=True)
class Question:
    name: Name
    rrtype: int
    rrclass: int = RRClass.IN

    def to_wire(self) -> bytes:
        return self.name.to_wire() + struct.pack("!HH", self.rrtype, self.rrclass)


@dataclass(frozen=True)
class ResourceRecord:
    name: Name
    rrtype: int
    rrclass: int
    ttl: int
    rdata: bytes

    def __post_init__(self):
        if len(self.rdata) > 0xFFFF:
            raise WireError("rdata longer than 65535 bytes")
        if not 0 <= self.ttl <= 0xFFFFFFFF:
            raise WireError(f"ttl {self.ttl} out of range")

    def to_wire(self) -> bytes:
        return (
            self.name.to_wire()
            + struct.pack("!HHIH", self.rrtype, self.rrclass, self.ttl, len(self.rdata))
            + self.rdata
        )

    def to_text(self) -> str:
        return (
            f"{self.name.to_text()}\t{self.ttl}\t{_class_text(self.rrclass)}\t"
            f"{RRType.mnemonic(self.rrtype)}\t{rdata_to_text(self.rrtype, self.rdata)}"
        )


@dataclass(frozen=True)
class Rrset:
    """Records sharing owner, type and class. Build with :meth:`from_records` or :meth:`of`."""

    name: Name
    rrtype: int
    rrclass: int
    ttl: int
    rdatas: tuple[bytes, ...]

    def __post_init__(self):
        if not self.rdatas:
            raise WireError("empty RRset")
        seen = set()
        for rdata in self.rdatas:
            key = _canonical_rdata(self.rrtype, rdata)
            if key in seen:
                raise WireError(f"duplicate rdata in {self.name} {RRType.mnemonic(self.rrtype)} RRset")
            seen.add(key)

    @classmethod
    def of(cls, name: Name, rrtype: int, ttl: int, rdatas: Sequence[bytes], rrclass: int = RRClass.IN) -> Rrset:
        return cls(name, rrtype, rrclass, ttl, tuple(rdatas))

    @classmethod
    def from_records(cls, records: Sequence[ResourceRecord]) -> Rrset:
        """Group records into one RRset; the TTL becomes the minimum member TTL."""
        if not records:
            raise WireError("empty RRset")
        first = records[0]
        for rr in records[1:]:
            if rr.name != first.name or rr.rrtype != first.rrtype or rr.rrclass != first.rrclass:
                raise WireError("records do not share owner, type and class")
        return cls(first.name, first.rrtype, first.rrclass, min(rr.ttl for rr in records),
                   tuple(rr.rdata for rr in records))

    def records(self) -> list[ResourceRecord]:
        return [ResourceRecord(self.name, self.rrtype, self.rrclass, self.ttl, rd) for rd in self.rdatas]

    def with_ttl(self, ttl: int) -> Rrset:
        return replace(self, ttl=ttl)


def group_rrsets(records: Iterable[ResourceRecord]) -> list[Rrset]:
    """Group a section's records into RRsets in first-seen order. RRSIGs are kept apart
    by the type they cover so each covered set gets its own RRSIG group."""
    groups: dict[tuple, list[ResourceRecord]] = {}
    for rr in records:
        if rr.rrtype == RRType.OPT:
            continue
        key = (rr.name, rr.rrtype, rr.rrclass)
        if rr.rrtype == RRType.RRSIG and len(rr.rdata) >= 2:
            key += (struct.unpack("!H", rr.rdata[:2])[0],)
        bucket = groups.setdefault(key, [])
        if all(_canonical_rdata(rr.rrtype, x.rdata) != _canonical_rdata(rr.rrtype, rr.rdata) for x in bucket):
            bucket.append(rr)
    return [Rrset.from_records(rrs) for rrs in groups.values()]


def _canonical_rdata(rrtype: int, rdata: bytes) -> bytes:
    if rrtype in _NAME_RDATA:
        name, _ = _read_name(rdata, 0)
        return canonical_name(name)
    if rrtype == RRType.MX and len(rdata) > 2:
        name, _ = _read_name(rdata, 2)
        return rdata[:2] + canonical_name(name)
    if rrtype == RRType.SOA:
        mname, off = _read_name(rdata, 0)
        rname, off = _read_name(rdata, off)
        return canonical_name(mname) + canonical_name(rname) + rdata[off:]
    return rdata


def canonical_rrset(rrset: Rrset) -> bytes:
    """RFC 4034 canonical RRset: per-record (owner, type, class, TTL, rdlength, rdata)
    tuples with lowercase owner, sorted by canonical RDATA."""
    owner = canonical_name(rrset.name)
    head = owner + struct.pack("!HHI", rrset.rrtype, rrset.rrclass, rrset.ttl)
    rdatas = sorted(_canonical_rdata(rrset.rrtype, rd) for rd in rrset.rdatas)
    return b"".join(head + struct.pack("!H", len(rd)) + rd for rd in rdatas)


# --------------------------------------------------------------------------- messages


@dataclass(frozen=True)
class Edns:
    """The OPT pseudo-record: payload size, DO bit, and whatever else came with it."""

    payload: int = 1232
    do: bool = False
    ext_rcode: int = 0
    version: int = 0
    z: int = 0  # remaining flag bits besides DO
    options: bytes = b""

    def to_record(self) -> ResourceRecord:
        flags = (EDNS_DO if self.do else 0) | (self.z & 0x7FFF)
        ttl = (self.ext_rcode << 24) | (self.version << 16) | flags
        return ResourceRecord(ROOT, RRType.OPT, self.payload, ttl, self.options)

    @classmethod
    def from_record(cls, rr: ResourceRecord) -> Edns:
        if rr.name != ROOT:
            raise WireError("OPT record owner must be the root")
        flags = rr.ttl & 0xFFFF
        return cls(
            payload=rr.rrclass,
            do=bool(flags & EDNS_DO),
            ext_rcode=rr.ttl >> 24,
            version=(rr.ttl >> 16) & 0xFF,
            z=flags & 0x7FFF,
            options=rr.rdata,
        )


@dataclass(frozen=True)
class Message:
    id: int = 0
    flags: int = 0
    questions: tuple[Question, ...] = ()
    answer: tuple[ResourceRecord, ...] = ()
    authority: tuple[ResourceRecord, ...] = ()
    additional: tuple[ResourceRecord, ...] = ()
    edns: Edns | None = None

    @property
    def question(self) -> Question | None:
        return self.questions[0] if self.questions else None

    @property
    def opcode(self) -> int:
        return (self.flags >> 11) & 0xF

    @property
    def rcode(self) -> int:
        """Full rcode, including the extended bits carried in OPT."""
        ext = self.edns.ext_rcode if self.edns else 0
        return (ext << 4) | (self.flags & 0xF)

    def has(self, flag: Flag) -> bool:
        return bool(self.flags & flag)

    def with_flags(self, set_: int = 0, clear: int = 0) -> Message:
        return replace(self, flags=(self.flags & ~clear | set_) & 0xFFFF)

    def with_rcode(self, rcode: int) -> Message:
        flags = (self.flags & ~0xF) | (rcode & 0xF)
        edns = self.edns
        if edns is not None:
            edns = replace(edns, ext_rcode=rcode >> 4)
        elif rcode > 0xF:
            raise WireError("extended rcode needs EDNS")
        return replace(self, flags=flags, edns=edns)

    @property
    def do(self) -> bool:
        return bool(self.edns and self.edns.do)


def make_query(name: Name | str, rrtype: int, *, msg_id: int = 0, do: bool = False,
               payload: int | None = 1232, rd: bool = False) -> Message:
    if isinstance(name, str):
        name = Name.from_text(name)
    edns = Edns(payload=payload, do=do) if payload is not None else None
    return Message(id=msg_id, flags=Flag.RD if rd else 0,
                   questions=(Question(name, rrtype),), edns=edns)


def encode_message(msg: Message) -> bytes:
    additional = list(msg.additional)
    if msg.edns is not None:
        additional.append(msg.edns.to_record())
    parts = [struct.pack("!HHHHHH", msg.id, msg.flags, len(msg.questions), len(msg.answer),
                         len(msg.authority), len(additional))]
    parts += [q.to_wire() for q in msg.questions]
    for section in (msg.answer, msg.authority, additional):
        parts += [rr.to_wire() for rr in section]
    wire = b"".join(parts)
    if len(wire) > MAX_MESSAGE:
        raise WireError(f"message of {len(wire)} bytes exceeds {MAX_MESSAGE}")
    return wire


def encoded_size(msg: Message) -> int:
    return len(encode_message(msg))


def _need(data: bytes, offset: int, n: int) -> None:
    if offset + n > len(data):
        raise WireError(f"truncated input: need {n} bytes at offset {offset}, have {len(data) - offset}")


def _read_name(data: bytes, offset: int) -> tuple[Name, int]:
    """Read a possibly compressed name; returns (name, offset after the name in place)."""
    labels: list[bytes] = []
    end = None
    pos = offset
    length = 1
    while True:
        _need(data, pos, 1)
        b = data[pos]
        if b & 0xC0 == 0xC0:
            _need(data, pos, 2)
            target = ((b & 0x3F) << 8) | data[pos + 1]
            if end is None:
                end = pos + 2
            # only strictly backward jumps, which rules out loops
            if target >= pos:
                raise WireError(f"compression pointer loop at offset {pos}")
            pos = target
            continue
        if b & 0xC0:
            raise WireError(f"unsupported label type 0x{b:02x} at offset {pos}")
        if b == 0:
            pos += 1
            break
        if b > MAX_LABEL:
            raise WireError(f"label length {b} > {MAX_LABEL}")
        _need(data, pos + 1, b)
        labels.append(data[pos + 1 : pos + 1 + b])
        length += b + 1
        if length > MAX_NAME:
            raise WireError(f"name length exceeds {MAX_NAME}")
        pos += 1 + b
    return Name(tuple(labels)), (end if end is not None else pos)


def _expand_rdata(data: bytes, start: int, rdlen: int, rrtype: int) -> bytes:
    """Copy rdata out of the message, resolving compression in the RFC 1035 name types."""
    rdata = data[start : start + rdlen]
    if rrtype in _NAME_RDATA:
        name, off = _read_name(data, start)
        if off != start + rdlen:
            raise WireError("name rdata does not match rdlength")
        return name.to_wire()
    if rrtype == RRType.MX:
        _need(rdata, 0, 2)
        name, off = _read_name(data, start + 2)
        if off != start + rdlen:
            raise WireError("MX rdata does not match rdlength")
        return rdata[:2] + name.to_wire()
    if rrtype == RRType.SOA:
        mname, off = _read_name(data, start)
        rname, off = _read_name(data, off)
        if off + 20 != start + rdlen:
            raise WireError("bad SOA rdata length")
        return mname.to_wire() + rname.to_wire() + data[off : off + 20]
    return rdata


def decode_message(data: bytes) -> Message:
    if not data:
        raise WireError("empty input")
    _need(data, 0, HEADER_LEN)
    msg_id, flags, qd, an, ns, ar = struct.unpack("!HHHHHH", data[:HEADER_LEN])
    off = HEADER_LEN
    questions = []
    for _ in range(qd):
        name, off = _read_name(data, off)
        _need(data, off, 4)
        rrtype, rrclass = struct.unpack("!HH", data[off : off + 4])
        off += 4
        questions.append(Question(name, rrtype, rrclass))
    sections: list[list[ResourceRecord]] = [[], [], []]
    for idx, count in enumerate((an, ns, ar)):
        for _ in range(count):
            name, off = _read_name(data, off)
            _need(data, off, 10)
            rrtype, rrclass, ttl, rdlen = struct.unpack("!HHIH", data[off : off + 10])
            off += 10
            _need(data, off, rdlen)
            rdata = _expand_rdata(data, off, rdlen, rrtype)
            off += rdlen
            sections[idx].append(ResourceRecord(name, rrtype, rrclass, ttl, rdata))
    if off != len(data):
        raise WireError(f"{len(data) - off} trailing bytes after message")
    edns = None
    additional = []
    for rr in sections[2]:
        if rr.rrtype == RRType.OPT:
            if edns is not None:
                raise WireError("more than one OPT record")
            edns = Edns.from_record(rr)
        else:
            additional.append(rr)
    return Message(msg_id, flags, tuple(questions), tuple(sections[0]), tuple(sections[1]),
                   tuple(additional), edns)


def peek_id(data: bytes) -> int | None:
    return struct.unpack("!H", data[:2])[0] if len(data) >= 2 else None


# --------------------------------------------------------------------------- rdata helpers


def a_rdata(text: str) -> bytes:
    return ipaddress.IPv4Address(text).packed


def aaaa_rdata(text: str) -> bytes:
    return ipaddress.IPv6Address(text).packed


def txt_rdata(strings: Sequence[bytes]) -> bytes:
    out = bytearray()
    for s in strings:
        if len(s) > 255:
            raise WireError("TXT character-string longer than 255 bytes")
        out.append(len(s))
        out += s
    return bytes(out)


def _txt_strings(rdata: bytes) -> list[bytes]:
    strings, off = [], 0
    while off < len(rdata):
        n = rdata[off]
        _need(rdata, off + 1, n)
        strings.append(rdata[off + 1 : off + 1 + n])
        off += 1 + n
    return strings


def _quote(s: bytes) -> str:
    out = []
    for b in s:
        if b in b'"\\':
            out.append("\\" + chr(b))
        elif 0x20 <= b <= 0x7E:
            out.append(chr(b))
        else:
            out.append(f"\\{b:03d}")
    return '"' + "".join(out) + '"'


def _class_text(rrclass: int) -> str:
    try:
        return RRClass(rrclass).name
    except ValueError:
        return f"CLASS{rrclass}"


def rdata_to_text(rrtype: int, rdata: bytes) -> str:
    """Presentation form for the types this package understands; RFC 3597 otherwise."""
    try:
        if rrtype == RRType.A and len(rdata) == 4:
            return str(ipaddress.IPv4Address(rdata))
        if rrtype == RRType.AAAA and len(rdata) == 16:
            return str(ipaddress.IPv6Address(rdata))
        if rrtype == RRType.TXT:
            return " ".join(_quote(s) for s in _txt_strings(rdata))
        if rrtype in _NAME_RDATA:
            return _read_name(rdata, 0)[0].to_text()
        if rrtype == RRType.DNSKEY and len(rdata) >= 4:
            flags, proto, alg = struct.unpack("!HBB", rdata[:4])
            return f"{flags} {proto} {alg} {base64.b64encode(rdata[4:]).decode()}"
        if rrtype == RRType.RRSIG and len(rdata) >= 18:
            covered, alg, labels, ottl, exp, inc, tag = struct.unpack("!HBBIIIH", rdata[:18])
            signer, off = _read_name(rdata, 18)
            return (f"{RRType.mnemonic(covered)} {alg} {labels} {ottl} {format_time(exp)} "
                    f"{format_time(inc)} {tag} {signer.to_text()} {base64.b64encode(rdata[off:]).decode()}")
    except WireError:
        pass
    return f"\\# {len(rdata)} {rdata.hex()}" if rdata else "\\# 0"


def format_time(ts: int) -> str:
    return time.strftime("%Y%m%d%H%M%S", time.gmtime(ts))


def read_name(data: bytes, offset: int = 0) -> tuple[Name, int]:
    """Public wrapper for reading an uncompressed-or-compressed name from ``data``."""
    return _read_name(data, offset)


# TCP framing


def frame(wire: bytes) -> bytes:
    if len(wire) > MAX_MESSAGE:
        raise WireError("message too large for TCP framing")
    return struct.pack("!H", len(wire)) + wire


__all__ = [
    "WireError", "RRType", "RRClass", "Opcode", "Rcode", "Flag", "Name", "ROOT", "Question",
    "ResourceRecord", "Rrset", "Edns", "Message", "canonical_name", "canonical_rrset",
    "encode_message", "decode_message", "encoded_size", "make_query", "group_rrsets",
    "rdata_to_text", "a_rdata", "aaaa_rdata", "txt_rdata", "frame", "read_name",
]
