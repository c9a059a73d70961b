"""dig-style query tool with client-side DNSSEC validation and precise latency."""

from __future__ import annotations

import enum
import json
import random
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .algoreg import Registry, default_registry
from .keystore import DnskeyRecord, read_dnskey_file
from .signer import RrsigRecord, Verdict, validate_rrsig
from .wire import (
    Flag, Message, Name, Opcode, Rcode, RRType, Rrset, WireError,
    decode_message, encode_message, format_time, group_rrsets, make_query, rdata_to_text,
)

UDP = "udp"
TCP = "tcp"
DEFAULT_BUFSIZE = 1232


class QueryError(Exception):
    """Network failure or no matching response before the timeout."""


class QueryTimeout(QueryError, TimeoutError):
    pass


@dataclass(frozen=True)
class QueryResult:
    response: Message
    transport_used: str
    wire_size: int
    latency_us: float
    retried: bool = False
    wire: bytes = field(default=b"", repr=False)

    @property
    def latency(self) -> float:
        return self.latency_us


SocketFactory = Callable[[int, int], socket.socket]


def _deadline_left(deadline: float) -> float:
    left = deadline - time.monotonic()
    if left <= 0:
        raise QueryTimeout("no response before timeout")
    return left


def _matches(resp: Message, query: Message) -> bool:
    if resp.id != query.id or not resp.has(Flag.QR):
        return False
    # FORMERR replies may omit the question
    if not resp.questions and resp.rcode == Rcode.FORMERR:
        return True
    q, r = query.question, resp.question
    return r is not None and r.name == q.name and r.rrtype == q.rrtype and r.rrclass == q.rrclass


def _udp_exchange(wire: bytes, query: Message, addr, deadline: float, factory: SocketFactory):
    sock = factory(socket.AF_INET6 if ":" in addr[0] else socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.connect(addr)
        sock.send(wire)
        while True:
            sock.settimeout(_deadline_left(deadline))
            try:
                data = sock.recv(65535)
            except socket.timeout:
                raise QueryTimeout(f"UDP query to {addr[0]}:{addr[1]} timed out") from None
            try:
                resp = decode_message(data)
            except WireError:
                continue  # garbage counts toward the timeout, keep waiting
            if _matches(resp, query):
                return resp, data
    finally:
        sock.close()


def _recv_exact(sock: socket.socket, n: int, deadline: float) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        sock.settimeout(_deadline_left(deadline))
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            raise QueryTimeout("TCP read timed out") from None
        if not chunk:
            raise QueryError("server closed the TCP connection")
        buf += chunk
    return bytes(buf)


def _tcp_exchange(wire: bytes, query: Message, addr, deadline: float, factory: SocketFactory):
    sock = factory(socket.AF_INET6 if ":" in addr[0] else socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.settimeout(_deadline_left(deadline))
        try:
            sock.connect(addr)
        except socket.timeout:
            raise QueryTimeout("TCP connect timed out") from None
        sock.sendall(struct.pack("!H", len(wire)) + wire)
        while True:
            (length,) = struct.unpack("!H", _recv_exact(sock, 2, deadline))
            data = _recv_exact(sock, length, deadline)
            try:
                resp = decode_message(data)
            except WireError:
                continue
            if _matches(resp, query):
                return resp, data
    finally:
        sock.close()


def query(server: tuple[str, int], name: Name | str, rrtype: int | str = RRType.A, *,
          do_bit: bool = False, bufsize: int = DEFAULT_BUFSIZE, force_tcp: bool = False,
          timeout: float = 5.0, socket_factory: SocketFactory = socket.socket,
          msg_id: int | None = None) -> QueryResult:
    """Send one question. A TC=1 reply over UDP is retried once over TCP; latency covers both."""
    if isinstance(rrtype, str):
        rrtype = RRType.parse(rrtype)
    q = make_query(name, rrtype, msg_id=random.getrandbits(16) if msg_id is None else msg_id,
                   do=do_bit, payload=bufsize)
    wire = encode_message(q)
    addr = (server[0], int(server[1]))
    try:
        start = time.perf_counter_ns()
        deadline = time.monotonic() + timeout
        retried = False
        if force_tcp:
            resp, data = _tcp_exchange(wire, q, addr, deadline, socket_factory)
            transport = TCP
        else:
            resp, data = _udp_exchange(wire, q, addr, deadline, socket_factory)
            transport = UDP
            if resp.has(Flag.TC):
                retried = True
                resp, data = _tcp_exchange(wire, q, addr, deadline, socket_factory)
                transport = TCP
        elapsed = time.perf_counter_ns() - start
    except OSError as exc:
        if isinstance(exc, QueryError):
            raise
        raise QueryError(f"query to {addr[0]}:{addr[1]} failed: {exc}") from exc
    return QueryResult(resp, transport, len(data), max(elapsed, 1) / 1000.0, retried, data)


# --------------------------------------------------------------------------- validation


class Reason(str, enum.Enum):
    MISSING_SIGNATURE = "missing-signature"
    NO_TRUST_ANCHOR = "no-trust-anchor"


@dataclass(frozen=True)
class RrsetOutcome:
    name: Name
    rrtype: int
    verdict: str  # a Verdict value, or a Reason value
    key_tag: int | None = None
    algorithm: int | None = None

    @property
    def ok(self) -> bool:
        return self.verdict == Verdict.ACCEPT.value


@dataclass(frozen=True)
class ValidationReport:
    outcomes: tuple[RrsetOutcome, ...]
    overall: bool
    reason: str | None = None

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[RrsetOutcome]) -> ValidationReport:
        outcomes = tuple(outcomes)
        for o in outcomes:
            if not o.ok:
                return cls(outcomes, False, o.verdict)
        if not outcomes:
            return cls(outcomes, False, "no-answer")
        return cls(outcomes, True, None)

    def to_dict(self) -> dict:
        return {
            "overall": "accept" if self.overall else "reject",
            "reason": self.reason,
            "rrsets": [
                {"name": o.name.to_text(), "type": RRType.mnemonic(o.rrtype), "verdict": o.verdict,
                 "key_tag": o.key_tag, "algorithm": o.algorithm}
                for o in self.outcomes
            ],
        }


def load_trust_anchors(path) -> list[DnskeyRecord]:
    return [dnskey for _, dnskey in read_dnskey_file(path)]


def _best_verdict(verdicts: list[Verdict]) -> Verdict:
    # report the most informative failure: a tag match that failed beats a tag mismatch
    order = [Verdict.BAD_SIGNATURE, Verdict.EXPIRED, Verdict.NOT_YET_VALID, Verdict.UNSUPPORTED_ALGORITHM,
             Verdict.ALGORITHM_MISMATCH, Verdict.KEY_TAG_MISMATCH]
    for v in order:
        if v in verdicts:
            return v
    return Verdict.KEY_TAG_MISMATCH


def validate_response(result: QueryResult | Message, trust_anchors: Iterable[DnskeyRecord], now: int | None = None,
                      registry: Registry | None = None, self_validate_dnskey: bool = False) -> ValidationReport:
    """Pair every answer RRset with its RRSIGs and check them against ``trust_anchors``.

    With ``self_validate_dnskey`` a DNSKEY RRset may be checked against its own members,
    and keys proven that way join the anchor set for the rest of the answer.
    """
    msg = result.response if isinstance(result, QueryResult) else result
    now = int(time.time()) if now is None else now
    registry = registry or default_registry()
    anchors = list(trust_anchors)
    rrsets = group_rrsets(msg.answer)
    sigs: dict[tuple[Name, int], list[RrsigRecord]] = {}
    data_sets = []
    for rs in rrsets:
        if rs.rrtype == RRType.RRSIG:
            for rd in rs.rdatas:
                try:
                    rrsig = RrsigRecord.from_rdata(rd)
                except WireError:
                    continue
                sigs.setdefault((rs.name, rrsig.type_covered), []).append(rrsig)
        else:
            data_sets.append(rs)
    # DNSKEY sets first so self-validated keys are available for the others
    data_sets.sort(key=lambda rs: rs.rrtype != RRType.DNSKEY)
    outcomes = []
    for rs in data_sets:
        outcomes.append(_validate_one(rs, sigs.get((rs.name, rs.rrtype), []), anchors, now, registry,
                                      self_validate_dnskey))
        if outcomes[-1].ok and self_validate_dnskey and rs.rrtype == RRType.DNSKEY:
            for rd in rs.rdatas:
                try:
                    anchors.append(DnskeyRecord.from_rdata(rd))
                except (ValueError, WireError):
                    pass
    return ValidationReport.from_outcomes(outcomes)


def _validate_one(rs: Rrset, rrsigs: list[RrsigRecord], anchors: list[DnskeyRecord], now: int,
                  registry: Registry, self_validate: bool) -> RrsetOutcome:
    if not rrsigs:
        return RrsetOutcome(rs.name, rs.rrtype, Reason.MISSING_SIGNATURE.value)
    candidates = list(anchors)
    if self_validate and rs.rrtype == RRType.DNSKEY:
        for rd in rs.rdatas:
            try:
                candidates.append(DnskeyRecord.from_rdata(rd))
            except (ValueError, WireError):
                pass
    if not candidates:
        return RrsetOutcome(rs.name, rs.rrtype, Reason.NO_TRUST_ANCHOR.value)
    failures = []
    for rrsig in rrsigs:
        for key in candidates:
            if key.key_tag != rrsig.key_tag or key.algorithm != rrsig.algorithm:
                failures.append(Verdict.KEY_TAG_MISMATCH if key.key_tag != rrsig.key_tag
                                else Verdict.ALGORITHM_MISMATCH)
                continue
            verdict = validate_rrsig(rs, rrsig, key, now, registry)
            if verdict.ok:
                return RrsetOutcome(rs.name, rs.rrtype, verdict.value, rrsig.key_tag, rrsig.algorithm)
            failures.append(verdict)
    first = rrsigs[0]
    return RrsetOutcome(rs.name, rs.rrtype, _best_verdict(failures).value, first.key_tag, first.algorithm)


# --------------------------------------------------------------------------- rendering


def _alg_label(code: int, registry: Registry) -> str:
    name = registry.mnemonic_for_code(code)
    return f"{name} ({code})" if name else str(code)


def _flag_text(msg: Message) -> str:
    names = [("qr", Flag.QR), ("aa", Flag.AA), ("tc", Flag.TC), ("rd", Flag.RD),
             ("ra", Flag.RA), ("ad", Flag.AD), ("cd", Flag.CD)]
    return " ".join(n for n, f in names if msg.has(f))


def _enum_text(enum_cls, value: int) -> str:
    try:
        return enum_cls(value).name
    except ValueError:
        return str(value)


def print_result(result: QueryResult, report: ValidationReport | None = None,
                 registry: Registry | None = None) -> str:
    registry = registry or default_registry()
    msg = result.response
    lines = [
        f";; ->>HEADER<<- opcode: {_enum_text(Opcode, msg.opcode)}, status: {_enum_text(Rcode, msg.rcode)}, "
        f"id: {msg.id}",
        f";; flags: {_flag_text(msg)}; QUERY: {len(msg.questions)}, ANSWER: {len(msg.answer)}, "
        f"AUTHORITY: {len(msg.authority)}, ADDITIONAL: {len(msg.additional) + (1 if msg.edns else 0)}",
    ]
    if msg.edns is not None:
        lines += ["", ";; OPT PSEUDOSECTION:",
                  f"; EDNS: version: {msg.edns.version}, flags:{' do' if msg.edns.do else ''}; "
                  f"udp: {msg.edns.payload}"]
    lines += ["", ";; QUESTION SECTION:"]
    for q in msg.questions:
        lines.append(f";{q.name.to_text()}\t\tIN\t{RRType.mnemonic(q.rrtype)}")
    for title, records in (("ANSWER", msg.answer), ("AUTHORITY", msg.authority), ("ADDITIONAL", msg.additional)):
        if not records:
            continue
        lines += ["", f";; {title} SECTION:"]
        for rr in records:
            lines.append(rr.to_text())
            if rr.rrtype == RRType.RRSIG:
                try:
                    sig = RrsigRecord.from_rdata(rr.rdata)
                except WireError:
                    continue
                lines.append(
                    f";  RRSIG {RRType.mnemonic(sig.type_covered)} algorithm={_alg_label(sig.algorithm, registry)} "
                    f"key_tag={sig.key_tag} inception={format_time(sig.inception)} "
                    f"expiration={format_time(sig.expiration)} signature={len(sig.signature)} bytes")
    lines.append("")
    if report is not None:
        if report.overall:
            lines.append(";; DNSSEC: AD-equivalent: validated (client-side)")
        else:
            lines.append(f";; DNSSEC: validation failed: {report.reason}")
            for o in report.outcomes:
                if not o.ok:
                    lines.append(f";;   {o.name.to_text()} {RRType.mnemonic(o.rrtype)}: {o.verdict}")
    via = result.transport_used.upper()
    if result.retried:
        via += " (truncated over UDP, retried over TCP)"
    lines.append(f";; Query time: {result.latency_us:.1f} usec")
    lines.append(f";; MSG SIZE  rcvd: {result.wire_size}  transport: {via}")
    return "\n".join(lines) + "\n"


def result_to_dict(result: QueryResult, report: ValidationReport | None = None) -> dict:
    msg = result.response
    return {
        "transport": result.transport_used,
        "retried": result.retried,
        "wire_size": result.wire_size,
        "latency_us": result.latency_us,
        "rcode": _enum_text(Rcode, msg.rcode),
        "flags": _flag_text(msg).split(),
        "answer": [rr.to_text() for rr in msg.answer],
        "validation": report.to_dict() if report is not None else None,
    }


def result_to_json(result: QueryResult, report: ValidationReport | None = None) -> str:
    return json.dumps(result_to_dict(result, report))


# --------------------------------------------------------------------------- dig-style arguments


@dataclass
class ResolveArgs:
    name: str
    rrtype: int = RRType.A
    server: tuple[str, int] = ("127.0.0.1", 53)
    dnssec: bool = False
    tcp: bool = False
    bufsize: int = DEFAULT_BUFSIZE


def parse_server(text: str, default_port: int = 53) -> tuple[str, int]:
    text = text.lstrip("@")
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        return host, int(rest.lstrip(":") or default_port)
    if text.count(":") == 1:
        host, port = text.split(":")
        return host, int(port)
    return text, default_port


def parse_dig_args(tokens: Sequence[str]) -> ResolveArgs:
    """``<name> [<type>] @<server[:port]> [+dnssec] [+tcp] [+bufsize=N]`` in any order."""
    name = None
    rrtype = None
    server = ("127.0.0.1", 53)
    dnssec = tcp = False
    bufsize = DEFAULT_BUFSIZE
    for tok in tokens:
        if tok.startswith("@"):
            server = parse_server(tok)
        elif tok.startswith("+"):
            opt = tok[1:].lower()
            if opt in ("dnssec", "do"):
                dnssec = True
            elif opt in ("nodnssec", "nodo"):
                dnssec = False
            elif opt in ("tcp", "vc"):
                tcp = True
            elif opt in ("notcp", "novc"):
                tcp = False
            elif opt.startswith("bufsize="):
                bufsize = int(opt.split("=", 1)[1])
                if not 0 <= bufsize <= 65535:
                    raise ValueError(f"bufsize {bufsize} out of range")
            else:
                raise ValueError(f"unknown option {tok}")
        elif name is None:
            name = tok
        elif rrtype is None:
            rrtype = RRType.parse(tok)
        else:
            raise ValueError(f"unexpected argument {tok!r}")
    if name is None:
        raise ValueError("no query name given")
    return ResolveArgs(name, rrtype if rrtype is not None else RRType.A, server, dnssec, tcp, bufsize)
