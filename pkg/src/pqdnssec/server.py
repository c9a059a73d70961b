"""Authoritative UDP+TCP responder that signs answers on the fly.

Configuration is a YAML file::

    listen: 127.0.0.1
    port: 5353            # 0 picks a free port, shared by UDP and TCP
    udp_payload_max: 1232
    workers: 4
    cache: {enabled: false, size: 4096, refresh: 86400}
    validity: {backdate: 3600, lifetime: 1209600}
    algorithms: {MLDSA44: 17}     # optional code point overrides
    zones:
      - apex: mysig.com.
        algorithm: MLDSA44
        records: zone.txt         # or a list of record lines
        dnskey_ttl: 3600
        keys:
          - {public: Kmysig.com.+017+12345.key, private: Kmysig.com.+017+12345.private}

Relative paths are resolved against the config file's directory. Record lines
look like ``<name> <ttl> IN <TYPE> <rdata>`` with types A, AAAA and TXT.
"""

from __future__ import annotations

import asyncio
import logging
import signal
import struct
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import yaml

from . import algoreg
from .algoreg import Registry, default_registry
from .keystore import SigningKey, dnskey_rrset, load_key
from .signer import Keyring, SignatureCache, ValidityPolicy, sign_response
from .wire import (
    HEADER_LEN, Edns, Flag, Message, Name, Opcode, Rcode, RRClass, RRType, Rrset, WireError,
    a_rdata, aaaa_rdata, decode_message, encode_message, txt_rdata,
)

log = logging.getLogger(__name__)

MIN_UDP = 512
UDP = "udp"
TCP = "tcp"
TCP_IDLE_TIMEOUT = 30.0


class ConfigError(ValueError):
    """The server configuration (or a file it points to) is unusable."""


class ZoneFileError(ConfigError):
    pass


# --------------------------------------------------------------------------- zone data


def _tokenize(line: str) -> list[tuple[str, bool]]:
    """Split a record line into (token, was_quoted) pairs; ';' starts a comment outside quotes."""
    tokens: list[tuple[str, bool]] = []
    i, n = 0, len(line)
    while i < n:
        c = line[i]
        if c.isspace():
            i += 1
        elif c == ";":
            break
        elif c == '"':
            j, buf = i + 1, []
            while j < n and line[j] != '"':
                if line[j] == "\\" and j + 1 < n:
                    buf.append(line[j : j + 2])
                    j += 2
                else:
                    buf.append(line[j])
                    j += 1
            if j >= n:
                raise ValueError("unterminated quoted string")
            tokens.append(("".join(buf), True))
            i = j + 1
        else:
            j = i
            while j < n and not line[j].isspace() and line[j] not in ';"':
                j += 2 if line[j] == "\\" else 1
            tokens.append((line[i:j], False))
            i = j
    return tokens


def _unescape(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        if text[i] == "\\" and i + 1 < len(text):
            if text[i + 1 : i + 4].isdigit() and len(text[i + 1 : i + 4]) == 3:
                value = int(text[i + 1 : i + 4])
                if value > 255:
                    raise ValueError(f"bad escape \\{value}")
                out.append(value)
                i += 4
            else:
                out += text[i + 1].encode()
                i += 2
        else:
            out += text[i].encode()
            i += 1
    return bytes(out)


_RDATA_PARSERS = {
    RRType.A: lambda toks: a_rdata(_single(toks)),
    RRType.AAAA: lambda toks: aaaa_rdata(_single(toks)),
    RRType.TXT: lambda toks: txt_rdata([_unescape(t) for t, _ in toks]),
}


def _single(toks):
    if len(toks) != 1:
        raise ValueError(f"expected one address, got {len(toks)} tokens")
    return toks[0][0]


def parse_record_lines(lines: Sequence[str], apex: Name, source: str = "<inline>") -> dict[tuple[Name, int], Rrset]:
    grouped: dict[tuple[Name, int], tuple[int, list[bytes]]] = {}
    for lineno, raw in enumerate(lines, 1):
        where = f"{source}:{lineno}"
        try:
            toks = _tokenize(raw)
        except ValueError as exc:
            raise ZoneFileError(f"{where}: {exc}") from None
        if not toks:
            continue
        if len(toks) < 5:
            raise ZoneFileError(f"{where}: expected '<name> <ttl> IN <TYPE> <rdata>'")
        (name_t, _), (ttl_t, _), (cls_t, _), (type_t, _) = toks[:4]
        try:
            name = Name.from_text(name_t, origin=apex)
            ttl = int(ttl_t)
            if not 0 <= ttl <= 0x7FFFFFFF:
                raise ValueError(f"TTL {ttl} out of range")
        except (ValueError, WireError) as exc:
            raise ZoneFileError(f"{where}: {exc}") from None
        if cls_t.upper() != "IN":
            raise ZoneFileError(f"{where}: unsupported class {cls_t}")
        try:
            rrtype = RRType[type_t.upper()]
        except KeyError:
            rrtype = None
        if rrtype not in _RDATA_PARSERS:
            raise ZoneFileError(f"{where}: unsupported record type {type_t} (A, AAAA, TXT only)")
        if not name.is_subdomain(apex):
            raise ZoneFileError(f"{where}: {name} is outside zone {apex}")
        try:
            rdata = _RDATA_PARSERS[rrtype](toks[4:])
        except (ValueError, WireError) as exc:
            raise ZoneFileError(f"{where}: bad {type_t} rdata: {exc}") from None
        ttl_prev, rdatas = grouped.setdefault((name, rrtype), (ttl, []))
        if rdata not in rdatas:
            rdatas.append(rdata)
        grouped[(name, rrtype)] = (min(ttl_prev, ttl), rdatas)
    return {k: Rrset.of(k[0], k[1], ttl, rdatas) for k, (ttl, rdatas) in grouped.items()}


def load_zone_records(path: str | Path, apex: Name | str) -> dict[tuple[Name, int], Rrset]:
    if isinstance(apex, str):
        apex = Name.from_text(apex)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ZoneFileError(f"cannot read {path}: {exc}") from exc
    return parse_record_lines(text.splitlines(), apex, str(path))


@dataclass(frozen=True)
class ZoneStore:
    apex: Name
    records: dict[tuple[Name, int], Rrset]
    keys: tuple[SigningKey, ...]
    dnskey_ttl: int = 3600
    _names: frozenset = field(init=False, repr=False, compare=False)
    _dnskeys: Rrset | None = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name, _ in self.records:
            if not name.is_subdomain(self.apex):
                raise ConfigError(f"{name} is outside zone {self.apex}")
        for key in self.keys:
            if key.owner != self.apex:
                raise ConfigError(f"key {key.key_tag} is for {key.owner}, not {self.apex}")
        # every owner plus its ancestors down to the apex (empty non-terminals exist too)
        names = {self.apex}
        for name, _ in self.records:
            while name != self.apex:
                names.add(name)
                name = name.parent()
        object.__setattr__(self, "_names", frozenset(names))
        object.__setattr__(self, "_dnskeys", dnskey_rrset(list(self.keys), self.dnskey_ttl) if self.keys else None)

    def lookup(self, name: Name, rrtype: int) -> tuple[int, list[Rrset]]:
        """(rcode, answer RRsets) for an in-zone question."""
        if name not in self._names:
            return Rcode.NXDOMAIN, []
        found = []
        if name == self.apex and self._dnskeys is not None and rrtype in (RRType.DNSKEY, RRType.ANY):
            found.append(self._dnskeys)
        if rrtype == RRType.ANY:
            found += [rs for (n, _), rs in self.records.items() if n == name]
        elif (name, rrtype) in self.records:
            found.append(self.records[(name, rrtype)])
        return Rcode.NOERROR, found


# --------------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ZoneConfig:
    apex: Name
    algorithm: str | None = None
    records_file: Path | None = None
    records: tuple[str, ...] = ()
    keys: tuple[tuple[Path, Path], ...] = ()
    dnskey_ttl: int = 3600


@dataclass(frozen=True)
class ServerConfig:
    zones: tuple[ZoneConfig, ...]
    listen: str = "127.0.0.1"
    port: int = 5353
    udp_payload_max: int = 1232
    validity: ValidityPolicy = ValidityPolicy()
    cache: bool = False
    cache_size: int = 4096
    cache_refresh: int = 86400
    workers: int = 4
    algorithm_overrides: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.udp_payload_max < MIN_UDP or self.udp_payload_max > 65535:
            raise ConfigError(f"udp_payload_max must be within {MIN_UDP}..65535")
        if not 0 <= self.port <= 65535:
            raise ConfigError(f"port {self.port} out of range")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.zones:
            raise ConfigError("no zones configured")

    def registry(self) -> Registry:
        reg = default_registry()
        return reg.with_overrides(self.algorithm_overrides) if self.algorithm_overrides else reg


def _path(base: Path, value) -> Path:
    p = Path(str(value)).expanduser()
    return p if p.is_absolute() else base / p


def parse_config(data: dict, base_dir: Path | str = ".") -> ServerConfig:
    base = Path(base_dir)
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    try:
        zones = []
        for z in data.get("zones") or []:
            records = z.get("records")
            rec_file = rec_lines = None
            if isinstance(records, str):
                rec_file = _path(base, records)
            elif records is not None:
                rec_lines = tuple(str(r) for r in records)
            keys = tuple((_path(base, k["public"]), _path(base, k["private"])) for k in z.get("keys") or [])
            zones.append(ZoneConfig(
                apex=Name.from_text(str(z["apex"])),
                algorithm=z.get("algorithm"),
                records_file=rec_file,
                records=rec_lines or (),
                keys=keys,
                dnskey_ttl=int(z.get("dnskey_ttl", 3600)),
            ))
        cache = data.get("cache") or {}
        if isinstance(cache, bool):
            cache = {"enabled": cache}
        validity = data.get("validity") or {}
        return ServerConfig(
            zones=tuple(zones),
            listen=str(data.get("listen", "127.0.0.1")),
            port=int(data.get("port", 5353)),
            udp_payload_max=int(data.get("udp_payload_max", 1232)),
            validity=ValidityPolicy(int(validity.get("backdate", 3600)), int(validity.get("lifetime", 14 * 86400))),
            cache=bool(cache.get("enabled", False)),
            cache_size=int(cache.get("size", 4096)),
            cache_refresh=int(cache.get("refresh", 86400)),
            workers=int(data.get("workers", 4)),
            algorithm_overrides={str(k): int(v) for k, v in (data.get("algorithms") or {}).items()},
        )
    except (KeyError, TypeError, ValueError, WireError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config: {exc!r}") from exc


def load_config(path: str | Path) -> ServerConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(data, path.parent)


def build_zones(config: ServerConfig, *, self_test: bool = True) -> list[ZoneStore]:
    """Load records and keys for every zone. Each key signs and verifies a probe message
    first so a broken key stops startup instead of producing bad answers later."""
    registry = config.registry()
    stores = []
    for zc in config.zones:
        if zc.records_file is not None:
            records = load_zone_records(zc.records_file, zc.apex)
        else:
            records = parse_record_lines(zc.records, zc.apex)
        if not zc.keys:
            raise ConfigError(f"zone {zc.apex} has no keys")
        keys = []
        for pub, priv in zc.keys:
            try:
                key = load_key(pub, priv, registry)
            except (OSError, ValueError, algoreg.AlgorithmError) as exc:
                raise ConfigError(f"zone {zc.apex}: cannot load key {pub}: {exc}") from exc
            if key.owner != zc.apex:
                raise ConfigError(f"key {pub} is for {key.owner}, not {zc.apex}")
            if zc.algorithm and registry.get(zc.algorithm).code != key.dnskey.algorithm:
                raise ConfigError(f"key {pub} is algorithm {key.dnskey.algorithm}, zone expects {zc.algorithm}")
            if self_test:
                probe = b"pqdnssec startup probe " + zc.apex.to_wire()
                sig = algoreg.sign(key.keypair, probe)
                if not algoreg.verify(key.algorithm, key.keypair.public_key, probe, sig):
                    raise ConfigError(f"key {pub} failed its sign/verify self test")
            keys.append(key)
        stores.append(ZoneStore(zc.apex, records, tuple(keys), zc.dnskey_ttl))
    return stores


# --------------------------------------------------------------------------- query handling


def udp_limit(query: Message, udp_payload_max: int) -> int:
    if query.edns is None:
        return MIN_UDP
    return min(max(query.edns.payload, MIN_UDP), udp_payload_max)


class Responder:
    """Turns queries into (signed) responses; safe to call from many threads."""

    def __init__(self, config: ServerConfig, zones: Sequence[ZoneStore],
                 clock: Callable[[], float] = time.time):
        self.config = config
        self.zones = list(zones)
        self.keyring = Keyring({z.apex: z.keys for z in self.zones})
        self.cache = SignatureCache(config.cache_size, config.cache_refresh) if config.cache else None
        self.clock = clock

    def _zone_for(self, name: Name) -> ZoneStore | None:
        best = None
        for z in self.zones:
            if name.is_subdomain(z.apex) and (best is None or len(z.apex) > len(best.apex)):
                best = z
        return best

    def _base(self, query: Message) -> Message:
        edns = None
        if query.edns is not None:
            edns = Edns(payload=self.config.udp_payload_max, do=query.edns.do)
        flags = Flag.QR | (query.flags & (Flag.RD | Flag.CD)) | (query.opcode << 11)
        return Message(id=query.id, flags=flags, questions=query.questions, edns=edns)

    def handle_query(self, query: Message, transport: str = UDP, now: int | None = None) -> Message:
        if now is None:
            now = int(self.clock())
        resp = self._base(query)
        try:
            resp = self._answer(query, resp, now)
        except Exception:
            log.exception("internal failure answering %s", query.question)
            resp = self._base(query).with_rcode(Rcode.SERVFAIL)
        if transport == UDP:
            resp = self.truncate(resp, udp_limit(query, self.config.udp_payload_max))
        return resp

    def _answer(self, query: Message, resp: Message, now: int) -> Message:
        if query.opcode != Opcode.QUERY:
            return resp.with_rcode(Rcode.NOTIMP)
        if len(query.questions) != 1:
            return resp.with_rcode(Rcode.FORMERR)
        if query.edns is not None and query.edns.version != 0:
            return resp.with_rcode(Rcode.BADVERS)
        q = query.question
        if q.rrclass not in (RRClass.IN, RRClass.ANY):
            return resp.with_rcode(Rcode.REFUSED)
        zone = self._zone_for(q.name)
        if zone is None:
            return resp.with_rcode(Rcode.REFUSED)
        rcode, rrsets = zone.lookup(q.name, q.rrtype)
        answer = tuple(rr for rs in rrsets for rr in rs.records())
        resp = replace(resp, answer=answer).with_flags(set_=Flag.AA).with_rcode(rcode)
        if query.do:
            resp = sign_response(resp, self.keyring, self.config.validity, now, self.cache)
        return resp

    @staticmethod
    def truncate(resp: Message, limit: int) -> Message:
        """Empty answer/authority and set TC when ``resp`` would not fit in ``limit`` bytes."""
        if len(encode_message(resp)) <= limit:
            return resp
        return replace(resp, answer=(), authority=(), additional=()).with_flags(set_=Flag.TC)

    def respond(self, wire: bytes, transport: str = UDP, now: int | None = None) -> bytes | None:
        """Answer raw query bytes; None means drop (not a query at all)."""
        if len(wire) < HEADER_LEN:
            return None
        msg_id, flags = struct.unpack("!HH", wire[:4])
        if flags & Flag.QR:
            return None
        try:
            query = decode_message(wire)
        except WireError as exc:
            log.debug("FORMERR for %d-byte query: %s", len(wire), exc)
            resp = Message(id=msg_id, flags=Flag.QR | (flags & 0x7800)).with_rcode(Rcode.FORMERR)
            return encode_message(resp)
        return encode_message(self.handle_query(query, transport, now))


# --------------------------------------------------------------------------- network


class _UdpProtocol(asyncio.DatagramProtocol):
    def __init__(self, server: DnsServer):
        self.server = server
        self.transport = None

    def connection_made(self, transport):
        self.transport = transport

    def datagram_received(self, data, addr):
        self.server._spawn(self._reply(data, addr))

    async def _reply(self, data, addr):
        out = await self.server._run(data, UDP)
        if out is not None and self.transport is not None and not self.transport.is_closing():
            self.transport.sendto(out, addr)


class DnsServer:
    """UDP and TCP listeners on one address and port, sharing a :class:`Responder`."""

    def __init__(self, config: ServerConfig, responder: Responder):
        self.config = config
        self.responder = responder
        self.executor = ThreadPoolExecutor(max_workers=config.workers, thread_name_prefix="sign")
        self._limit = asyncio.Semaphore(config.workers * 16)
        self._tasks: set[asyncio.Task] = set()
        self._udp = None
        self._tcp: asyncio.AbstractServer | None = None
        self.address: tuple[str, int] | None = None

    def _spawn(self, coro):
        task = asyncio.get_running_loop().create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def _run(self, data: bytes, transport: str) -> bytes | None:
        async with self._limit:
            loop = asyncio.get_running_loop()
            return await loop.run_in_executor(self.executor, self.responder.respond, data, transport)

    async def start(self) -> tuple[str, int]:
        loop = asyncio.get_running_loop()
        host, port = self.config.listen, self.config.port
        attempts = 20 if port == 0 else 1
        for attempt in range(attempts):
            udp, _ = await loop.create_datagram_endpoint(lambda: _UdpProtocol(self), local_addr=(host, port))
            bound = udp.get_extra_info("sockname")[1]
            try:
                self._tcp = await asyncio.start_server(self._tcp_client, host, bound, reuse_address=True)
            except OSError:
                udp.close()
                if attempt + 1 == attempts:
                    raise
                continue
            self._udp = udp
            self.address = (host, bound)
            return self.address
        raise OSError("could not bind")  # pragma: no cover

    async def _tcp_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        try:
            while True:
                try:
                    head = await asyncio.wait_for(reader.readexactly(2), TCP_IDLE_TIMEOUT)
                    (length,) = struct.unpack("!H", head)
                    data = await asyncio.wait_for(reader.readexactly(length), TCP_IDLE_TIMEOUT)
                except (asyncio.IncompleteReadError, asyncio.TimeoutError, ConnectionError):
                    break
                out = await self._run(data, TCP)
                if out is None:
                    break
                writer.write(struct.pack("!H", len(out)) + out)
                await writer.drain()
        except ConnectionError:
            pass
        finally:
            writer.close()

    async def stop(self):
        if self._udp is not None:
            self._udp.close()
        if self._tcp is not None:
            self._tcp.close()
            await self._tcp.wait_closed()
        if self._tasks:
            await asyncio.wait(list(self._tasks), timeout=5)
        self.executor.shutdown(wait=True)


def ready_line(address: tuple[str, int]) -> str:
    host, port = address
    return f"ready udp={host}:{port} tcp={host}:{port}"


def make_responder(config: ServerConfig) -> Responder:
    return Responder(config, build_zones(config))


def run(config: ServerConfig, *, out=sys.stdout) -> int:
    """Blocking entry point for ``serve``: exits 0 on SIGTERM/SIGINT, 1 on startup failure."""
    try:
        responder = make_responder(config)
    except (ConfigError, algoreg.AlgorithmError, OSError) as exc:
        log.error("startup failed: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1

    async def main() -> int:
        server = DnsServer(config, responder)
        try:
            address = await server.start()
        except OSError as exc:
            print(f"error: cannot listen on {config.listen}:{config.port}: {exc}", file=sys.stderr)
            return 1
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, stop.set)
        print(ready_line(address), file=out, flush=True)
        await stop.wait()
        await server.stop()
        return 0

    return asyncio.run(main())


class ServerThread:
    """Run a server on a background event loop; handy for tests and in-process use."""

    def __init__(self, config: ServerConfig, responder: Responder | None = None):
        self.config = config
        self.responder = responder or make_responder(config)
        self.address: tuple[str, int] | None = None
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True, name="dns-server")
        self._server: DnsServer | None = None

    def start(self) -> tuple[str, int]:
        self._thread.start()

        async def boot():
            self._server = DnsServer(self.config, self.responder)
            return await self._server.start()

        self.address = asyncio.run_coroutine_threadsafe(boot(), self._loop).result(10)
        return self.address

    def stop(self):
        if self._loop.is_closed():
            return
        if self._server is not None:
            asyncio.run_coroutine_threadsafe(self._server.stop(), self._loop).result(10)
            self._server = None
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(5)
        self._loop.close()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()
