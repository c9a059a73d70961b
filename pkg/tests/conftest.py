import hashlib
import threading

import pytest

from pqdnssec import algoreg
from pqdnssec.keystore import make_signing_key
from pqdnssec.server import Responder, ServerConfig, ServerThread, ZoneConfig, ZoneStore, parse_record_lines
from pqdnssec.wire import Name

ZONE = Name.from_text("mysig.com.")
ALL = [d.mnemonic for d in algoreg.registry()]
PQC = [d.mnemonic for d in algoreg.registry() if d.post_quantum]
CLASSICAL = [d.mnemonic for d in algoreg.registry() if not d.post_quantum]
# cheap schemes for tests that only need "some key"
FAST = ["ED25519", "ECDSAP256SHA256", "MLDSA44", "FALCON512", "MAYO1", "SNOVA2454"]

ZONE_LINES = [
    "@ 3600 IN A 10.0.0.1",
    "@ 3600 IN AAAA 2001:db8::1",
    "www 300 IN A 10.0.0.2",
    "www 300 IN A 10.0.0.3",
    'txt 60 IN TXT "hello world" second',
    "a.b.deep 60 IN A 10.0.0.4",
]

_keys: dict[tuple[str, str], object] = {}
_lock = threading.Lock()


def signing_key(mnemonic: str, zone: Name = ZONE, tag: str = ""):
    """One key per (algorithm, zone, tag) for the whole session; seeded where supported."""
    k = (mnemonic, zone.to_text() + tag)
    with _lock:
        if k not in _keys:
            alg = algoreg.lookup(mnemonic)
            seed = hashlib.sha256(f"{mnemonic}/{k[1]}".encode()).digest()
            pair = algoreg.generate_keypair(alg, seed if alg.seeded_keygen else None)
            _keys[k] = make_signing_key(pair, zone)
        return _keys[k]


@pytest.fixture(scope="session")
def key_for():
    return signing_key


def make_responder(keys, *, udp_payload_max=1232, cache=False, lines=ZONE_LINES, zone=ZONE):
    zone_store = ZoneStore(zone, parse_record_lines(lines, zone), tuple(keys))
    cfg = ServerConfig(zones=(ZoneConfig(zone),), port=0, udp_payload_max=udp_payload_max, cache=cache)
    return Responder(cfg, [zone_store])


@pytest.fixture
def responder_for():
    return make_responder


@pytest.fixture
def running_server():
    started = []

    def start(keys, **kw):
        responder = make_responder(keys, **kw)
        srv = ServerThread(responder.config, responder)
        srv.start()
        started.append(srv)
        return srv

    yield start
    for srv in started:
        srv.stop()


# acceptance criteria report: test_acceptance.py records one line per criterion here
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
