"""Zone signing keys on disk: DNSKEY records, key tags, and the two-file key layout.

The public file holds one DNSKEY line in presentation format::

    mysig.com. IN DNSKEY 257 3 17 <base64 public key>

The private file uses the ``Private-key-format: v1.3`` layout with a single
``PrivateKey`` field for every algorithm (raw key bytes for ECDSA, Ed25519 and the
post-quantum schemes; PKCS#8 DER for RSA).
"""

from __future__ import annotations

import base64
import binascii
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from . import algoreg
from .algoreg import AlgorithmDescriptor, KeyMismatch, KeyPair, Registry, default_registry
from .wire import Name, ResourceRecord, RRClass, RRType, Rrset, WireError

ZONE_KEY = 0x0100
SEP = 0x0001
DEFAULT_FLAGS = ZONE_KEY | SEP
PRIVATE_FORMAT = "v1.3"


class KeyFileError(ValueError):
    """A key file could not be parsed or does not match the registry."""


def key_tag(dnskey_rdata: bytes) -> int:
    """RFC 4034 Appendix B checksum over DNSKEY RDATA."""
    if len(dnskey_rdata) < 4:
        raise ValueError("DNSKEY rdata shorter than 4 bytes")
    acc = 0
    for i, b in enumerate(dnskey_rdata):
        acc += b if i & 1 else b << 8
    acc += (acc >> 16) & 0xFFFF
    return acc & 0xFFFF


@dataclass(frozen=True)
class DnskeyRecord:
    flags: int
    protocol: int
    algorithm: int
    public_key: bytes

    def __post_init__(self):
        if self.protocol != 3:
            raise ValueError(f"DNSKEY protocol must be 3, got {self.protocol}")
        if not self.flags & ZONE_KEY:
            raise ValueError("DNSKEY lacks the zone key flag")

    def to_rdata(self) -> bytes:
        return struct.pack("!HBB", self.flags, self.protocol, self.algorithm) + self.public_key

    @classmethod
    def from_rdata(cls, rdata: bytes) -> DnskeyRecord:
        if len(rdata) < 4:
            raise WireError("DNSKEY rdata too short")
        flags, proto, alg = struct.unpack("!HBB", rdata[:4])
        return cls(flags, proto, alg, rdata[4:])

    @property
    def key_tag(self) -> int:
        return key_tag(self.to_rdata())

    @property
    def sep(self) -> bool:
        return bool(self.flags & SEP)

    def to_text(self, owner: Name, ttl: int | None = None) -> str:
        ttl_part = f" {ttl}" if ttl is not None else ""
        b64 = base64.b64encode(self.public_key).decode()
        return f"{owner.to_text()}{ttl_part} IN DNSKEY {self.flags} {self.protocol} {self.algorithm} {b64}"


@dataclass(frozen=True)
class SigningKey:
    dnskey: DnskeyRecord
    keypair: KeyPair
    owner: Name
    key_tag: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "key_tag", key_tag(self.dnskey.to_rdata()))

    @property
    def algorithm(self) -> AlgorithmDescriptor:
        return self.keypair.algorithm

    def dnskey_record(self, ttl: int) -> ResourceRecord:
        return ResourceRecord(self.owner, RRType.DNSKEY, RRClass.IN, ttl, self.dnskey.to_rdata())

    def basename(self) -> str:
        zone = self.owner.to_text().rstrip(".") or "."
        return f"K{zone}.+{self.dnskey.algorithm:03d}+{self.key_tag:05d}"


def make_signing_key(keypair: KeyPair, zone: Name, flags: int = DEFAULT_FLAGS) -> SigningKey:
    dnskey = DnskeyRecord(flags, 3, keypair.algorithm.code, keypair.public_key)
    return SigningKey(dnskey, keypair, zone)


def dnskey_rrset(keys: list[SigningKey], ttl: int) -> Rrset:
    owner = keys[0].owner
    return Rrset.of(owner, RRType.DNSKEY, ttl, [k.dnskey.to_rdata() for k in keys])


# --------------------------------------------------------------------------- files


def private_key_text(key: SigningKey) -> str:
    alg = key.algorithm
    return (
        f"Private-key-format: {PRIVATE_FORMAT}\n"
        f"Algorithm: {alg.code} ({alg.mnemonic})\n"
        f"PrivateKey: {base64.b64encode(key.keypair.private_key).decode()}\n"
    )


def _write_atomic(path: Path, text: str, mode: int) -> Path:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        os.fchmod(fd, mode)
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        return Path(tmp)
    except BaseException:
        os.unlink(tmp)
        raise


def store_key(key: SigningKey, directory: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<base>.key`` and ``<base>.private``. Either both files appear or neither."""
    directory = Path(directory)
    base = key.basename()
    pub_path, priv_path = directory / f"{base}.key", directory / f"{base}.private"
    staged: list[tuple[Path, Path]] = []
    done: list[Path] = []
    try:
        staged.append((_write_atomic(pub_path, key.dnskey.to_text(key.owner) + "\n", 0o644), pub_path))
        staged.append((_write_atomic(priv_path, private_key_text(key), 0o600), priv_path))
        for tmp, final in staged:
            os.replace(tmp, final)
            done.append(final)
    except BaseException:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
        for final in done:
            final.unlink(missing_ok=True)
        raise
    return pub_path, priv_path


def generate_and_store(mnemonic: str, zone: Name | str, directory: str | os.PathLike,
                       *, flags: int = DEFAULT_FLAGS, registry: Registry | None = None,
                       rng_seed: bytes | None = None) -> SigningKey:
    registry = registry or default_registry()
    if isinstance(zone, str):
        zone = Name.from_text(zone)
    alg = registry.get(mnemonic)
    key = make_signing_key(algoreg.generate_keypair(alg, rng_seed), zone, flags)
    store_key(key, directory)
    return key


def parse_dnskey_line(line: str) -> tuple[Name, DnskeyRecord]:
    """Parse ``<owner> [ttl] [IN] DNSKEY <flags> <proto> <alg> <base64...>``."""
    tokens = line.split(";", 1)[0].split()
    try:
        idx = [t.upper() for t in tokens].index("DNSKEY")
    except ValueError:
        raise KeyFileError(f"not a DNSKEY line: {line.strip()!r}") from None
    if idx < 1 or len(tokens) < idx + 5:
        raise KeyFileError(f"incomplete DNSKEY line: {line.strip()!r}")
    try:
        owner = Name.from_text(tokens[0])
        flags, proto, alg = (int(t) for t in tokens[idx + 1 : idx + 4])
        public = base64.b64decode("".join(tokens[idx + 4 :]), validate=True)
        return owner, DnskeyRecord(flags, proto, alg, public)
    except (ValueError, binascii.Error) as exc:
        raise KeyFileError(f"bad DNSKEY line: {exc}") from exc


def read_dnskey_file(path: str | os.PathLike) -> list[tuple[Name, DnskeyRecord]]:
    """Every DNSKEY in a presentation-format file (blank and ';' lines ignored)."""
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.lstrip().startswith(";"):
            out.append(parse_dnskey_line(line))
    if not out:
        raise KeyFileError(f"{path}: no DNSKEY records")
    return out


def _parse_private(text: str) -> dict[str, str]:
    fields = {}
    for line in text.splitlines():
        if ":" in line:
            k, v = line.split(":", 1)
            fields[k.strip()] = v.strip()
    if "Private-key-format" not in fields or "PrivateKey" not in fields or "Algorithm" not in fields:
        raise KeyFileError("private key file lacks Private-key-format/Algorithm/PrivateKey")
    return fields


def load_key(public_path: str | os.PathLike, private_path: str | os.PathLike,
             registry: Registry | None = None) -> SigningKey:
    registry = registry or default_registry()
    (owner, dnskey), *rest = read_dnskey_file(public_path)
    if rest:
        raise KeyFileError(f"{public_path}: expected one DNSKEY, found {1 + len(rest)}")
    fields = _parse_private(Path(private_path).read_text())
    try:
        code = int(fields["Algorithm"].split()[0])
        private = base64.b64decode(fields["PrivateKey"], validate=True)
    except (ValueError, binascii.Error) as exc:
        raise KeyFileError(f"{private_path}: {exc}") from exc
    if code != dnskey.algorithm:
        raise KeyFileError(f"algorithm {code} in {private_path} differs from DNSKEY algorithm {dnskey.algorithm}")
    try:
        alg = registry.by_code(code, dnskey.public_key)
    except algoreg.UnknownAlgorithm as exc:
        raise KeyFileError(str(exc)) from exc
    if alg.private_key_len is not None and len(private) != alg.private_key_len:
        raise KeyMismatch(f"{alg.mnemonic} private key must be {alg.private_key_len} bytes, got {len(private)}")
    if len(dnskey.public_key) != alg.public_key_len:
        raise KeyMismatch(f"{alg.mnemonic} public key must be {alg.public_key_len} bytes, "
                          f"got {len(dnskey.public_key)}")
    keypair = KeyPair(alg, dnskey.public_key, private)
    if alg.provider == "classical":
        derived = algoreg.get_provider(alg).public_from_private(alg, private)
        if derived != dnskey.public_key:
            raise KeyMismatch(f"{private_path} does not hold the private half of {public_path}")
    return SigningKey(dnskey, keypair, owner)
