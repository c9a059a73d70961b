"""Signature algorithm registry: 5 classical and 13 post-quantum schemes.

Each :class:`AlgorithmDescriptor` carries its DNSSEC code point, exact key and
signature sizes, and the name of the provider that implements it. Classical
schemes are served by ``cryptography``; post-quantum schemes by liboqs compiled
to WebAssembly (see :mod:`pqdnssec.algoreg.liboqs_wasm`).
"""

from __future__ import annotations

import enum
import re
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping


class Family(str, enum.Enum):
    RSA = "RSA"
    ECDSA = "ECDSA"
    ED25519 = "ED25519"
    ML_DSA = "ML-DSA"
    FALCON = "FALCON"
    SPHINCS = "SPHINCS+"
    MAYO = "MAYO"
    SNOVA = "SNOVA"


class AlgorithmError(Exception):
    """Base class for registry and provider failures."""


class UnknownAlgorithm(AlgorithmError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown algorithm"


class ProviderUnavailable(AlgorithmError):
    """The provider backing a scheme cannot be loaded on this host."""


class ProviderError(AlgorithmError):
    """The provider failed while generating keys or signing."""


class KeyMismatch(AlgorithmError, ValueError):
    """Key material does not fit the algorithm descriptor."""


@dataclass(frozen=True)
class AlgorithmDescriptor:
    code: int
    mnemonic: str
    name: str  # display name as used in the literature
    family: Family
    public_key_len: int
    private_key_len: int | None  # None: variable-length encoding (RSA)
    signature_len: int
    signature_len_is_max: bool = False
    provider: str = "liboqs"
    provider_name: str = ""  # identifier inside the provider
    seeded_keygen: bool = True
    key_bits: int | None = None

    @property
    def post_quantum(self) -> bool:
        return self.provider == "liboqs"

    @property
    def fixed_size(self) -> bool:
        return not self.signature_len_is_max


def _pqc(code, mnemonic, name, family, pk, sk, sig, oqs_name, is_max=False):
    return AlgorithmDescriptor(code, mnemonic, name, family, pk, sk, sig, is_max,
                               provider="liboqs", provider_name=oqs_name)


# IANA numbers for the classical schemes; experimental numbers from 17 for the rest.
_DESCRIPTORS: tuple[AlgorithmDescriptor, ...] = (
    AlgorithmDescriptor(8, "RSA2048", "RSA-2048", Family.RSA, 260, None, 256,
                        provider="classical", provider_name="rsa", seeded_keygen=False, key_bits=2048),
    AlgorithmDescriptor(8, "RSA4096", "RSA-4096", Family.RSA, 516, None, 512,
                        provider="classical", provider_name="rsa", seeded_keygen=False, key_bits=4096),
    AlgorithmDescriptor(13, "ECDSAP256SHA256", "ECDSA-P256", Family.ECDSA, 64, 32, 64,
                        provider="classical", provider_name="p256"),
    AlgorithmDescriptor(14, "ECDSAP384SHA384", "ECDSA-P384", Family.ECDSA, 96, 48, 96,
                        provider="classical", provider_name="p384"),
    AlgorithmDescriptor(15, "ED25519", "Ed25519", Family.ED25519, 32, 32, 64,
                        provider="classical", provider_name="ed25519"),
    _pqc(17, "MLDSA44", "ML-DSA-44", Family.ML_DSA, 1312, 2560, 2420, "ML-DSA-44"),
    _pqc(18, "MLDSA65", "ML-DSA-65", Family.ML_DSA, 1952, 4032, 3309, "ML-DSA-65"),
    _pqc(19, "MLDSA87", "ML-DSA-87", Family.ML_DSA, 2592, 4896, 4627, "ML-DSA-87"),
    _pqc(20, "FALCON512", "Falcon-512", Family.FALCON, 897, 1281, 752, "Falcon-512", is_max=True),
    _pqc(21, "FALCON1024", "Falcon-1024", Family.FALCON, 1793, 2305, 1462, "Falcon-1024", is_max=True),
    _pqc(22, "FALCONPADDED512", "Falcon-padded-512", Family.FALCON, 897, 1281, 666, "Falcon-padded-512"),
    _pqc(23, "FALCONPADDED1024", "Falcon-padded-1024", Family.FALCON, 1793, 2305, 1280, "Falcon-padded-1024"),
    _pqc(24, "SPHINCSSHA2128S", "SPHINCS+-SHA2-128s-simple", Family.SPHINCS, 32, 64, 7856,
         "SLH_DSA_PURE_SHA2_128S"),
    _pqc(25, "SPHINCSSHAKE128S", "SPHINCS+-SHAKE-128s-simple", Family.SPHINCS, 32, 64, 7856,
         "SLH_DSA_PURE_SHAKE_128S"),
    _pqc(26, "MAYO1", "MAYO-1", Family.MAYO, 1420, 24, 454, "MAYO-1"),
    _pqc(27, "MAYO3", "MAYO-3", Family.MAYO, 2986, 32, 681, "MAYO-3"),
    _pqc(28, "SNOVA2454", "SNOVA_24_5_4", Family.SNOVA, 1016, 48, 248, "SNOVA_24_5_4"),
    _pqc(29, "SNOVA2454SHAKE", "SNOVA_24_5_4_SHAKE", Family.SNOVA, 1016, 48, 248, "SNOVA_24_5_4_SHAKE"),
)

# extra spellings accepted on lookup, already normalized
_ALIASES = {
    "RSASHA256": "RSA2048",
    "ECDSAP256": "ECDSAP256SHA256",
    "ECDSAP384": "ECDSAP384SHA384",
    "SPHINCSSHA2128SSIMPLE": "SPHINCSSHA2128S",
    "SPHINCSSHAKE128SSIMPLE": "SPHINCSSHAKE128S",
    "SLHDSASHA2128S": "SPHINCSSHA2128S",
    "SLHDSASHAKE128S": "SPHINCSSHAKE128S",
}


def normalize_mnemonic(text: str) -> str:
    return re.sub(r"[^A-Z0-9]", "", text.upper())


class Registry:
    """An immutable set of descriptors with lookups by mnemonic and code point."""

    def __init__(self, descriptors: Iterable[AlgorithmDescriptor]):
        self._by_mnemonic: dict[str, AlgorithmDescriptor] = {}
        self._by_code: dict[int, list[AlgorithmDescriptor]] = {}
        for desc in descriptors:
            if desc.mnemonic in self._by_mnemonic:
                raise ValueError(f"duplicate mnemonic {desc.mnemonic}")
            self._by_mnemonic[desc.mnemonic] = desc
            bucket = self._by_code.setdefault(desc.code, [])
            # only RSA key sizes may share a code point
            if bucket and not (bucket[0].family is Family.RSA and desc.family is Family.RSA):
                raise ValueError(f"code point {desc.code} used by {bucket[0].mnemonic} and {desc.mnemonic}")
            bucket.append(desc)

    def __iter__(self):
        return iter(self._by_mnemonic.values())

    def __len__(self):
        return len(self._by_mnemonic)

    def get(self, mnemonic: str) -> AlgorithmDescriptor:
        key = normalize_mnemonic(mnemonic)
        key = _ALIASES.get(key, key)
        try:
            return self._by_mnemonic[key]
        except KeyError:
            raise UnknownAlgorithm(f"unknown algorithm {mnemonic!r}") from None

    def by_code(self, code: int, public_key: bytes | None = None) -> AlgorithmDescriptor:
        """Descriptor for a DNSSEC code point. RSA variants share code 8 and are told
        apart by the modulus size in ``public_key`` (default: the first registered)."""
        try:
            bucket = self._by_code[code]
        except KeyError:
            raise UnknownAlgorithm(f"algorithm code {code} not in registry") from None
        if len(bucket) > 1 and public_key is not None:
            for desc in bucket:
                if len(public_key) == desc.public_key_len:
                    return desc
        return bucket[0]

    def has_code(self, code: int) -> bool:
        return code in self._by_code

    def mnemonic_for_code(self, code: int) -> str | None:
        bucket = self._by_code.get(code)
        if not bucket:
            return None
        if len(bucket) == 1:
            return bucket[0].mnemonic
        return "RSASHA256" if bucket[0].family is Family.RSA else bucket[0].mnemonic

    def with_overrides(self, overrides: Mapping[str, int]) -> Registry:
        """New registry with code points replaced per ``{mnemonic: code}``."""
        changed = {self.get(m).mnemonic: int(code) for m, code in overrides.items()}
        for code in changed.values():
            if not 0 < code < 256:
                raise ValueError(f"code point {code} outside 1..255")
        return Registry(replace(d, code=changed.get(d.mnemonic, d.code)) for d in self)


_DEFAULT = Registry(_DESCRIPTORS)


def default_registry() -> Registry:
    return _DEFAULT


def registry() -> list[AlgorithmDescriptor]:
    """All 18 descriptors in registry order."""
    return list(_DEFAULT)


def lookup(mnemonic: str) -> AlgorithmDescriptor:
    return _DEFAULT.get(mnemonic)


# --------------------------------------------------------------------------- keys and operations


@dataclass(frozen=True)
class KeyPair:
    algorithm: AlgorithmDescriptor
    public_key: bytes
    private_key: bytes = field(repr=False)

    def __post_init__(self):
        alg = self.algorithm
        if len(self.public_key) != alg.public_key_len and alg.family is not Family.RSA:
            raise KeyMismatch(f"{alg.mnemonic} public key must be {alg.public_key_len} bytes, "
                              f"got {len(self.public_key)}")
        if alg.private_key_len is not None and len(self.private_key) != alg.private_key_len:
            raise KeyMismatch(f"{alg.mnemonic} private key must be {alg.private_key_len} bytes, "
                              f"got {len(self.private_key)}")


_providers: dict[str, object] = {}
_providers_lock = threading.Lock()


def get_provider(alg: AlgorithmDescriptor):
    """The provider object for ``alg`` (created on first use, then shared)."""
    with _providers_lock:
        prov = _providers.get(alg.provider)
        if prov is None:
            if alg.provider == "classical":
                from .classical import ClassicalProvider

                prov = ClassicalProvider()
            elif alg.provider == "liboqs":
                from .liboqs_wasm import LiboqsWasmProvider

                prov = LiboqsWasmProvider()
            else:
                raise ProviderUnavailable(f"no provider named {alg.provider!r}")
            _providers[alg.provider] = prov
        return prov


def generate_keypair(alg: AlgorithmDescriptor, rng_seed: bytes | None = None) -> KeyPair:
    public, private = get_provider(alg).generate(alg, rng_seed)
    return KeyPair(alg, public, private)


def sign(key: KeyPair, message: bytes) -> bytes:
    if not message:
        raise ValueError("refusing to sign an empty message")
    alg = key.algorithm
    sig = get_provider(alg).sign(alg, key.private_key, message)
    if len(sig) > alg.signature_len or (alg.fixed_size and len(sig) != alg.signature_len):
        raise ProviderError(f"{alg.mnemonic} produced a {len(sig)}-byte signature")
    return sig


def verify(alg: AlgorithmDescriptor, public_key: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is valid. Malformed input is a rejection, never an exception;
    only an unavailable provider raises."""
    if not signature or len(signature) > alg.signature_len:
        return False
    if alg.fixed_size and len(signature) != alg.signature_len:
        return False
    return get_provider(alg).verify(alg, public_key, message, signature)


__all__ = [
    "Family", "AlgorithmDescriptor", "Registry", "KeyPair", "registry", "lookup",
    "default_registry", "generate_keypair", "sign", "verify", "get_provider",
    "AlgorithmError", "UnknownAlgorithm", "ProviderUnavailable", "ProviderError", "KeyMismatch",
]
