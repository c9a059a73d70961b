"""RSA/SHA-256, ECDSA P-256/P-384 and Ed25519 in their DNSSEC encodings.

Public keys use the DNSKEY layouts of RFC 3110 (RSA), RFC 6605 (ECDSA, raw X||Y)
and RFC 8080 (Ed25519). ECDSA signatures are raw r||s. Private keys are the raw
scalar or seed for ECDSA/Ed25519 and PKCS#8 DER for RSA.
"""

from __future__ import annotations

import hashlib
import logging
import threading

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519, padding, rsa
from cryptography.hazmat.primitives.asymmetric.utils import decode_dss_signature, encode_dss_signature

from . import AlgorithmDescriptor, KeyMismatch, ProviderError

log = logging.getLogger(__name__)

_CURVES = {
    "p256": (ec.SECP256R1(), hashes.SHA256(), 32),
    "p384": (ec.SECP384R1(), hashes.SHA384(), 48),
}


def rsa_public_rdata(key: rsa.RSAPublicKey) -> bytes:
    nums = key.public_numbers()
    exp = nums.e.to_bytes((nums.e.bit_length() + 7) // 8, "big")
    mod = nums.n.to_bytes((nums.n.bit_length() + 7) // 8, "big")
    if len(exp) < 256:
        head = bytes([len(exp)])
    else:
        head = b"\x00" + len(exp).to_bytes(2, "big")
    return head + exp + mod


def rsa_public_from_rdata(data: bytes) -> rsa.RSAPublicKey:
    if not data:
        raise KeyMismatch("empty RSA public key")
    if data[0]:
        elen, off = data[0], 1
    else:
        if len(data) < 3:
            raise KeyMismatch("truncated RSA exponent length")
        elen, off = int.from_bytes(data[1:3], "big"), 3
    exp = int.from_bytes(data[off : off + elen], "big")
    mod = int.from_bytes(data[off + elen :], "big")
    if not exp or not mod:
        raise KeyMismatch("malformed RSA public key")
    return rsa.RSAPublicNumbers(exp, mod).public_key()


class ClassicalProvider:
    """Stateless apart from a parsed-key cache; ``cryptography`` objects are thread-safe."""

    def __init__(self):
        self._cache: dict[tuple[str, bytes], object] = {}
        self._lock = threading.Lock()

    def generate(self, alg: AlgorithmDescriptor, seed: bytes | None) -> tuple[bytes, bytes]:
        kind = alg.provider_name
        if kind == "rsa":
            if seed is not None:
                log.warning("%s: seeded key generation unsupported, using system randomness", alg.mnemonic)
            priv = rsa.generate_private_key(65537, alg.key_bits)
            der = priv.private_bytes(serialization.Encoding.DER, serialization.PrivateFormat.PKCS8,
                                     serialization.NoEncryption())
            return rsa_public_rdata(priv.public_key()), der
        if kind == "ed25519":
            raw = hashlib.shake_256(seed).digest(32) if seed is not None else None
            priv = (ed25519.Ed25519PrivateKey.from_private_bytes(raw) if raw
                    else ed25519.Ed25519PrivateKey.generate())
            pub = priv.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
            return pub, priv.private_bytes(serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
                                           serialization.NoEncryption())
        curve, _, size = _CURVES[kind]
        if seed is not None:
            order = _ORDERS[kind]
            scalar = int.from_bytes(hashlib.shake_256(seed).digest(size + 16), "big") % (order - 1) + 1
            priv = ec.derive_private_key(scalar, curve)
        else:
            priv = ec.generate_private_key(curve)
        return self._ec_public(priv.public_key(), size), priv.private_numbers().private_value.to_bytes(size, "big")

    @staticmethod
    def _ec_public(pub: ec.EllipticCurvePublicKey, size: int) -> bytes:
        point = pub.public_bytes(serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)
        return point[1:]  # drop the 0x04 prefix

    def _private(self, alg: AlgorithmDescriptor, private: bytes):
        key = (alg.provider_name, private)
        with self._lock:
            obj = self._cache.get(key)
        if obj is not None:
            return obj
        kind = alg.provider_name
        try:
            if kind == "rsa":
                obj = serialization.load_der_private_key(private, None)
                if not isinstance(obj, rsa.RSAPrivateKey):
                    raise KeyMismatch("not an RSA private key")
            elif kind == "ed25519":
                obj = ed25519.Ed25519PrivateKey.from_private_bytes(private)
            else:
                obj = ec.derive_private_key(int.from_bytes(private, "big"), _CURVES[kind][0])
        except (ValueError, TypeError) as exc:
            raise KeyMismatch(f"{alg.mnemonic}: unusable private key: {exc}") from exc
        with self._lock:
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = obj
        return obj

    def public_from_private(self, alg: AlgorithmDescriptor, private: bytes) -> bytes:
        priv = self._private(alg, private)
        if alg.provider_name == "rsa":
            return rsa_public_rdata(priv.public_key())
        if alg.provider_name == "ed25519":
            return priv.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return self._ec_public(priv.public_key(), _CURVES[alg.provider_name][2])

    def sign(self, alg: AlgorithmDescriptor, private: bytes, message: bytes) -> bytes:
        priv = self._private(alg, private)
        kind = alg.provider_name
        try:
            if kind == "rsa":
                return priv.sign(message, padding.PKCS1v15(), hashes.SHA256())
            if kind == "ed25519":
                return priv.sign(message)
            _, digest, size = _CURVES[kind]
            r, s = decode_dss_signature(priv.sign(message, ec.ECDSA(digest)))
            return r.to_bytes(size, "big") + s.to_bytes(size, "big")
        except (ValueError, TypeError) as exc:
            raise ProviderError(f"{alg.mnemonic} signing failed: {exc}") from exc

    def verify(self, alg: AlgorithmDescriptor, public: bytes, message: bytes, signature: bytes) -> bool:
        kind = alg.provider_name
        try:
            if kind == "rsa":
                pub = rsa_public_from_rdata(public)
                pub.verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
            elif kind == "ed25519":
                ed25519.Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
            else:
                curve, digest, size = _CURVES[kind]
                if len(public) != 2 * size or len(signature) != 2 * size:
                    return False
                pub = ec.EllipticCurvePublicKey.from_encoded_point(curve, b"\x04" + public)
                der = encode_dss_signature(int.from_bytes(signature[:size], "big"),
                                           int.from_bytes(signature[size:], "big"))
                pub.verify(der, message, ec.ECDSA(digest))
        except (InvalidSignature, ValueError, TypeError, KeyMismatch):
            return False
        return True


_ORDERS = {
    "p256": 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551,
    "p384": int(
        "FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFC7634D81F4372DDF581A0DB248B0A77AECEC196ACCC52973", 16
    ),
}
