"""Post-quantum signatures from liboqs, compiled to WebAssembly and run under wasmtime.

The vendored modules (``_wasm/*.wasm.gz``, one per family) are the emscripten builds
shipped in the ``@openforge-sh/liboqs`` npm package; ``tools/vendor_liboqs_wasm.py``
regenerates them. This module plays the part of the emscripten JS glue: it supplies
the four host imports (exit, fd_write, getentropy, heap growth) and calls the
``OQS_SIG_*`` C API directly.

Every algorithm gets its own instance (own linear memory) guarded by a lock, so
concurrent callers are serialized per algorithm.
"""

from __future__ import annotations

import atexit
import gzip
import hashlib
import json
import logging
import os
import struct
import threading
from importlib import metadata, resources
from pathlib import Path

from . import AlgorithmDescriptor, KeyMismatch, ProviderError, ProviderUnavailable

log = logging.getLogger(__name__)

try:
    import wasmtime
except ImportError:  # pragma: no cover - exercised only without the dependency
    wasmtime = None

FAMILY_MODULES = {
    "ML-DSA": "ml_dsa",
    "FALCON": "falcon",
    "SPHINCS+": "slh_dsa",
    "MAYO": "mayo",
    "SNOVA": "snova",
}

# OQS_SIG struct on wasm32: two char*, four 1-byte fields, then three size_t lengths
_SIG_LENGTHS_OFFSET = 12


class _WasmExit(Exception):
    pass


class _Entropy:
    """getentropy() backend: the OS by default, a SHAKE-256 stream when seeded."""

    def __init__(self):
        self._seed: bytes | None = None
        self._counter = 0

    def seed(self, seed: bytes | None) -> None:
        self._seed = seed
        self._counter = 0

    def read(self, n: int) -> bytes:
        if self._seed is None:
            return os.urandom(n)
        self._counter += 1
        return hashlib.shake_256(self._seed + self._counter.to_bytes(8, "big")).digest(n)


def _cache_dir() -> Path | None:
    base = os.environ.get("PQDNSSEC_CACHE_DIR")
    if base:
        return Path(base)
    xdg = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
    return Path(xdg) / "pqdnssec" / "wasm"


class _Instance:
    def __init__(self, engine, module, exports: dict[str, str], ctor: str, alg: AlgorithmDescriptor):
        self.alg = alg
        self.lock = threading.Lock()
        self.entropy = _Entropy()
        self.store = wasmtime.Store(engine)
        self._memory = None
        handlers = {
            (1, 0): self._exit,
            (4, 1): self._fd_write,
            (2, 1): self._getentropy,
            (1, 1): self._grow,
        }
        imports = []
        for imp in module.imports:
            sig = (len(imp.type.params), len(imp.type.results))
            if sig not in handlers:
                raise ProviderUnavailable(f"unexpected wasm import {imp.module}.{imp.name}")
            imports.append(wasmtime.Func(self.store, imp.type, handlers[sig]))
        instance = wasmtime.Instance(self.store, module, imports)
        ex = instance.exports(self.store)
        self._memory = next(ex[e.name] for e in module.exports if isinstance(e.type, wasmtime.MemoryType))
        self._fn = {name: ex[letter] for name, letter in exports.items()}
        ex[ctor](self.store)
        self._fn["OQS_init"](self.store)
        name = alg.provider_name.encode() + b"\x00"
        ptr = self._alloc(name)
        self.sig = self._fn["OQS_SIG_new"](self.store, ptr)
        self._free(ptr)
        if not self.sig:
            raise ProviderUnavailable(f"liboqs build lacks {alg.provider_name}")
        self._check_struct()

    # host imports
    @staticmethod
    def _exit(code):
        raise _WasmExit(f"wasm module called exit({code})")

    def _fd_write(self, fd, iov, iovcnt, pnum):
        total = 0
        for i in range(iovcnt):
            base, length = struct.unpack("<II", self._read(iov + 8 * i, 8))
            log.debug("liboqs fd %d: %r", fd, self._read(base, length))
            total += length
        self._write(struct.pack("<I", total), pnum)
        return 0

    def _getentropy(self, ptr, length):
        self._write(self.entropy.read(length), ptr)
        return 0

    def _grow(self, requested):
        current = self._memory.data_len(self.store)
        pages = (requested - current + 0xFFFF) // 0x10000
        try:
            self._memory.grow(self.store, max(pages, 0))
        except Exception:
            return 0
        return 1

    # memory helpers
    def _read(self, ptr: int, n: int) -> bytes:
        return bytes(self._memory.read(self.store, ptr, ptr + n))

    def _write(self, data: bytes, ptr: int) -> None:
        self._memory.write(self.store, data, ptr)

    def _alloc(self, data: bytes | int) -> int:
        n = data if isinstance(data, int) else len(data)
        ptr = self._fn["malloc"](self.store, max(n, 1))
        if not ptr:
            raise ProviderError("wasm malloc failed")
        if not isinstance(data, int):
            self._write(data, ptr)
        return ptr

    def _free(self, ptr: int) -> None:
        self._fn["free"](self.store, ptr)

    def _check_struct(self):
        pk, sk, sig = struct.unpack("<III", self._read(self.sig + _SIG_LENGTHS_OFFSET, 12))
        alg = self.alg
        if (pk, sk, sig) != (alg.public_key_len, alg.private_key_len, alg.signature_len):
            raise ProviderUnavailable(
                f"liboqs reports {alg.provider_name} sizes {pk}/{sk}/{sig}, registry has "
                f"{alg.public_key_len}/{alg.private_key_len}/{alg.signature_len}")

    # OQS_SIG API
    def keypair(self, seed: bytes | None) -> tuple[bytes, bytes]:
        alg = self.alg
        with self.lock:
            self.entropy.seed(seed)
            pk = self._alloc(alg.public_key_len)
            sk = self._alloc(alg.private_key_len)
            try:
                rc = self._fn["OQS_SIG_keypair"](self.store, self.sig, pk, sk)
                if rc != 0:
                    raise ProviderError(f"{alg.mnemonic} keypair returned {rc}")
                return self._read(pk, alg.public_key_len), self._read(sk, alg.private_key_len)
            finally:
                self.entropy.seed(None)
                self._write(bytes(alg.private_key_len), sk)
                self._free(pk)
                self._free(sk)

    def sign(self, private: bytes, message: bytes) -> bytes:
        alg = self.alg
        with self.lock:
            sk = self._alloc(private)
            msg = self._alloc(message)
            out = self._alloc(alg.signature_len)
            outlen = self._alloc(struct.pack("<I", alg.signature_len))
            try:
                rc = self._fn["OQS_SIG_sign"](self.store, self.sig, out, outlen, msg, len(message), sk)
                if rc != 0:
                    raise ProviderError(f"{alg.mnemonic} sign returned {rc}")
                (n,) = struct.unpack("<I", self._read(outlen, 4))
                return self._read(out, n)
            finally:
                self._write(bytes(len(private)), sk)
                for ptr in (sk, msg, out, outlen):
                    self._free(ptr)

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        with self.lock:
            ptrs = [self._alloc(message), self._alloc(signature), self._alloc(public)]
            try:
                rc = self._fn["OQS_SIG_verify"](self.store, self.sig, ptrs[0], len(message),
                                                ptrs[1], len(signature), ptrs[2])
                return rc == 0
            finally:
                for ptr in ptrs:
                    self._free(ptr)


class LiboqsWasmProvider:
    def __init__(self):
        if wasmtime is None:
            raise ProviderUnavailable("the wasmtime package is not installed")
        data = resources.files(__package__) / "_wasm"
        self._data = data
        self._manifest = json.loads((data / "manifest.json").read_text())
        self._engine = wasmtime.Engine()
        self._modules: dict[str, object] = {}
        self._instances: dict[str, _Instance] = {}
        self._lock = threading.Lock()
        atexit.register(self.close)

    def close(self) -> None:
        """Drop wasm objects while the interpreter is still intact."""
        with self._lock:
            self._instances.clear()
            self._modules.clear()

    @property
    def source(self) -> str:
        return self._manifest["source"]

    def _module(self, family: str):
        mod = self._modules.get(family)
        if mod is not None:
            return mod
        entry = self._manifest["families"][family]
        wasm = gzip.decompress((self._data / entry["file"]).read_bytes())
        if hashlib.sha256(wasm).hexdigest() != entry["sha256"]:
            raise ProviderUnavailable(f"{entry['file']} does not match its manifest digest")
        mod = self._load_cached(entry["sha256"], wasm)
        self._modules[family] = mod
        return mod

    def _load_cached(self, digest: str, wasm: bytes):
        cache = _cache_dir()
        path = cache / f"{digest[:32]}-wasmtime{metadata.version('wasmtime')}.cwasm"
        if path.is_file():
            try:
                return wasmtime.Module.deserialize_file(self._engine, str(path))
            except Exception as exc:
                log.debug("ignoring stale compiled module %s: %s", path, exc)
        module = wasmtime.Module(self._engine, wasm)
        try:
            cache.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".{os.getpid()}.tmp")
            tmp.write_bytes(module.serialize())
            os.replace(tmp, path)
        except OSError as exc:
            log.debug("cannot cache compiled module: %s", exc)
        return module

    def _instance(self, alg: AlgorithmDescriptor) -> _Instance:
        with self._lock:
            inst = self._instances.get(alg.provider_name)
            if inst is None:
                family = FAMILY_MODULES.get(alg.family.value)
                if family is None:
                    raise ProviderUnavailable(f"no liboqs module for family {alg.family.value}")
                entry = self._manifest["families"][family]
                try:
                    inst = _Instance(self._engine, self._module(family), entry["exports"], entry["ctor"], alg)
                except (wasmtime.WasmtimeError, wasmtime.Trap, _WasmExit) as exc:
                    raise ProviderUnavailable(f"cannot start liboqs for {alg.mnemonic}: {exc}") from exc
                self._instances[alg.provider_name] = inst
            return inst

    def preload(self, alg: AlgorithmDescriptor) -> None:
        self._instance(alg)

    def generate(self, alg: AlgorithmDescriptor, seed: bytes | None) -> tuple[bytes, bytes]:
        try:
            return self._instance(alg).keypair(seed)
        except (wasmtime.WasmtimeError, wasmtime.Trap, _WasmExit) as exc:
            raise ProviderError(f"{alg.mnemonic} key generation failed: {exc}") from exc

    def sign(self, alg: AlgorithmDescriptor, private: bytes, message: bytes) -> bytes:
        if len(private) != alg.private_key_len:
            raise KeyMismatch(f"{alg.mnemonic} private key must be {alg.private_key_len} bytes")
        try:
            return self._instance(alg).sign(private, message)
        except (wasmtime.WasmtimeError, wasmtime.Trap, _WasmExit) as exc:
            raise ProviderError(f"{alg.mnemonic} signing failed: {exc}") from exc

    def verify(self, alg: AlgorithmDescriptor, public: bytes, message: bytes, signature: bytes) -> bool:
        if len(public) != alg.public_key_len:
            return False
        inst = self._instance(alg)
        try:
            return inst.verify(public, message, signature)
        except (wasmtime.WasmtimeError, wasmtime.Trap, _WasmExit):
            return False
