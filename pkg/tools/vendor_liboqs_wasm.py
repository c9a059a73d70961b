#!/usr/bin/env python3
"""Regenerate the vendored liboqs WebAssembly modules.

Reads the ``@openforge-sh/liboqs`` npm tarball (``npm pack @openforge-sh/liboqs@0.14.3``),
pulls the base64-embedded wasm binary and the minified export names out of each
family's emscripten glue, and writes ``<family>.wasm.gz`` plus ``manifest.json`` into
``src/pqdnssec/algoreg/_wasm``.

Usage: tools/vendor_liboqs_wasm.py openforge-sh-liboqs-0.14.3.tgz
"""

import base64
import gzip
import hashlib
import json
import re
import sys
import tarfile
from pathlib import Path

PACKAGE_VERSION = "0.14.3"
# one representative glue file per family; every parameter set of a family ships the same binary
FAMILIES = {
    "ml_dsa": "ml-dsa-44",
    "falcon": "falcon-512",
    "slh_dsa": "slh-dsa-sha2-128s",
    "mayo": "mayo-1",
    "snova": "snova-24-5-4",
}
OUT = Path(__file__).resolve().parent.parent / "src" / "pqdnssec" / "algoreg" / "_wasm"


def extract(glue: str) -> tuple[bytes, dict[str, str], str]:
    wasm = base64.b64decode(re.search(r'"(AGFzbQ[A-Za-z0-9+/=]+)"', glue).group(1))
    exports = {name.lstrip("_"): letter for name, letter in re.findall(r"d\.(_\w+)=\w\.(\w+);", glue)}
    ctor = re.search(r"calledRun=!0;if\(!\w+\)\{\w+=!0;\w+\.(\w+)\(\)", glue).group(1)
    return wasm, exports, ctor


def main(argv: list[str]) -> int:
    if len(argv) != 2:
        print(__doc__, file=sys.stderr)
        return 2
    manifest = {"source": f"@openforge-sh/liboqs@{PACKAGE_VERSION}", "families": {}}
    with tarfile.open(argv[1]) as tar:
        OUT.mkdir(parents=True, exist_ok=True)
        lic = tar.extractfile("package/LICENSE.md").read()
        (OUT / "LICENSE.md").write_bytes(lic)
        for family, stem in FAMILIES.items():
            glue = tar.extractfile(f"package/dist/{stem}.min.js").read().decode()
            wasm, exports, ctor = extract(glue)
            (OUT / f"{family}.wasm.gz").write_bytes(gzip.compress(wasm, 9, mtime=0))
            manifest["families"][family] = {
                "file": f"{family}.wasm.gz",
                "sha256": hashlib.sha256(wasm).hexdigest(),
                "ctor": ctor,
                "exports": exports,
            }
            print(f"{family}: {len(wasm)} bytes, ctor={ctor}")
    (OUT / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
