"""Puts the cargo-built extension on sys.path as `fineflow_py`.

Build it first with `cargo build -p fineflow-py` (or `--release`).
"""

import importlib.machinery
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def _built_library():
    names = ["libfineflow_py.so", "libfineflow_py.dylib", "fineflow_py.dll"]
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    found = [target / p / n for p in ("release", "debug") for n in names if (target / p / n).exists()]
    if not found:
        raise RuntimeError("fineflow-py is not built; run `cargo build -p fineflow-py`")
    return max(found, key=lambda p: p.stat().st_mtime)


_dir = Path(tempfile.mkdtemp(prefix="fineflow_py_"))
shutil.copy(_built_library(), _dir / ("fineflow_py" + importlib.machinery.EXTENSION_SUFFIXES[0]))
sys.path.insert(0, str(_dir))
