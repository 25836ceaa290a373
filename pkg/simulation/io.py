"""
Output helpers: CSV tables, JSON documents and canonical hashing.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
FLOAT_FORMAT = "%.17g"


def to_jsonable(value):
    """Convert numpy scalars/arrays and non-finite floats for JSON output"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if np.isnan(value):
            return "nan"
        if np.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, Path):
        return str(value)
    return value


def canonical_json(data) -> str:
    return json.dumps(to_jsonable(data), sort_keys=True, separators=(",", ":"))


def canonical_hash(data) -> str:
    """sha256 of the canonical JSON rendering"""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def write_csv(path: Union[str, Path], rows: List[Dict], columns: Iterable[str]) -> Path:
    """Write rows with a fixed column order at full double precision"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"✅ Wrote {len(frame)} rows to {path}")
    return path


def write_json(path: Union[str, Path], data: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(to_jsonable(data), handle, indent=2, sort_keys=True)
        handle.write("\n")
    logger.info(f"✅ Wrote {path}")
    return path


def read_json(path: Union[str, Path]) -> Dict:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
