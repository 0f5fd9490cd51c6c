"""
Checkpoint files: <stem>.manifest (text) + <stem>.bin (raw parameter values).
"""
import json
import logging
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from app.models.models import CheckpointRecord
from app.validators.errors import DatasetFormatError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "# adaptgcd checkpoint v1"
LAYOUT_LINE = ("# layout: little-endian IEEE-754 float64, C order; arrays concatenated in manifest "
               "order; offset and count are in values, not bytes")
PARAMS_MARKER = "params:"
BIN_DTYPE = np.dtype("<f8")


def checkpoint_paths(stem: Path) -> Tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".manifest"), stem.with_suffix(".bin")


def save_checkpoint(record: CheckpointRecord, stem: Path) -> Path:
    manifest_path, bin_path = checkpoint_paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    lines = [MANIFEST_VERSION, LAYOUT_LINE,
             f"step={record.step}",
             f"config_hash={record.config_hash}",
             f"config={record.config_json}",
             f"metrics={json.dumps(record.metrics, sort_keys=True)}",
             PARAMS_MARKER]
    offset = 0
    chunks = []
    for name, values in record.parameters.items():
        values = np.ascontiguousarray(values, dtype=BIN_DTYPE)
        shape = "x".join(str(extent) for extent in values.shape) or "scalar"
        frozen = int(record.frozen.get(name, False))
        lines.append(f"{name}\t{shape}\t{frozen}\t{offset}\t{values.size}")
        chunks.append(values.reshape(-1))
        offset += values.size

    manifest_path.write_text("\n".join(lines) + "\n")
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=BIN_DTYPE)
    bin_path.write_bytes(blob.astype(BIN_DTYPE).tobytes())
    logger.info("saved checkpoint (%d arrays, %d values) to %s", len(chunks), offset, manifest_path)
    return manifest_path


def _parse_shape(text: str) -> Tuple[int, ...]:
    return () if text == "scalar" else tuple(int(extent) for extent in text.split("x"))


def load_checkpoint(stem: Path) -> CheckpointRecord:
    manifest_path, bin_path = checkpoint_paths(stem)
    lines = manifest_path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_VERSION:
        raise DatasetFormatError(f"{manifest_path}: not a checkpoint manifest")
    try:
        marker = lines.index(PARAMS_MARKER)
    except ValueError:
        raise DatasetFormatError(f"{manifest_path}: missing '{PARAMS_MARKER}' section") from None

    meta: Dict[str, str] = {}
    for line in lines[1:marker]:
        if line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key] = value

    values = np.frombuffer(bin_path.read_bytes(), dtype=BIN_DTYPE)
    parameters: Dict[str, np.ndarray] = {}
    frozen: Dict[str, bool] = {}
    for line in lines[marker + 1:]:
        if not line.strip():
            continue
        try:
            name, shape_text, frozen_text, offset_text, count_text = line.split("\t")
            shape, offset, count = _parse_shape(shape_text), int(offset_text), int(count_text)
        except ValueError as e:
            raise DatasetFormatError(f"{manifest_path}: malformed entry '{line}'") from e
        if offset + count > values.size or int(np.prod(shape)) != count:
            raise DatasetFormatError(f"{manifest_path}: entry '{name}' does not fit {bin_path}")
        parameters[name] = values[offset:offset + count].reshape(shape).copy()
        frozen[name] = frozen_text == "1"

    try:
        return CheckpointRecord(step=int(meta["step"]), parameters=parameters, frozen=frozen,
                                config_json=meta["config"], config_hash=meta["config_hash"],
                                metrics=json.loads(meta.get("metrics", "{}")))
    except (KeyError, ValueError) as e:
        raise DatasetFormatError(f"{manifest_path}: incomplete header: {e}") from e
