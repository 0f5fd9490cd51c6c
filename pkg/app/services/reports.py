import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, TextIO

import numpy as np

from app.models.models import ConfusionMatrix

logger = logging.getLogger(__name__)

ROUTE_STATS_COLUMNS = ("block", "group", "expert_id", "mean_weight")
ROUTE_DUMP_COLUMNS = ("block", "sample_id", "expert_id", "pooled_weight")


def _format(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row.get(column)) for column in columns])
    return path


def write_json(path: Path, payload: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def append_jsonl(handle: TextIO, record: Mapping[str, Any]) -> None:
    handle.write(json.dumps(record, sort_keys=True) + "\n")


def write_confusion(path: Path, cm: ConfusionMatrix) -> Path:
    """Rows are predicted clusters, columns true classes."""
    columns = ["predicted"] + [f"class_{k}" for k in range(cm.size)]
    rows = []
    for cluster in range(cm.size):
        row: Dict[str, Any] = {"predicted": cluster}
        row.update({f"class_{k}": int(cm.counts[cluster, k]) for k in range(cm.size)})
        rows.append(row)
    return write_csv(path, columns, rows)


def write_route_stats(path: Path, rows: List[Dict[str, Any]]) -> Path:
    return write_csv(path, ROUTE_STATS_COLUMNS, rows)


def write_route_dump(path: Path, sample_ids: np.ndarray, pooled: Mapping[int, np.ndarray]) -> Path:
    """One row per (block, sample, expert) pooled route weight."""
    def rows():
        for block in sorted(pooled):
            for sample_id, weights in zip(sample_ids, pooled[block]):
                for expert, weight in enumerate(weights):
                    yield {"block": block, "sample_id": int(sample_id), "expert_id": expert,
                           "pooled_weight": float(weight)}
    return write_csv(path, ROUTE_DUMP_COLUMNS, rows())


def write_features(path: Path, sample_ids: np.ndarray, labels: np.ndarray, old_classes: Sequence[int],
                   features: np.ndarray) -> Path:
    columns = ["sample_id", "label", "is_old"] + [f"f{j}" for j in range(features.shape[1])]
    old = set(old_classes)

    def rows():
        for sample_id, label, vector in zip(sample_ids, labels, features):
            row: Dict[str, Any] = {"sample_id": int(sample_id), "label": int(label), "is_old": int(label in old)}
            row.update({f"f{j}": float(value) for j, value in enumerate(vector)})
            yield row
    return write_csv(path, columns, rows())


def write_attention(path: Path, sample_ids: np.ndarray, attention: np.ndarray) -> Path:
    """Last-block class-token attention: N x heads x tokens."""
    def rows():
        for sample_id, per_head in zip(sample_ids, attention):
            for head, weights in enumerate(per_head):
                for token, weight in enumerate(weights):
                    yield {"sample_id": int(sample_id), "head": head, "token": token, "weight": float(weight)}
    return write_csv(path, ("sample_id", "head", "token", "weight"), rows())


REFERENCE_RECORD = Path(__file__).resolve().parents[2] / "reference" / "acceptance.json"


def load_reference(path: Path = REFERENCE_RECORD) -> Dict[str, Any]:
    """Thresholds and last measured values of the acceptance runs."""
    return json.loads(Path(path).read_text())


def record_reference(name: str, measured: Mapping[str, Any], path: Path = REFERENCE_RECORD) -> Path:
    """Store one acceptance check's measured values next to its thresholds."""
    record = load_reference(path)
    record.setdefault(name, {})["measured"] = dict(measured)
    logger.info("recorded %s reference values in %s", name, path)
    return write_json(path, record)
