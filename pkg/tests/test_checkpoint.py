import csv
import json

import numpy as np
import pytest

from app.models.models import CheckpointRecord, ConfusionMatrix
from app.services import reports
from app.services.checkpoint import checkpoint_paths, load_checkpoint, save_checkpoint
from app.validators.errors import DatasetFormatError


@pytest.fixture
def record():
    return CheckpointRecord(
        step=7,
        parameters={"backbone.pos": np.arange(6.0).reshape(2, 3), "mea.block1.router.weight": np.array([0.5, -1.0]),
                    "scale": np.array(2.0)},
        frozen={"backbone.pos": True, "mea.block1.router.weight": False, "scale": False},
        config_json='{"run": {"seed": 0}}',
        config_hash="abc123",
        metrics={"acc_all": 0.5},
    )


def test_checkpoint_reload(tmp_path, record):
    save_checkpoint(record, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    assert loaded.step == 7
    assert loaded.frozen == record.frozen
    assert loaded.config_json == record.config_json
    assert loaded.metrics == {"acc_all": 0.5}
    assert list(loaded.parameters) == list(record.parameters)
    for name, values in record.parameters.items():
        np.testing.assert_array_equal(loaded.parameters[name], values)
        assert loaded.parameters[name].shape == values.shape


def test_manifest_lists_offsets(tmp_path, record):
    manifest, binary = checkpoint_paths(tmp_path / "ckpt")
    save_checkpoint(record, tmp_path / "ckpt")
    entries = manifest.read_text().split("params:\n")[1].splitlines()
    assert entries == ["backbone.pos\t2x3\t1\t0\t6", "mea.block1.router.weight\t2\t0\t6\t2", "scale\tscalar\t0\t8\t1"]
    assert binary.stat().st_size == 9 * 8


def test_bad_manifest_header(tmp_path, record):
    manifest, _ = checkpoint_paths(tmp_path / "ckpt")
    save_checkpoint(record, tmp_path / "ckpt")
    manifest.write_text("not a checkpoint\n")
    with pytest.raises(DatasetFormatError):
        load_checkpoint(tmp_path / "ckpt")


def test_truncated_binary(tmp_path, record):
    _, binary = checkpoint_paths(tmp_path / "ckpt")
    save_checkpoint(record, tmp_path / "ckpt")
    binary.write_bytes(binary.read_bytes()[:-8])
    with pytest.raises(DatasetFormatError, match="does not fit"):
        load_checkpoint(tmp_path / "ckpt")


def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


def test_confusion_csv(tmp_path):
    counts = np.array([[2, 0], [1, 3]])
    rows = read_csv(reports.write_confusion(tmp_path / "confusion.csv", ConfusionMatrix(counts=counts)))
    assert rows == [["predicted", "class_0", "class_1"], ["0", "2", "0"], ["1", "1", "3"]]


def test_missing_values_are_blank(tmp_path):
    rows = read_csv(reports.write_route_stats(tmp_path / "routes.csv", [
        {"block": 0, "group": "new", "expert_id": 1, "mean_weight": None},
    ]))
    assert rows[1] == ["0", "new", "1", ""]


def test_route_dump_rows(tmp_path):
    pooled = {3: np.array([[0.25, 0.75]]), 2: np.array([[1.0, 0.0]])}
    rows = read_csv(reports.write_route_dump(tmp_path / "dump.csv", np.array([11]), pooled))
    assert rows[0] == list(reports.ROUTE_DUMP_COLUMNS)
    assert rows[1:] == [["2", "11", "0", "1.0"], ["2", "11", "1", "0.0"],
                        ["3", "11", "0", "0.25"], ["3", "11", "1", "0.75"]]


def test_features_mark_old_classes(tmp_path):
    path = reports.write_features(tmp_path / "features.csv", np.array([4, 5]), np.array([0, 3]), (0, 1),
                                  np.array([[0.5, 1.0], [2.0, 3.0]]))
    rows = read_csv(path)
    assert rows[0] == ["sample_id", "label", "is_old", "f0", "f1"]
    assert [row[2] for row in rows[1:]] == ["1", "0"]


def test_json_is_sorted(tmp_path):
    path = reports.write_json(tmp_path / "nested" / "report.json", {"b": 1, "a": None})
    assert json.loads(path.read_text()) == {"a": None, "b": 1}
    assert path.read_text().index('"a"') < path.read_text().index('"b"')
