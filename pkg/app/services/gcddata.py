"""
Synthetic GCD data in token space.

Each class is a Gaussian archetype of token_count x input_dim values; samples
are archetype + noise. Old classes have a labeled share, new classes are
unlabeled only.

.gcd file layout:
    ASCII header lines "key=value" (the DatasetSpec fields plus count and
    old_classes), terminated by the line "end_header"; then `count` packed
    little-endian records: int32 id, int32 label, int32 labeled flag,
    float64 tokens[token_count][input_dim] in C order.
"""
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.models.config import DatasetSpec
from app.models.models import BatchViews, GcdSplit, Sample
from app.validators.errors import DatasetFormatError, GcdValidationError
from app.validators.validators import DatasetValidator

logger = logging.getLogger(__name__)

HEADER_MAGIC = "gcd-dataset v1"
HEADER_END = b"end_header\n"
MAX_DROPOUT = 0.5


def class_sizes(spec: DatasetSpec) -> List[int]:
    """Per-class sample counts; geometric decay down to n / imbalance_ratio when long-tailed."""
    if spec.imbalance_ratio == 1.0:
        return [spec.samples_per_class] * spec.num_classes
    sizes = []
    for k in range(spec.num_classes):
        decay = spec.imbalance_ratio ** (-k / (spec.num_classes - 1))
        sizes.append(max(2, int(round(spec.samples_per_class * decay))))
    return sizes


def labeled_count(fraction: float, size: int) -> int:
    # every old class keeps at least one labeled and one unlabeled sample
    return int(min(max(round(fraction * size), 1), size - 1))


def generate(spec: DatasetSpec) -> GcdSplit:
    """Deterministic synthetic split for the given spec."""
    DatasetValidator.validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    shape = (spec.token_count, spec.input_dim)
    archetypes = rng.normal(0.0, spec.separation / np.sqrt(spec.input_dim),
                            size=(spec.num_classes,) + shape)
    old_classes = tuple(range(spec.num_old_classes))

    labeled, unlabeled = [], []
    next_id = 0
    for label, size in enumerate(class_sizes(spec)):
        tokens = archetypes[label] + rng.normal(0.0, spec.noise, size=(size,) + shape)
        chosen = set()
        if label in old_classes:
            chosen = set(rng.permutation(size)[:labeled_count(spec.labeled_fraction, size)].tolist())
        for index in range(size):
            sample = Sample(id=next_id, tokens=tokens[index], label=label, labeled=index in chosen)
            (labeled if sample.labeled else unlabeled).append(sample)
            next_id += 1

    split = GcdSplit(labeled=labeled, unlabeled=unlabeled, old_classes=old_classes,
                     all_classes=tuple(range(spec.num_classes)), spec=spec)
    logger.debug("generated %d labeled / %d unlabeled samples", len(labeled), len(unlabeled))
    return split


def _perturb(tokens: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    view = tokens + rng.normal(0.0, strength, size=tokens.shape)
    dropped = rng.random(tokens.shape[0]) < min(MAX_DROPOUT, strength)
    view[dropped] = tokens.mean(axis=0)
    return view


def augment_two_views(sample: Sample, strength: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Two independent noise + token-dropout-to-mean perturbations of one sample."""
    if strength < 0:
        raise GcdValidationError(f"augmentation strength must be >= 0, got {strength}")
    if strength == 0:
        return sample.tokens.copy(), sample.tokens.copy()
    rng = np.random.default_rng([seed, sample.id])
    return _perturb(sample.tokens, strength, rng), _perturb(sample.tokens, strength, rng)


def batch_ranges(count: int, batch_size: int) -> List[Tuple[int, int]]:
    """Contiguous [start, stop) ranges; a trailing singleton joins the previous batch."""
    if batch_size < 2:
        raise GcdValidationError(f"batch size must be >= 2, got {batch_size}")
    ranges = [(start, min(start + batch_size, count)) for start in range(0, count, batch_size)]
    if len(ranges) > 1 and ranges[-1][1] - ranges[-1][0] == 1:
        last = ranges.pop()
        ranges[-1] = (ranges[-1][0], last[1])
    return ranges


def batch_iter(split: GcdSplit, batch_size: int, epoch_seed: int,
               strength: Optional[float] = None) -> Iterator[BatchViews]:
    """Shuffled mixed labeled/unlabeled batches covering every sample once."""
    strength = split.spec.augment_strength if strength is None else strength
    samples = split.samples
    order = np.random.default_rng(epoch_seed).permutation(len(samples))
    for start, stop in batch_ranges(len(samples), batch_size):
        chosen = [samples[i] for i in order[start:stop]]
        pairs = [augment_two_views(sample, strength, epoch_seed) for sample in chosen]
        yield BatchViews(
            ids=np.array([s.id for s in chosen], dtype=np.int64),
            views=np.stack([a for a, _ in pairs]),
            views_prime=np.stack([b for _, b in pairs]),
            labels=np.array([s.label if s.labeled else -1 for s in chosen], dtype=np.int64),
            labeled_mask=np.array([s.labeled for s in chosen], dtype=bool),
            truths=np.array([s.label for s in chosen], dtype=np.int64),
        )


def unlabeled_arrays(split: GcdSplit) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ids, tokens, true labels) of the unlabeled set in id order."""
    samples = sorted(split.unlabeled, key=lambda s: s.id)
    return (np.array([s.id for s in samples], dtype=np.int64),
            np.stack([s.tokens for s in samples]),
            np.array([s.label for s in samples], dtype=np.int64))


def _record_dtype(token_count: int, input_dim: int) -> np.dtype:
    return np.dtype([("id", "<i4"), ("label", "<i4"), ("labeled", "<i4"),
                     ("tokens", "<f8", (token_count, input_dim))])


def save_dataset(split: GcdSplit, path: Path) -> Path:
    path = Path(path)
    spec = split.spec
    samples = split.samples
    header = {key: value for key, value in spec.model_dump().items() if key != "path"}
    header["count"] = len(samples)
    header["old_classes"] = ",".join(str(k) for k in split.old_classes)

    records = np.zeros(len(samples), dtype=_record_dtype(spec.token_count, spec.input_dim))
    for index, sample in enumerate(samples):
        records[index] = (sample.id, sample.label, int(sample.labeled), sample.tokens)

    text = HEADER_MAGIC + "\n" + "".join(f"{key}={value}\n" for key, value in header.items())
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(text.encode("ascii"))
        handle.write(HEADER_END)
        handle.write(records.tobytes())
    logger.info("wrote %d samples to %s", len(samples), path)
    return path


def _parse_header(text: str, path: Path) -> Dict[str, str]:
    lines = text.splitlines()
    if not lines or lines[0] != HEADER_MAGIC:
        raise DatasetFormatError(f"{path}: not a .gcd dataset (bad magic line)")
    fields = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise DatasetFormatError(f"{path}: malformed header line '{line}'")
        fields[key] = value
    return fields


def load_dataset(path: Path) -> GcdSplit:
    """Read a .gcd file and validate the split invariants."""
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(HEADER_END)
    if end < 0:
        raise DatasetFormatError(f"{path}: missing end_header")
    fields = _parse_header(raw[:end].decode("ascii", errors="replace"), path)

    try:
        count = int(fields.pop("count"))
        old_text = fields.pop("old_classes")
        old_classes = tuple(int(k) for k in old_text.split(",") if k)
        spec = DatasetSpec(**fields, path=str(path))
    except (KeyError, ValueError) as e:
        raise DatasetFormatError(f"{path}: invalid header: {e}") from e

    dtype = _record_dtype(spec.token_count, spec.input_dim)
    body = raw[end + len(HEADER_END):]
    if len(body) != count * dtype.itemsize:
        raise DatasetFormatError(
            f"{path}: expected {count} records ({count * dtype.itemsize} bytes), found {len(body)} bytes"
        )
    records = np.frombuffer(body, dtype=dtype, count=count)

    labeled, unlabeled = [], []
    for record in records:
        sample = Sample(id=int(record["id"]), tokens=np.array(record["tokens"], dtype=np.float64),
                        label=int(record["label"]), labeled=bool(record["labeled"]))
        (labeled if sample.labeled else unlabeled).append(sample)

    split = GcdSplit(labeled=labeled, unlabeled=unlabeled, old_classes=old_classes,
                     all_classes=tuple(range(spec.num_classes)), spec=spec)
    validate_split(split)
    return split


def validate_split(split: GcdSplit) -> None:
    """Raise DatasetFormatError when the GCD split invariants do not hold."""
    ids = [s.id for s in split.samples]
    if len(set(ids)) != len(ids):
        raise DatasetFormatError("sample ids are not unique")
    old = set(split.old_classes)
    if not old or not old < set(split.all_classes):
        raise DatasetFormatError("old classes must be a proper nonempty subset of all classes")
    for sample in split.samples:
        if sample.label not in split.all_classes:
            raise DatasetFormatError(f"sample {sample.id} has unknown label {sample.label}")
    if any(s.label not in old for s in split.labeled):
        raise DatasetFormatError("labeled samples must belong to old classes")
    labeled_classes = {s.label for s in split.labeled}
    unlabeled_classes = {s.label for s in split.unlabeled}
    if labeled_classes != old or not old <= unlabeled_classes:
        raise DatasetFormatError("every old class needs labeled and unlabeled samples")
