import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from app.models.config import DatasetSpec


class StageStatus(Enum):
    # Current state of a pipeline stage during execution
    PENDING = "pending"
    RUNNING = "running"
    SUCCESS = "success"
    FAILURE = "failure"


class RunStatus(Enum):
    # Overall state of a pipeline execution
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class Variant(Enum):
    # Ablation variants; values double as CLI names
    SIMGCD_LAST_BLOCK = "simgcd-last-block"
    BASELINE_NO_ADAPTER = "baseline-no-adapter"
    SINGLE_ADAPTER = "single-adapter"
    SINGLE_ADAPTER_WIDE = "single-adapter-wide"
    MEA = "mea"
    MEA_BA = "mea-ba"
    MEA_BA_CBA = "mea-ba-cba"


class RouteGroup(Enum):
    OLD = "old"
    NEW = "new"
    ALL = "all"


@dataclass
class StageResult:
    # Result of a single stage run
    status: StageStatus
    data: Any = None
    error: Optional[str] = None
    execution_time: Optional[float] = None


@dataclass
class Stage:
    # A named step of a pipeline, e.g. generate, train, evaluate
    name: str
    description: str
    function: Optional[Callable] = None


@dataclass
class Pipeline:
    # Ordered stages sharing one context; the run stops at the first failure
    id: str
    name: str
    stages: List[Stage]


@dataclass
class RunExecution:
    # Tracks the progress of a running pipeline
    pipeline_id: str
    execution_id: str = field(default_factory=lambda: str(uuid.uuid4()))
    status: RunStatus = RunStatus.PENDING
    current_stage: Optional[str] = None
    stage_results: Dict[str, StageResult] = field(default_factory=dict)
    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None
    context: Dict[str, Any] = field(default_factory=dict)


@dataclass
class Sample:
    # One token sequence; label is the ground truth, visible to training only when labeled
    id: int
    tokens: np.ndarray
    label: int
    labeled: bool


@dataclass
class GcdSplit:
    # Labeled set D^l (old classes only) and unlabeled set D^u (old + new classes)
    labeled: List[Sample]
    unlabeled: List[Sample]
    old_classes: Tuple[int, ...]
    all_classes: Tuple[int, ...]
    spec: DatasetSpec

    @property
    def new_classes(self) -> Tuple[int, ...]:
        old = set(self.old_classes)
        return tuple(k for k in self.all_classes if k not in old)

    @property
    def samples(self) -> List[Sample]:
        return sorted(self.labeled + self.unlabeled, key=lambda s: s.id)

    @property
    def num_classes(self) -> int:
        return len(self.all_classes)


@dataclass
class BatchViews:
    # Two augmented views of a mini-batch; labels are -1 where unlabeled
    ids: np.ndarray
    views: np.ndarray
    views_prime: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray
    # Ground-truth class of every sample; read only by oracle pseudo-labels
    truths: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return len(self.ids)


@dataclass
class ConfusionMatrix:
    # counts[predicted cluster][true class], zero-padded to square
    counts: np.ndarray

    @property
    def size(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class PermutationAssignment:
    # mapping[predicted cluster] = class id
    mapping: np.ndarray
    matched: int


@dataclass
class AccuracyReport:
    # Clustering accuracies under one global permutation; None when a subset is empty
    acc_all: Optional[float]
    acc_old: Optional[float]
    acc_new: Optional[float]
    n_all: int
    n_old: int
    n_new: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class StepMetrics:
    # Loss components of one optimisation step, emitted as a metrics.jsonl line
    step: int
    epoch: int
    lr: float
    L_rep_u: float
    L_rep_s: float
    L_cls_u: float
    L_cls_s: float
    L_ba: float
    L_cba: float
    total: float

    def to_record(self) -> Dict[str, Any]:
        return {"kind": "step", **asdict(self)}


@dataclass
class CheckpointRecord:
    # Named parameter arrays plus enough metadata to rebuild the model
    step: int
    parameters: Dict[str, np.ndarray]
    frozen: Dict[str, bool]
    config_json: str
    config_hash: str
    metrics: Dict[str, Any] = field(default_factory=dict)


@dataclass
class GroupCheck:
    # Gradient check outcome for one parameter group
    name: str
    status: str
    max_rel_error: Optional[float] = None
    num_values: int = 0


@dataclass
class GradCheckReport:
    groups: List[GroupCheck]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(group.status != "fail" for group in self.groups)

    def to_dict(self) -> Dict[str, Any]:
        return {"tolerance": self.tolerance, "passed": self.passed,
                "groups": [asdict(group) for group in self.groups]}


@dataclass
class AblationRow:
    # One ablation row, accuracies averaged over seeds
    index: int
    variant: str
    num_experts: Optional[int]
    bottleneck_dim: Optional[int]
    losses: str
    tunable_params: int
    acc_all: Optional[float]
    acc_old: Optional[float]
    acc_new: Optional[float]
    seeds: str
