"""
Label-set splits, unknown-aware prediction and the open-set metrics.
"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from adaptation import UNKNOWN, PseudoLabeling, refresh_pseudo_labels
from models import MetricsReport, Scenario, SyntheticSpec
from network import MemSPMNetwork, predict
from numerics import ContractViolation, RealMatrix

if TYPE_CHECKING:
    from data import EmbeddingDataset

logger = logging.getLogger(__name__)

# name -> (total classes, scenario -> (|C|, |C_s private|, |C_t private|))
DATASET_SPLITS: Dict[str, Tuple[int, Dict[str, Tuple[int, int, int]]]] = {
    "office31": (31, {"PDA": (10, 21, 0), "OSDA": (10, 0, 11), "UniDA": (10, 10, 11)}),
    "officehome": (65, {"PDA": (25, 40, 0), "OSDA": (25, 0, 40), "UniDA": (10, 5, 50)}),
    "visda": (12, {"PDA": (6, 6, 0), "OSDA": (6, 0, 6), "UniDA": (6, 3, 3)}),
    "domainnet": (345, {"UniDA": (150, 50, 145)}),
    "synthetic": (11, {"PDA": (6, 2, 0), "OSDA": (6, 0, 3), "UniDA": (6, 2, 3)}),
}


def normalize_dataset_name(name: str) -> str:
    return name.lower().replace("-", "").replace("_", "")


@dataclass(frozen=True)
class LabelSplit:
    common: FrozenSet[int]
    source_private: FrozenSet[int] = frozenset()
    target_private: FrozenSet[int] = frozenset()

    def __post_init__(self):
        if (
            self.common & self.source_private
            or self.common & self.target_private
            or self.source_private & self.target_private
        ):
            raise ContractViolation("label split sets must be pairwise disjoint")

    @property
    def source_classes(self) -> List[int]:
        return sorted(self.common | self.source_private)

    @property
    def target_classes(self) -> List[int]:
        return sorted(self.common | self.target_private)

    @property
    def counts(self) -> Tuple[int, int, int]:
        return len(self.common), len(self.source_private), len(self.target_private)

    @property
    def is_partial(self) -> bool:
        return not self.target_private


def split_from_counts(
    n_common: int, n_src_private: int, n_tgt_private: int, total: Optional[int] = None
) -> LabelSplit:
    """Assign ascending class ids: common first, then source-private, then target-private."""
    needed = n_common + n_src_private + n_tgt_private
    if min(n_common, n_src_private, n_tgt_private) < 0:
        raise ContractViolation("split counts must be nonnegative")
    if total is not None and needed > total:
        raise ContractViolation(f"split needs {needed} classes but only {total} exist")
    return LabelSplit(
        common=frozenset(range(n_common)),
        source_private=frozenset(range(n_common, n_common + n_src_private)),
        target_private=frozenset(range(n_common + n_src_private, needed)),
    )


def make_split(scenario: Scenario, dataset_name: str) -> LabelSplit:
    key = normalize_dataset_name(dataset_name)
    if key not in DATASET_SPLITS:
        raise ContractViolation(
            f"no registered class split for '{dataset_name}' "
            f"(known: {', '.join(sorted(DATASET_SPLITS))})"
        )
    total, scenarios = DATASET_SPLITS[key]
    if scenario not in scenarios:
        raise ContractViolation(f"'{dataset_name}' has no {scenario} split")
    return split_from_counts(*scenarios[scenario], total=total)


def split_for_synthetic(spec: SyntheticSpec, scenario: Scenario) -> LabelSplit:
    """Split matching the generator's id layout; the scenario drops one private set."""
    c, s, t = spec.n_common, spec.n_src_private, spec.n_tgt_private
    return LabelSplit(
        common=frozenset(range(c)),
        source_private=frozenset(range(c, c + s)) if scenario != "OSDA" else frozenset(),
        target_private=frozenset(range(c + s, c + s + t)) if scenario != "PDA" else frozenset(),
    )


def predict_unknown_aware(logits: RealMatrix, pseudo: PseudoLabeling, index: int) -> int:
    """UNKNOWN for samples of unmatched clusters, classifier argmax otherwise."""
    if index < 0 or index >= len(pseudo.pseudo_label):
        raise ContractViolation(f"target index {index} not covered by the pseudo-labeling")
    if pseudo.unknown_mask[index]:
        return UNKNOWN
    return int(predict(np.asarray(logits)[index]))


def predict_all(logits: RealMatrix, pseudo: PseudoLabeling) -> np.ndarray:
    preds = predict(np.atleast_2d(logits)).astype(np.int64)
    preds[pseudo.unknown_mask] = UNKNOWN
    return preds


def h_score(os_star: float, unk: float) -> float:
    if os_star + unk == 0.0:
        return 0.0
    return 2.0 * os_star * unk / (os_star + unk)


@dataclass
class Metrics:
    os_star: float
    per_class: Dict[int, float]
    overall_accuracy: float
    unk: Optional[float] = None
    h_score: Optional[float] = None
    pda_accuracy: Optional[float] = None
    n_consensus_clusters: int = 0
    excluded_classes: List[int] = field(default_factory=list)

    def to_report(self) -> MetricsReport:
        return MetricsReport(
            os_star=self.os_star,
            unk=self.unk,
            h_score=self.h_score,
            per_class={str(c): acc for c, acc in sorted(self.per_class.items())},
            pda_accuracy=self.pda_accuracy,
            overall_accuracy=self.overall_accuracy,
            n_consensus_clusters=self.n_consensus_clusters,
            excluded_classes=self.excluded_classes,
        )


def compute_metrics(
    predictions: Sequence[int], truth: Sequence[int], split: LabelSplit
) -> Metrics:
    predictions = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predictions.shape != truth.shape:
        raise ContractViolation("predictions and ground truth differ in length")
    allowed = np.array(split.target_classes)
    if truth.size and not np.all(np.isin(truth, allowed)):
        raise ContractViolation("ground-truth labels fall outside the target label set")

    per_class: Dict[int, float] = {}
    excluded: List[int] = []
    for c in sorted(split.common):
        members = truth == c
        if not np.any(members):
            logger.warning(f"Common class {c} has no target samples; excluded from OS*")
            excluded.append(c)
            continue
        per_class[c] = float(np.mean(predictions[members] == c))
    os_star = float(np.mean(list(per_class.values()))) if per_class else 0.0

    private = np.isin(truth, list(split.target_private))
    correct = np.where(private, predictions == UNKNOWN, predictions == truth)
    overall = float(np.mean(correct)) if truth.size else 0.0

    metrics = Metrics(
        os_star=os_star, per_class=per_class, overall_accuracy=overall, excluded_classes=excluded
    )
    if split.is_partial:
        metrics.pda_accuracy = overall
    else:
        metrics.unk = float(np.mean(predictions[private] == UNKNOWN)) if np.any(private) else 0.0
        metrics.h_score = h_score(metrics.os_star, metrics.unk)
    return metrics


@dataclass
class EvaluationResult:
    predictions: np.ndarray
    pseudo: PseudoLabeling
    metrics: Metrics


def run_evaluation(
    net: MemSPMNetwork,
    source: "EmbeddingDataset",
    target: "EmbeddingDataset",
    split: LabelSplit,
    k_target: int,
    seed: int = 0,
) -> EvaluationResult:
    """Refresh pseudo-labels with the given model and score unknown-aware predictions."""
    if target.hidden_labels is None:
        raise ContractViolation("evaluation needs target ground truth in the hidden label channel")
    pseudo = refresh_pseudo_labels(net, source, target, k_target, seed)
    predictions = predict_all(net.logits(target.vectors), pseudo)
    metrics = compute_metrics(predictions, target.hidden_labels, split)
    metrics.n_consensus_clusters = pseudo.n_consensus
    if metrics.h_score is not None:
        logger.info(f"OS*={metrics.os_star:.4f} UNK={metrics.unk:.4f} H={metrics.h_score:.4f}")
    else:
        logger.info(f"OS*={metrics.os_star:.4f} PDA accuracy={metrics.pda_accuracy:.4f}")
    return EvaluationResult(predictions=predictions, pseudo=pseudo, metrics=metrics)
