"""
Memory inspection: which sub-prototypes the data selects, how that selection
lines up with planted sub-clusters, and 2-D projections for plotting.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA
from sklearn.metrics import adjusted_rand_score

from data import EmbeddingDataset
from memory import retrieve_batch, usage_counts
from models import InspectReport
from network import MemSPMNetwork, decode
from numerics import ContractViolation, RealMatrix
from run_artifacts import RunArtifacts

logger = logging.getLogger(__name__)

FREQUENT_USAGE = 5
TOP_DECODED = 10


@dataclass
class DominantAssignment:
    items: np.ndarray
    subs: np.ndarray
    zhat: RealMatrix
    counts: np.ndarray  # N x S

    @property
    def cells(self) -> np.ndarray:
        """Flat cell id item * S + sub per sample."""
        return self.items * self.counts.shape[1] + self.subs


def dominant_assignment(net: MemSPMNetwork, vectors: RealMatrix, chunk: int = 1024) -> DominantAssignment:
    if net.bank is None:
        raise ContractViolation("inspection needs a network with memory enabled")
    items, subs, zhat = [], [], []
    counts = np.zeros((net.bank.n_items, net.bank.n_subs), dtype=np.int64)
    for start in range(0, vectors.shape[0], chunk):
        addr = net.addressing(vectors[start : start + chunk])
        it, sb = addr.dominant()
        items.append(it)
        subs.append(sb)
        zhat.append(retrieve_batch(addr, net.bank))
        counts += usage_counts(addr, net.bank.n_items, net.bank.n_subs)
    if not items:
        raise ContractViolation("inspection needs a nonempty dataset")
    return DominantAssignment(np.concatenate(items), np.concatenate(subs), np.vstack(zhat), counts)


def usage_table(assign: DominantAssignment, labels: np.ndarray) -> pd.DataFrame:
    rows = []
    for item, sub in zip(*np.nonzero(assign.counts)):
        members = (assign.items == item) & (assign.subs == sub)
        known = labels[members]
        known = known[known >= 0]
        rows.append(
            {
                "item": int(item),
                "sub": int(sub),
                "usage_count": int(assign.counts[item, sub]),
                "mean_assigned_label": float(known.mean()) if known.size else float("nan"),
            }
        )
    return pd.DataFrame(rows, columns=["item", "sub", "usage_count", "mean_assigned_label"])


def pca_2d(points: RealMatrix) -> Tuple[RealMatrix, RealMatrix, RealMatrix]:
    """Top-2 principal axes of the centered data.

    Each axis is flipped so its largest-magnitude component is positive. Data
    with fewer than two dimensions (or samples) is padded with zero axes.

    Returns:
        (mean, components 2 x D, explained variance ratios)
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, d = points.shape
    mean = points.mean(axis=0)
    n_components = min(2, n - 1, d)
    components = np.zeros((2, d))
    ratios = np.zeros(2)
    if n_components >= 1 and np.any(points != mean):
        pca = PCA(n_components=n_components, svd_solver="full").fit(points)
        components[:n_components] = pca.components_
        ratios[:n_components] = pca.explained_variance_ratio_
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return mean, components, ratios


def within_class_ari(
    cells: np.ndarray, labels: np.ndarray, subclusters: np.ndarray
) -> Dict[int, Optional[float]]:
    """ARI between dominant cells and planted sub-clusters inside each class.

    A class with a single planted sub-cluster gets None.
    """
    scores: Dict[int, Optional[float]] = {}
    for c in np.unique(labels[labels >= 0]):
        members = labels == c
        if np.unique(subclusters[members]).size < 2:
            scores[int(c)] = None
            continue
        scores[int(c)] = float(adjusted_rand_score(subclusters[members], cells[members]))
    return scores


def chance_ari(
    cells: np.ndarray, labels: np.ndarray, subclusters: np.ndarray, seed: int = 0
) -> Optional[float]:
    """Mean within-class ARI after shuffling the dominant cells inside each class.

    Keeps each class's cell-usage counts and breaks their link to the samples,
    giving the random-assignment reference for within_class_ari.
    """
    rng = np.random.default_rng(seed)
    shuffled = np.array(cells, copy=True)
    for c in np.unique(labels[labels >= 0]):
        members = np.flatnonzero(labels == c)
        shuffled[members] = rng.permutation(shuffled[members])
    defined = [s for s in within_class_ari(shuffled, labels, subclusters).values() if s is not None]
    return float(np.mean(defined)) if defined else None


def decoder_fidelity(
    net: MemSPMNetwork, assign: DominantAssignment, vectors: RealMatrix, subclusters: np.ndarray
) -> Optional[float]:
    """Share of frequently used sub-prototypes whose decoded row lands nearest the
    mean of the planted sub-cluster that most often selects them."""
    sub_ids = np.unique(subclusters)
    means = np.vstack([vectors[subclusters == s].mean(axis=0) for s in sub_ids])
    hits, total = 0, 0
    for item, sub in zip(*np.nonzero(assign.counts >= FREQUENT_USAGE)):
        members = (assign.items == item) & (assign.subs == sub)
        values, freq = np.unique(subclusters[members], return_counts=True)
        majority = values[np.argmax(freq)]
        xhat = decode(net.bank.items[item, sub], net.dec)
        nearest = sub_ids[np.argmin(np.linalg.norm(means - xhat, axis=1))]
        hits += int(nearest == majority)
        total += 1
    if total == 0:
        return None
    return hits / total


def run_inspection(net: MemSPMNetwork, dataset: EmbeddingDataset, artifacts: RunArtifacts) -> InspectReport:
    labels = dataset.truth
    assign = dominant_assignment(net, dataset.vectors)
    usage = usage_table(assign, labels)
    artifacts.write_csv("usage.csv", usage)

    assignments = pd.DataFrame(
        {
            "sample": np.arange(dataset.n),
            "item": assign.items,
            "sub": assign.subs,
            "label": labels,
            "subcluster": dataset.subcluster_ids if dataset.subcluster_ids is not None else -1,
        }
    )
    artifacts.write_csv("assignments.csv", assignments)

    used = usage[["item", "sub"]].to_numpy(dtype=np.int64)
    rows = net.bank.items[used[:, 0], used[:, 1]]
    mean, components, ratios = pca_2d(assign.zhat)
    sample_proj = (assign.zhat - mean) @ components.T
    row_proj = (rows - mean) @ components.T
    pca = pd.concat(
        [
            pd.DataFrame(
                {
                    "kind": "sample",
                    "index": np.arange(dataset.n),
                    "item": assign.items,
                    "sub": assign.subs,
                    "label": labels,
                    "pc1": sample_proj[:, 0],
                    "pc2": sample_proj[:, 1],
                }
            ),
            pd.DataFrame(
                {
                    "kind": "subprototype",
                    "index": np.arange(len(used)),
                    "item": used[:, 0],
                    "sub": used[:, 1],
                    "label": -1,
                    "pc1": row_proj[:, 0],
                    "pc2": row_proj[:, 1],
                }
            ),
        ],
        ignore_index=True,
    )
    artifacts.write_csv("pca.csv", pca)

    top = usage.sort_values(
        ["usage_count", "item", "sub"], ascending=[False, True, True]
    ).head(TOP_DECODED)
    top_rows = net.bank.items[top["item"].to_numpy(), top["sub"].to_numpy()]
    decoded = np.atleast_2d(decode(top_rows, net.dec))
    decoded_frame = top[["item", "sub", "usage_count"]].reset_index(drop=True)
    decoded_frame = pd.concat(
        [decoded_frame, pd.DataFrame(decoded, columns=[f"x{i}" for i in range(decoded.shape[1])])],
        axis=1,
    )
    artifacts.write_csv("decoded.csv", decoded_frame)

    report = InspectReport(
        n_samples=dataset.n,
        n_used_subprototypes=len(usage),
        per_class_ari={},
        top_used=top[["item", "sub", "usage_count"]].to_numpy().tolist(),
        pca_explained_variance=[float(r) for r in ratios],
    )
    if dataset.subcluster_ids is None:
        report.ari_note = "dataset carries no planted sub-cluster ids; ARI not computed"
    else:
        scores = within_class_ari(assign.cells, labels, dataset.subcluster_ids)
        report.per_class_ari = {str(c): s for c, s in scores.items()}
        defined = [s for s in scores.values() if s is not None]
        if defined:
            report.mean_ari = float(np.mean(defined))
            report.chance_ari = chance_ari(assign.cells, labels, dataset.subcluster_ids)
        else:
            report.ari_note = "ARI undefined: every class has a single planted sub-cluster"
        report.decoder_fidelity = decoder_fidelity(net, assign, dataset.vectors, dataset.subcluster_ids)
    logger.info(
        f"Inspected {dataset.n} samples: {len(usage)} sub-prototypes used, "
        f"mean ARI={report.mean_ari} (shuffled {report.chance_ari})"
    )
    return report
