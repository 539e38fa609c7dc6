"""
Domain adaptation: target clustering, cycle-consistent matching, the training
objective and the training loop.

Target samples are clustered on their task-oriented embeddings; a target
cluster and a source class form a consensus pair when each is the other's
nearest neighbour under cosine similarity. Samples of unmatched clusters are
treated as unknown.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans

from memory import MEMORY_PARAM
from models import LossWeights, TrainConfig
from network import MemSPMNetwork
from numerics import ContractViolation, DomainError, RealMatrix, log_softmax, lr_at, sgd_step

if TYPE_CHECKING:
    from data import EmbeddingDataset

logger = logging.getLogger(__name__)

UNKNOWN = -2
CDD_INTER_WEIGHT = 0.1
KMEANS_MAX_ITER = 100
HISTORY_COLUMNS = ["epoch", "ce", "cdd", "reg", "rec", "total", "lr", "n_consensus", "n_unknown"]


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, epoch: int, batch: int, parts: "LossParts"):
        self.epoch = epoch
        self.batch = batch
        self.parts = parts
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} "
            f"(ce={parts.ce}, cdd={parts.cdd}, reg={parts.reg}, rec={parts.rec}); "
            f"lower the learning rate or check the input data"
        )


def kmeans(points: RealMatrix, k: int, seed: int = 0) -> Tuple[RealMatrix, np.ndarray]:
    """k-means++ seeding followed by Lloyd iterations (at most 100).

    Returns:
        (centers: k x D, assignment: m cluster ids)
    """
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if k < 1 or m < k:
        raise ContractViolation(f"kmeans needs 1 <= k <= m, got k={k}, m={m}")
    model = KMeans(
        n_clusters=k, init="k-means++", n_init=1, max_iter=KMEANS_MAX_ITER, random_state=seed
    )
    assignment = model.fit_predict(points)
    logger.debug(f"kmeans stopped after {model.n_iter_} iterations (inertia {model.inertia_:.4f})")
    return model.cluster_centers_, assignment.astype(np.int64)


def class_centers(
    zhat: RealMatrix, labels: Sequence[int], classes: Optional[Sequence[int]] = None
) -> Tuple[np.ndarray, RealMatrix]:
    """Mean embedding per class.

    Args:
        zhat: m x D embeddings
        labels: class id per row
        classes: ids to compute; defaults to the sorted ids present in labels

    Returns:
        (class ids that had samples, their centers)
    """
    zhat = np.asarray(zhat, dtype=np.float64)
    labels = np.asarray(labels)
    requested = np.unique(labels[labels >= 0]) if classes is None else np.asarray(classes)
    ids, centers = [], []
    for c in requested:
        members = labels == c
        if not np.any(members):
            logger.warning(f"Class {int(c)} has no samples; excluded from class centers")
            continue
        ids.append(int(c))
        centers.append(zhat[members].mean(axis=0))
    if not centers:
        return np.zeros(0, dtype=np.int64), np.zeros((0, zhat.shape[1]))
    return np.array(ids, dtype=np.int64), np.vstack(centers)


def _cosine_matrix(a: RealMatrix, b: RealMatrix) -> RealMatrix:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DomainError("cannot match zero-norm centers by cosine similarity")
    return (a / na[:, None]) @ (b / nb[:, None]).T


def cycle_consistent_match(
    src_centers: RealMatrix, tgt_centers: RealMatrix
) -> List[Tuple[int, int]]:
    """Mutual nearest neighbours between source classes and target clusters.

    Returns (source row, target row) index pairs in source order.
    """
    src_centers = np.atleast_2d(src_centers)
    tgt_centers = np.atleast_2d(tgt_centers)
    if src_centers.shape[0] == 0 or tgt_centers.shape[0] == 0:
        raise ContractViolation("cycle-consistent matching needs nonempty center sets")
    cos = _cosine_matrix(src_centers, tgt_centers)
    best_tgt = np.argmax(cos, axis=1)
    best_src = np.argmax(cos, axis=0)
    return [(c, int(t)) for c, t in enumerate(best_tgt) if best_src[t] == c]


@dataclass
class PseudoLabeling:
    cluster_of: np.ndarray
    consensus: List[Tuple[int, int]]  # (source class id, target cluster id)
    pseudo_label: np.ndarray
    unknown_mask: np.ndarray

    @property
    def n_consensus(self) -> int:
        return len(self.consensus)

    @property
    def n_unknown(self) -> int:
        return int(self.unknown_mask.sum())

    @property
    def consensus_classes(self) -> List[int]:
        return sorted(c for c, _ in self.consensus)


def assign_pseudo_labels(
    assignment: Sequence[int], consensus: Sequence[Tuple[int, int]]
) -> PseudoLabeling:
    assignment = np.asarray(assignment, dtype=np.int64)
    class_of_cluster: Dict[int, int] = {}
    for cls, cluster in consensus:
        if cluster in class_of_cluster:
            raise ContractViolation(f"cluster {cluster} appears in more than one consensus pair")
        class_of_cluster[cluster] = cls
    pseudo = np.array([class_of_cluster.get(int(t), UNKNOWN) for t in assignment], dtype=np.int64)
    return PseudoLabeling(
        cluster_of=assignment,
        consensus=[(int(c), int(t)) for c, t in consensus],
        pseudo_label=pseudo,
        unknown_mask=pseudo == UNKNOWN,
    )


# -- losses ------------------------------------------------------------------


@dataclass
class LossParts:
    ce: float = 0.0
    cdd: float = 0.0
    reg: float = 0.0
    rec: float = 0.0

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.ce, self.cdd, self.reg, self.rec))


def ce_and_grad(logits: RealMatrix, labels: Sequence[int]) -> Tuple[float, RealMatrix]:
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = logits.shape
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ContractViolation(f"cross-entropy labels must lie in [0, {n_classes})")
    logp = log_softmax(logits, axis=1)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def loss_ce(logits: RealMatrix, labels: Sequence[int]) -> float:
    return ce_and_grad(logits, labels)[0]


def reg_and_grad(logits: RealMatrix) -> Tuple[float, RealMatrix]:
    """Mean prediction entropy and its gradient wrt the logits."""
    logits = np.atleast_2d(logits)
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits, axis=1)
    p = np.exp(logp)
    entropy = -np.sum(p * logp, axis=1)
    grad = -p * (logp + entropy[:, None]) / n
    return float(np.mean(entropy)), grad


def loss_reg(logits: RealMatrix) -> float:
    return reg_and_grad(logits)[0]


def rec_and_grad(xhat: RealMatrix, x: RealMatrix) -> Tuple[float, RealMatrix]:
    xhat = np.atleast_2d(xhat)
    x = np.atleast_2d(x)
    if xhat.shape != x.shape:
        raise ContractViolation(f"reconstruction shape {xhat.shape} != input shape {x.shape}")
    if x.size == 0:
        return 0.0, np.zeros_like(xhat)
    diff = xhat - x
    return float(np.mean(diff**2)), 2.0 * diff / x.size


def loss_rec(xhat: RealMatrix, x: RealMatrix) -> float:
    return rec_and_grad(xhat, x)[0]


@dataclass
class CddTerms:
    loss: float
    grad_src: RealMatrix
    grad_tgt: RealMatrix
    classes: List[int] = field(default_factory=list)


def cdd_and_grad(
    src_zhat: RealMatrix,
    src_labels: Sequence[int],
    tgt_zhat: RealMatrix,
    tgt_labels: Sequence[int],
    consensus_classes: Sequence[int],
    gamma: float = CDD_INTER_WEIGHT,
) -> CddTerms:
    """Class-mean contrastive discrepancy.

    intra = mean over classes c of |mu_c^s - mu_c^t|^2
    inter = mean over ordered pairs c != c' of |mu_c - mu_c'|^2 (pooled means)
    loss  = intra - gamma * inter

    Only consensus classes present in both batches take part; UNKNOWN target
    rows never match a class id and drop out.
    """
    src_zhat = np.atleast_2d(src_zhat)
    tgt_zhat = np.atleast_2d(tgt_zhat)
    src_labels = np.asarray(src_labels)
    tgt_labels = np.asarray(tgt_labels)
    grad_src = np.zeros_like(src_zhat)
    grad_tgt = np.zeros_like(tgt_zhat)

    classes = [
        int(c)
        for c in sorted(set(int(c) for c in consensus_classes))
        if np.any(src_labels == c) and np.any(tgt_labels == c)
    ]
    if not classes:
        logger.debug("No consensus class present in both batches; CDD term is 0")
        return CddTerms(0.0, grad_src, grad_tgt, [])

    n_cls = len(classes)
    intra = 0.0
    pooled = []
    pooled_counts = []
    for c in classes:
        s_mask = src_labels == c
        t_mask = tgt_labels == c
        mu_s = src_zhat[s_mask].mean(axis=0)
        mu_t = tgt_zhat[t_mask].mean(axis=0)
        gap = mu_s - mu_t
        intra += float(gap @ gap)
        grad_src[s_mask] += 2.0 * gap / (n_cls * s_mask.sum())
        grad_tgt[t_mask] -= 2.0 * gap / (n_cls * t_mask.sum())
        count = s_mask.sum() + t_mask.sum()
        pooled.append((src_zhat[s_mask].sum(axis=0) + tgt_zhat[t_mask].sum(axis=0)) / count)
        pooled_counts.append(count)
    intra /= n_cls

    inter = 0.0
    if n_cls > 1:
        n_pairs = n_cls * (n_cls - 1)
        mu = np.vstack(pooled)
        for a in range(n_cls):
            d_mu = np.zeros(mu.shape[1])
            for b in range(n_cls):
                if a == b:
                    continue
                diff = mu[a] - mu[b]
                inter += float(diff @ diff)
                d_mu += 4.0 * diff / n_pairs
            step = -gamma * d_mu / pooled_counts[a]
            grad_src[src_labels == classes[a]] += step
            grad_tgt[tgt_labels == classes[a]] += step
        inter /= n_pairs

    return CddTerms(intra - gamma * inter, grad_src, grad_tgt, classes)


def loss_cdd(
    src: Tuple[RealMatrix, Sequence[int]],
    tgt: Tuple[RealMatrix, Sequence[int]],
    consensus_classes: Sequence[int],
) -> float:
    return cdd_and_grad(src[0], src[1], tgt[0], tgt[1], consensus_classes).loss


def total_loss(parts: LossParts, weights: LossWeights) -> float:
    return (
        parts.ce
        + weights.lambda1 * parts.cdd
        + weights.lambda2 * parts.reg
        + weights.lambda3 * parts.rec
    )


def loss_and_grads(
    net: MemSPMNetwork,
    xs: RealMatrix,
    ys: Sequence[int],
    xt: RealMatrix,
    yt_pseudo: Sequence[int],
    consensus_classes: Sequence[int],
    weights: LossWeights,
    compute_grads: bool = True,
) -> Tuple[LossParts, float]:
    """Evaluate the training objective on one (source, target) batch pair.

    Source and target rows share a single forward pass. When compute_grads is
    set the store's gradients are reset and filled with dL/dparams.
    """
    xs = np.atleast_2d(xs)
    xt = np.atleast_2d(xt)
    ys = np.asarray(ys, dtype=np.int64)
    yt_pseudo = np.asarray(yt_pseudo, dtype=np.int64)
    n_s = xs.shape[0]

    fp = net.forward_batch(np.vstack([xs, xt]))
    src_logits, tgt_logits = fp.logits[:n_s], fp.logits[n_s:]
    known = yt_pseudo != UNKNOWN

    ce, d_ce = ce_and_grad(src_logits, ys)
    reg, d_reg = reg_and_grad(tgt_logits[known])
    cdd = cdd_and_grad(fp.zhat[:n_s], ys, fp.zhat[n_s:], yt_pseudo, consensus_classes)
    rec, d_rec = rec_and_grad(fp.xhat, fp.x)
    parts = LossParts(ce=ce, cdd=cdd.loss, reg=reg, rec=rec)
    total = total_loss(parts, weights)

    if compute_grads:
        net.store.zero_grad()
        d_logits = np.zeros_like(fp.logits)
        d_logits[:n_s] = d_ce
        d_logits[n_s:][known] = weights.lambda2 * d_reg
        d_zhat = weights.lambda1 * np.vstack([cdd.grad_src, cdd.grad_tgt])
        net.backward(fp, d_logits, weights.lambda3 * d_rec, d_zhat)
    return parts, total


# -- training ----------------------------------------------------------------


def refresh_pseudo_labels(
    net: MemSPMNetwork,
    source: "EmbeddingDataset",
    target: "EmbeddingDataset",
    k_target: int,
    seed: int = 0,
) -> PseudoLabeling:
    """Cluster the target embeddings and match clusters to source classes."""
    zs = net.embed(source.vectors)
    zt = net.embed(target.vectors)
    class_ids, src_centers = class_centers(zs, source.labels)
    k = min(k_target, zt.shape[0])
    tgt_centers, assignment = kmeans(zt, k, seed)
    pairs = cycle_consistent_match(src_centers, tgt_centers)
    pseudo = assign_pseudo_labels(assignment, [(int(class_ids[c]), t) for c, t in pairs])
    logger.debug(
        f"Pseudo-labels refreshed: {pseudo.n_consensus}/{k} clusters matched, "
        f"{pseudo.n_unknown}/{zt.shape[0]} targets unknown"
    )
    return pseudo


def _index_stream(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    """Concatenated permutations of range(n), cut to `length`."""
    reps = -(-length // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:length]


@dataclass
class TrainResult:
    net: MemSPMNetwork
    history: pd.DataFrame
    pseudo: Optional[PseudoLabeling]
    iterations: int


def train(
    net: MemSPMNetwork,
    source: "EmbeddingDataset",
    target: "EmbeddingDataset",
    cfg: TrainConfig,
) -> TrainResult:
    """Train the network in place.

    Each epoch optionally refreshes the pseudo-labels, then walks shuffled
    batches that pair one source batch with one target batch; the shorter
    stream recycles. The first warmup_epochs leave the CDD and entropy terms
    out. The memory items use their own learning-rate multiple. Every loss
    component is averaged per epoch into the history frame.
    """
    if source.dim != target.dim:
        raise ContractViolation(f"source width {source.dim} != target width {target.dim}")
    if source.n == 0 or target.n == 0:
        raise ContractViolation("training needs nonempty source and target datasets")
    if np.any(source.labels < 0) or np.any(source.labels >= net.n_classes):
        raise ContractViolation(f"source labels must lie in [0, {net.n_classes})")

    rng = np.random.default_rng(cfg.seed)
    steps = math.ceil(max(source.n, target.n) / cfg.batch_size)
    sgd = cfg.sgd.model_copy(update={"total_iters": max(1, cfg.epochs * steps)})
    k_target = cfg.resolved_k_target(net.n_classes)
    memory_names = [name for name in net.store.names() if name == MEMORY_PARAM]
    other_names = [name for name in net.store.names() if name != MEMORY_PARAM]
    memory_sgd = sgd.model_copy(update={"lr0": sgd.lr0 * cfg.memory_lr_mult})
    warmup_weights = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=cfg.loss_weights.lambda3)

    rows = []
    pseudo: Optional[PseudoLabeling] = None
    iteration = 0
    for epoch in range(cfg.epochs):
        if pseudo is None or epoch % cfg.refresh_every == 0:
            pseudo = refresh_pseudo_labels(net, source, target, k_target, seed=cfg.seed + epoch)
        consensus = pseudo.consensus_classes
        weights = warmup_weights if epoch < cfg.warmup_epochs else cfg.loss_weights
        if epoch == cfg.warmup_epochs and epoch > 0:
            logger.info(f"Warmup over after {epoch} epochs; enabling the CDD and entropy terms")

        src_idx = _index_stream(rng, source.n, steps * cfg.batch_size)
        tgt_idx = _index_stream(rng, target.n, steps * cfg.batch_size)
        sums = np.zeros(5)
        lr = lr_at(sgd, iteration)
        for step in range(steps):
            sl = slice(step * cfg.batch_size, (step + 1) * cfg.batch_size)
            bs, bt = src_idx[sl], tgt_idx[sl]
            parts, total = loss_and_grads(
                net,
                source.vectors[bs],
                source.labels[bs],
                target.vectors[bt],
                pseudo.pseudo_label[bt],
                consensus,
                weights,
            )
            if not (parts.is_finite() and math.isfinite(total)):
                raise NonFiniteLossError(epoch, step, parts)
            lr = lr_at(sgd, iteration)
            sgd_step(net.store, sgd, iteration, other_names)
            if memory_names:
                sgd_step(net.store, memory_sgd, iteration, memory_names)
            iteration += 1
            sums += (parts.ce, parts.cdd, parts.reg, parts.rec, total)

        means = sums / steps
        rows.append(
            {
                "epoch": epoch,
                "ce": means[0],
                "cdd": means[1],
                "reg": means[2],
                "rec": means[3],
                "total": means[4],
                "lr": lr,
                "n_consensus": pseudo.n_consensus,
                "n_unknown": pseudo.n_unknown,
            }
        )
        logger.info(
            f"epoch {epoch}: total={means[4]:.4f} ce={means[0]:.4f} cdd={means[1]:.4f} "
            f"reg={means[2]:.4f} rec={means[3]:.4f} consensus={pseudo.n_consensus}"
        )

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return TrainResult(net=net, history=history, pseudo=pseudo, iterations=iteration)
