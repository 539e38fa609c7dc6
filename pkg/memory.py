"""
Sub-prototype memory bank.

The bank holds N items of S sub-prototypes each (an N x S x D tensor). A query
is compared to every sub-prototype by cosine similarity, the similarities are
turned into one softmax over all N*S cells, each item contributes its best
sub-prototype, and a hard-shrinkage threshold keeps only the most relevant
items. The retrieved task-oriented embedding is the renormalized weighted sum of
the kept sub-prototypes.

Addressing is implemented on batches; the single-query functions are thin views
over the batched ones so training and the oracle tests exercise the same code.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from models import MemoryConfig
from numerics import ContractViolation, DomainError, RealMatrix, softmax

logger = logging.getLogger(__name__)

MEMORY_PARAM = "mem.items"


@dataclass
class MemoryBank:
    items: RealMatrix  # N x S x D, shared with the ParamStore entry "mem.items"
    top_k: int = 5
    epsilon: float = 1e-12
    threshold_mode: str = "adaptive"
    fixed_threshold: float = 0.005

    def __post_init__(self):
        if self.items.ndim != 3:
            raise ContractViolation(f"memory items must be N x S x D, got shape {self.items.shape}")
        if self.top_k > self.n_items:
            raise ContractViolation(f"top_k={self.top_k} exceeds n_items={self.n_items}")
        if self.epsilon <= 0:
            raise ContractViolation("epsilon must be positive")

    @property
    def n_items(self) -> int:
        return self.items.shape[0]

    @property
    def n_subs(self) -> int:
        return self.items.shape[1]

    @property
    def dim(self) -> int:
        return self.items.shape[2]

    @classmethod
    def from_config(cls, items: RealMatrix, cfg: MemoryConfig) -> "MemoryBank":
        return cls(
            items=items,
            top_k=cfg.top_k,
            epsilon=cfg.epsilon,
            threshold_mode=cfg.threshold_mode,
            fixed_threshold=cfg.fixed_threshold,
        )


def init_items(
    n_items: int, n_subs: int, dim: int, rng: Union[int, np.random.Generator]
) -> RealMatrix:
    """Draw sub-prototypes from U(-1/sqrt(D), 1/sqrt(D)); zero-norm rows are redrawn."""
    rng = np.random.default_rng(rng)
    bound = 1.0 / np.sqrt(dim)
    items = rng.uniform(-bound, bound, size=(n_items, n_subs, dim))
    norms = np.linalg.norm(items, axis=2)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        logger.debug(f"Re-jittering {int(bad.sum())} zero-norm sub-prototypes")
        items[bad] = rng.uniform(-bound, bound, size=(int(bad.sum()), dim))
        norms = np.linalg.norm(items, axis=2)
    return items


def init_bank(
    n_items: int,
    n_subs: int,
    dim: int,
    seed: Union[int, np.random.Generator] = 0,
    top_k: int = 5,
    epsilon: float = 1e-12,
) -> MemoryBank:
    return MemoryBank(items=init_items(n_items, n_subs, dim, seed), top_k=top_k, epsilon=epsilon)


def _unit_rows(x: RealMatrix, what: str) -> Tuple[RealMatrix, RealMatrix]:
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms == 0.0):
        raise DomainError(f"zero-norm {what} cannot be addressed by cosine similarity")
    return x / norms[..., None], norms


def attention_weights(z: RealMatrix, bank: MemoryBank) -> RealMatrix:
    """Softmax over all N*S cosine similarities between z and the sub-prototypes."""
    zn, _ = _unit_rows(np.asarray(z, dtype=np.float64)[None, :], "query")
    mn, _ = _unit_rows(bank.items, "sub-prototype")
    cos = np.einsum("bd,nsd->bns", zn, mn)
    return softmax(cos.reshape(1, -1), axis=1).reshape(bank.n_items, bank.n_subs)


def per_item_max(w: RealMatrix) -> Tuple[np.ndarray, RealMatrix]:
    """Best sub-prototype of every item; ties go to the lowest index.

    Works on a single N x S tensor or a batch B x N x S.
    """
    w = np.asarray(w, dtype=np.float64)
    idx = np.argmax(w, axis=-1)
    return idx, np.take_along_axis(w, idx[..., None], axis=-1)[..., 0]


def _lambda_item(item_max: RealMatrix, top_k: int) -> np.ndarray:
    """Index of the (top_k+1)-th largest item max per row, or -1 when N <= top_k."""
    item_max = np.atleast_2d(item_max)
    if item_max.shape[1] <= top_k:
        return np.full(item_max.shape[0], -1, dtype=np.int64)
    order = np.argsort(-item_max, axis=1, kind="stable")
    return order[:, top_k]


def adaptive_lambda(item_max: RealMatrix, top_k: int) -> Union[float, RealMatrix]:
    """The (top_k+1)-th largest per-item maximum, or 0 when N <= top_k.

    A single length-N vector gives a float, a B x N batch gives one threshold per row.
    """
    item_max = np.asarray(item_max, dtype=np.float64)
    rows = np.atleast_2d(item_max)
    idx = _lambda_item(rows, top_k)
    lam = np.where(idx >= 0, rows[np.arange(rows.shape[0]), np.maximum(idx, 0)], 0.0)
    return float(lam[0]) if item_max.ndim == 1 else lam


def threshold_shrink(item_max: RealMatrix, lam: Union[float, RealMatrix], epsilon: float) -> RealMatrix:
    """Hard shrinkage: max(w - lam, 0) * w / (|w - lam| + epsilon)."""
    if epsilon <= 0:
        raise ContractViolation("epsilon must be positive")
    w = np.asarray(item_max, dtype=np.float64)
    u = w - lam
    return np.maximum(u, 0.0) * w / (np.abs(u) + epsilon)


def renormalize(shrunk: RealMatrix) -> RealMatrix:
    shrunk = np.asarray(shrunk, dtype=np.float64)
    return shrunk / np.sum(shrunk, axis=-1, keepdims=True)


@dataclass
class AddressingResult:
    """Addressing of one query; kept_weights is length N with zeros for dropped items."""

    full_weights: RealMatrix
    argmax_idx: np.ndarray
    item_max: RealMatrix
    lam: float
    shrunk: RealMatrix
    kept_weights: RealMatrix
    kept_items: List[int]
    fallback: bool = False

    @property
    def dominant(self) -> Tuple[int, int]:
        """(item, sub) of the heaviest kept sub-prototype."""
        item = int(np.argmax(self.kept_weights))
        return item, int(self.argmax_idx[item])


@dataclass
class AddressingBatch:
    """Batched addressing plus the intermediates the backward pass needs."""

    z_unit: RealMatrix  # B x D
    z_norm: RealMatrix  # B
    m_unit: RealMatrix  # N x S x D
    m_norm: RealMatrix  # N x S
    cos: RealMatrix  # B x N x S
    full_weights: RealMatrix  # B x N x S
    argmax_idx: np.ndarray  # B x N
    item_max: RealMatrix  # B x N
    lam: RealMatrix  # B
    lam_item: np.ndarray  # B, -1 when lambda is a constant
    shrunk: RealMatrix  # B x N
    kept_weights: RealMatrix  # B x N
    fallback: np.ndarray  # B, bool

    def __len__(self) -> int:
        return self.full_weights.shape[0]

    def row(self, b: int) -> AddressingResult:
        kept = self.kept_weights[b]
        return AddressingResult(
            full_weights=self.full_weights[b],
            argmax_idx=self.argmax_idx[b],
            item_max=self.item_max[b],
            lam=float(self.lam[b]),
            shrunk=self.shrunk[b],
            kept_weights=kept,
            kept_items=[int(i) for i in np.flatnonzero(kept > 0.0)],
            fallback=bool(self.fallback[b]),
        )

    def dominant(self) -> Tuple[np.ndarray, np.ndarray]:
        items = np.argmax(self.kept_weights, axis=1)
        subs = self.argmax_idx[np.arange(len(self)), items]
        return items, subs


def address_batch(z: RealMatrix, bank: MemoryBank) -> AddressingBatch:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != bank.dim:
        raise ContractViolation(f"query width {z.shape[1]} != memory dim {bank.dim}")
    zn, z_norm = _unit_rows(z, "query")
    mn, m_norm = _unit_rows(bank.items, "sub-prototype")
    batch = z.shape[0]

    cos = np.einsum("bd,nsd->bns", zn, mn)
    w = softmax(cos.reshape(batch, -1), axis=1).reshape(cos.shape)
    argmax_idx, item_max = per_item_max(w)

    if bank.threshold_mode == "fixed":
        lam = np.full(batch, bank.fixed_threshold)
        lam_item = np.full(batch, -1, dtype=np.int64)
    else:
        lam_item = _lambda_item(item_max, bank.top_k)
        lam = adaptive_lambda(item_max, bank.top_k)

    shrunk = threshold_shrink(item_max, lam[:, None], bank.epsilon)
    totals = shrunk.sum(axis=1)
    fallback = totals == 0.0
    kept = np.zeros_like(shrunk)
    live = ~fallback
    kept[live] = renormalize(shrunk[live])
    if np.any(fallback):
        rows = np.flatnonzero(fallback)
        best = np.argmax(item_max[rows], axis=1)
        kept[rows, best] = 1.0
        log = logger.debug if bank.threshold_mode == "fixed" else logger.warning
        log(
            f"Threshold removed every item for {rows.size} quer{'y' if rows.size == 1 else 'ies'}; "
            f"falling back to the single best item"
        )

    return AddressingBatch(
        z_unit=zn,
        z_norm=z_norm,
        m_unit=mn,
        m_norm=m_norm,
        cos=cos,
        full_weights=w,
        argmax_idx=argmax_idx,
        item_max=item_max,
        lam=lam,
        lam_item=lam_item,
        shrunk=shrunk,
        kept_weights=kept,
        fallback=fallback,
    )


def address(z: RealMatrix, bank: MemoryBank) -> AddressingResult:
    return address_batch(np.asarray(z, dtype=np.float64)[None, :], bank).row(0)


def _selected_rows(addr: AddressingBatch, bank: MemoryBank) -> RealMatrix:
    """B x N x D: the chosen sub-prototype of every item for every query."""
    return bank.items[np.arange(bank.n_items)[None, :], addr.argmax_idx]


def retrieve_batch(addr: AddressingBatch, bank: MemoryBank) -> RealMatrix:
    return np.einsum("bn,bnd->bd", addr.kept_weights, _selected_rows(addr, bank))


def retrieve(res: AddressingResult, bank: MemoryBank) -> RealMatrix:
    zhat = np.zeros(bank.dim)
    for i in res.kept_items:
        zhat += res.kept_weights[i] * bank.items[i, res.argmax_idx[i]]
    return zhat


def backward_retrieve_batch(
    addr: AddressingBatch, bank: MemoryBank, grad_out: RealMatrix
) -> Tuple[RealMatrix, RealMatrix]:
    """Gradients of a loss wrt the bank items and the queries, given dL/dZhat.

    The chain runs through the weighted sum, the L1 renormalization, the smooth
    branch of the shrinkage, the softmax and the cosine similarities. The argmax
    choices and the kept set are fixed by the forward pass. In adaptive mode the
    threshold is the weight of one particular item, so its gradient is routed to
    that item.

    Returns:
        (grad wrt items: N x S x D, grad wrt queries: B x D)
    """
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    batch = len(addr)
    n_items = bank.n_items
    rows = np.arange(batch)[:, None]
    cols = np.arange(n_items)[None, :]

    sel = _selected_rows(addr, bank)
    r = addr.kept_weights
    grad_items = np.zeros_like(bank.items)

    # Zhat = sum_n r_n * sel_n
    np.add.at(grad_items, (cols.repeat(batch, 0), addr.argmax_idx), r[:, :, None] * g[:, None, :])
    dr = np.einsum("bnd,bd->bn", sel, g)

    # r = h / sum(h); fallback rows carry a constant one-hot weight
    totals = addr.shrunk.sum(axis=1)
    safe = np.where(addr.fallback, 1.0, totals)
    dh = (dr - np.sum(dr * r, axis=1, keepdims=True)) / safe[:, None]
    dh[addr.fallback] = 0.0

    # h = relu(a - lam) * a / (|a - lam| + eps), smooth where a > lam
    a = addr.item_max
    u = a - addr.lam[:, None]
    eps = bank.epsilon
    active = u > 0.0
    denom = (u + eps) ** 2
    dh_da = np.where(active, (a * eps + u * (u + eps)) / denom, 0.0)
    dh_dlam = np.where(active, -a * eps / denom, 0.0)
    da = dh * dh_da
    dlam = np.sum(dh * dh_dlam, axis=1)
    # lambda is the weight of item lam_item, so its gradient flows back into that item
    tied = addr.lam_item >= 0
    if np.any(tied):
        np.add.at(da, (np.flatnonzero(tied), addr.lam_item[tied]), dlam[tied])

    # a_n = w[n, s_n]
    dw = np.zeros_like(addr.full_weights)
    dw[rows, cols, addr.argmax_idx] = da

    w = addr.full_weights
    dc = w * (dw - np.sum(dw * w, axis=(1, 2), keepdims=True))

    # cos = <z/|z|, m/|m|>
    proj = np.einsum("bns,bns->b", dc, addr.cos)
    grad_z = (np.einsum("bns,nsd->bd", dc, addr.m_unit) - proj[:, None] * addr.z_unit)
    grad_z /= addr.z_norm[:, None]
    toward = np.einsum("bns,bd->nsd", dc, addr.z_unit)
    along = np.einsum("bns,bns->ns", dc, addr.cos)
    grad_items += (toward - along[:, :, None] * addr.m_unit) / addr.m_norm[:, :, None]
    return grad_items, grad_z


def backward_retrieve(
    res_or_batch: Union[AddressingBatch, AddressingResult],
    bank: MemoryBank,
    grad_out: RealMatrix,
    z: Optional[RealMatrix] = None,
) -> Tuple[RealMatrix, RealMatrix]:
    """Single-query backward. An AddressingResult carries no cache, so pass z to rebuild it."""
    if isinstance(res_or_batch, AddressingResult):
        if z is None:
            raise ContractViolation("backward_retrieve needs the query to rebuild the forward cache")
        res_or_batch = address_batch(np.asarray(z, dtype=np.float64)[None, :], bank)
    grad_items, grad_z = backward_retrieve_batch(res_or_batch, bank, np.atleast_2d(grad_out))
    return grad_items, grad_z[0]


def usage_histogram(results: Iterable[AddressingResult]) -> Dict[Tuple[int, int], int]:
    """Count how often each (item, sub) cell was the heaviest kept selection."""
    results = list(results)
    if not results:
        raise ContractViolation("usage_histogram needs at least one addressing result")
    counts = Counter(res.dominant for res in results)
    return dict(sorted(counts.items()))


def usage_counts(addr: AddressingBatch, n_items: int, n_subs: int) -> np.ndarray:
    """Dense N x S version of usage_histogram for a batch."""
    items, subs = addr.dominant()
    counts = np.zeros((n_items, n_subs), dtype=np.int64)
    np.add.at(counts, (items, subs), 1)
    return counts
