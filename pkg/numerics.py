"""
Dense numerical helpers shared by every equation of the pipeline.

All training math runs in float64 so finite-difference checks are meaningful.
Matrices are plain numpy arrays (row-major, float64); a ParamStore keeps
parameters, gradients and momentum buffers side by side under stable names.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from models import SgdConfig

logger = logging.getLogger(__name__)

# Row-major float64 array; vectors are 1-D, batches 2-D, the memory bank 3-D.
RealMatrix = np.ndarray


class DomainError(ValueError):
    """Raised when an input lies outside a function's domain (e.g. a zero-norm vector)."""


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's precondition."""


def cosine_similarity(a: RealMatrix, b: RealMatrix) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"cosine_similarity needs equal lengths, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity is undefined for a zero-norm vector")
    value = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, value))


def softmax(v: RealMatrix, axis: int = -1) -> RealMatrix:
    """Numerically stable softmax along `axis` (max subtraction)."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DomainError("softmax input contains non-finite values")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v: RealMatrix, axis: int = -1) -> RealMatrix:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def relu(x: RealMatrix) -> RealMatrix:
    return np.maximum(x, 0.0)



def lr_at(cfg: SgdConfig, i: int) -> float:
    """Learning rate at iteration i: lr0 * (1 + alpha*i/total_iters)^-beta."""
    if i < 0 or i > cfg.total_iters:
        raise ContractViolation(f"iteration {i} outside [0, {cfg.total_iters}]")
    return cfg.lr0 * (1.0 + cfg.alpha * i / cfg.total_iters) ** (-cfg.beta)


class ParamStore:
    """Named parameters with parallel gradient and velocity buffers.

    Updates are applied in place, so views held elsewhere (the memory bank's
    item tensor, for example) always see current values.
    """

    def __init__(self):
        self.params: Dict[str, RealMatrix] = {}
        self.grads: Dict[str, RealMatrix] = {}
        self.velocities: Dict[str, RealMatrix] = {}

    def register(self, name: str, value: RealMatrix) -> RealMatrix:
        if name in self.params:
            raise ContractViolation(f"parameter '{name}' already registered")
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.velocities[name] = np.zeros_like(value)
        return value

    def names(self) -> List[str]:
        return list(self.params.keys())

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> RealMatrix:
        return self.params[name]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def load(self, values: Dict[str, RealMatrix]) -> None:
        """Overwrite parameter values in place (shapes must match)."""
        for name, value in values.items():
            if name not in self.params:
                raise ContractViolation(f"unknown parameter '{name}'")
            if self.params[name].shape != value.shape:
                raise ContractViolation(
                    f"shape mismatch for '{name}': {self.params[name].shape} vs {value.shape}"
                )
            self.params[name][...] = value

    def snapshot(self) -> Dict[str, RealMatrix]:
        return {name: p.copy() for name, p in self.params.items()}

    def copy(self) -> "ParamStore":
        """Deep copy of parameters, gradients and velocities."""
        other = ParamStore()
        for name in self.params:
            other.params[name] = self.params[name].copy()
            other.grads[name] = self.grads[name].copy()
            other.velocities[name] = self.velocities[name].copy()
        return other


def sgd_step(store: ParamStore, cfg: SgdConfig, i: int, names: Optional[Iterable[str]] = None) -> ParamStore:
    """One Nesterov momentum step; gradients are zeroed afterwards.

    For each parameter p with gradient g and velocity v:
        g' = g + weight_decay * p
        v <- momentum * v - lr * g'
        p <- p + momentum * v - lr * g'
    """
    lr = lr_at(cfg, i)
    for name in (list(names) if names is not None else store.names()):
        p = store.params[name]
        g = store.grads.get(name)
        if g is None or g.shape != p.shape:
            raise ContractViolation(f"missing or mis-shaped gradient for '{name}'")
        v = store.velocities[name]
        g_eff = g + cfg.weight_decay * p
        v *= cfg.momentum
        v -= lr * g_eff
        p += cfg.momentum * v - lr * g_eff
        g.fill(0.0)
    return store


@dataclass
class GradcheckResult:
    max_rel_error: float
    offending: Optional[str]
    per_group: Dict[str, float] = field(default_factory=dict)
    n_flagged: Dict[str, int] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: RealMatrix, numeric: RealMatrix) -> RealMatrix:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[ParamStore], float],
    store: ParamStore,
    step: float = 1e-5,
    tol: float = 1e-4,
    names: Optional[Iterable[str]] = None,
    atol: float = 0.0,
) -> GradcheckResult:
    """Compare the analytic gradients held in `store.grads` to central differences of f.

    Entries whose absolute disagreement is at most `atol` count as exact. A
    failing comparison is reported, not raised.
    """
    result = GradcheckResult(max_rel_error=0.0, offending=None, tol=tol)
    for name in (list(names) if names is not None else store.names()):
        p = store.params[name]
        analytic = store.grads[name].copy()
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        num_flat = numeric.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            f_plus = f(store)
            flat[idx] = original - step
            f_minus = f(store)
            flat[idx] = original
            num_flat[idx] = (f_plus - f_minus) / (2.0 * step)
        err = relative_error(analytic, numeric)
        err[np.abs(analytic - numeric) <= atol] = 0.0
        group_max = float(err.max()) if err.size else 0.0
        result.per_group[name] = group_max
        result.n_flagged[name] = int(np.sum(err > tol))
        if group_max > result.max_rel_error:
            result.max_rel_error = group_max
            result.offending = name
        logger.debug(f"gradcheck {name}: max rel err {group_max:.3e}")
    return result
