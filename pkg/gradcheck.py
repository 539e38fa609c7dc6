"""
Finite-difference verification of the full training objective.

Small random instances are drawn; an instance is redrawn when any quantity sits
so close to a kink (the shrinkage threshold, an argmax tie, a rectifier hinge)
that a central difference would straddle it.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from adaptation import UNKNOWN, loss_and_grads
from models import EncoderConfig, GradcheckConfig, GradcheckReport, GroupError, LossWeights, MemoryConfig
from network import ForwardPass, MemSPMNetwork
from numerics import ContractViolation, RealMatrix, finite_diff_check

logger = logging.getLogger(__name__)

MAX_ATTEMPTS_PER_DRAW = 50


@dataclass
class GradcheckInstance:
    net: MemSPMNetwork
    xs: RealMatrix
    ys: np.ndarray
    xt: RealMatrix
    yt: np.ndarray
    consensus: List[int]
    weights: LossWeights

    def loss(self, compute_grads: bool = False) -> float:
        _, total = loss_and_grads(
            self.net, self.xs, self.ys, self.xt, self.yt, self.consensus, self.weights, compute_grads
        )
        return total


def draw_instance(cfg: GradcheckConfig, rng: np.random.Generator) -> GradcheckInstance:
    memory = MemoryConfig(
        n_items=cfg.n_items,
        n_subs=cfg.n_subs,
        top_k=min(cfg.top_k, cfg.n_items),
    )
    encoder = EncoderConfig(kind="precomputed", in_dim=cfg.dim, out_dim=cfg.dim)
    net = MemSPMNetwork(
        memory, encoder, cfg.n_classes, cfg.hidden_width, seed=int(rng.integers(2**31))
    )
    xs = rng.standard_normal((cfg.batch, cfg.dim))
    xt = rng.standard_normal((cfg.batch, cfg.dim))
    ys = rng.integers(cfg.n_classes, size=cfg.batch)
    yt = rng.integers(-1, cfg.n_classes, size=cfg.batch)
    yt[yt < 0] = UNKNOWN
    # keep the discrepancy term active with at least two shared classes
    shared = min(2, cfg.batch, cfg.n_classes)
    ys[:shared] = np.arange(shared)
    yt[:shared] = np.arange(shared)
    return GradcheckInstance(
        net=net,
        xs=xs,
        ys=ys,
        xt=xt,
        yt=yt,
        consensus=list(range(cfg.n_classes)),
        weights=LossWeights(),
    )


def near_kink(fp: ForwardPass, cfg: GradcheckConfig) -> bool:
    """True when a central difference of width `step` could cross a non-smooth point."""
    threshold_margin = max(cfg.locus_margin, cfg.step)
    hinge_margin = max(cfg.locus_margin, 10.0 * cfg.step)
    addr = fp.addressing
    if addr is not None:
        if np.any(addr.fallback):
            return True
        gap = np.abs(addr.item_max - addr.lam[:, None])
        tied = addr.lam_item >= 0
        gap[np.flatnonzero(tied), addr.lam_item[tied]] = np.inf
        if np.any(gap < threshold_margin):
            return True
        if addr.full_weights.shape[2] > 1:
            ranked = np.sort(addr.full_weights, axis=2)
            if np.any(ranked[:, :, -1] - ranked[:, :, -2] < threshold_margin):
                return True
    for cache in (fp.clf_cache, fp.dec_cache):
        if np.any(np.abs(cache.pre) < hinge_margin):
            return True
    return False


def run_gradcheck(cfg: GradcheckConfig, seed: int = 0) -> GradcheckReport:
    if cfg.top_k > cfg.n_items:
        raise ContractViolation(f"top_k={cfg.top_k} exceeds n_items={cfg.n_items}")
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    flagged: Dict[str, int] = {}
    used = 0
    resampled = 0

    while used < cfg.draws:
        if resampled > cfg.draws * MAX_ATTEMPTS_PER_DRAW:
            raise ContractViolation("could not draw instances away from the non-smooth locus")
        inst = draw_instance(cfg, rng)
        fp = inst.net.forward_batch(np.vstack([inst.xs, inst.xt]))
        if near_kink(fp, cfg):
            resampled += 1
            continue

        inst.loss(compute_grads=True)
        if cfg.corrupt_group:
            if cfg.corrupt_group not in inst.net.store:
                raise ContractViolation(f"unknown parameter group '{cfg.corrupt_group}'")
            inst.net.store.grads[cfg.corrupt_group] *= 2.0

        result = finite_diff_check(
            lambda _store: inst.loss(), inst.net.store, cfg.step, cfg.tol, atol=cfg.atol
        )
        for name, err in result.per_group.items():
            worst[name] = max(worst.get(name, 0.0), err)
            flagged[name] = flagged.get(name, 0) + result.n_flagged[name]
        used += 1
        logger.debug(f"draw {used}: max rel err {result.max_rel_error:.3e} ({result.offending})")

    offending = max(worst, key=worst.get) if worst else None
    max_err = worst[offending] if offending else 0.0
    report = GradcheckReport(
        passed=max_err <= cfg.tol,
        tol=cfg.tol,
        step=cfg.step,
        draws_used=used,
        draws_resampled=resampled,
        max_rel_error=max_err,
        offending=offending if max_err > cfg.tol else None,
        groups=[GroupError(group=n, max_rel_error=worst[n], n_flagged=flagged[n]) for n in worst],
    )
    for group in report.groups:
        status = "✅" if group.max_rel_error <= cfg.tol else "❌"
        logger.info(f"{status} {group.group}: max rel err {group.max_rel_error:.3e}")
    return report
