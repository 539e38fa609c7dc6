"""
Sanity checks for command-line overrides and resolved run configurations.

Hard range errors are caught by the pydantic models; this module only warns
about values that are legal but unlikely to be what the user wants.
"""

import logging
from typing import Any, Dict, List, Optional

from evaluation import DATASET_SPLITS, normalize_dataset_name
from models import RunConfig

logger = logging.getLogger(__name__)


class ParameterValidator:
    """Validates CLI overrides and maps them onto RunConfig fields."""

    VALID_SCENARIOS = {"PDA", "OSDA", "UniDA"}

    # flag -> dotted RunConfig path
    OVERRIDE_PATHS = {
        "epochs": "train.epochs",
        "n_items": "memory.n_items",
        "n_subs": "memory.n_subs",
        "top_k": "memory.top_k",
        "k_target": "train.k_target",
        "scenario": "scenario",
        "seed": "seed",
        "out": "out",
    }

    @classmethod
    def validate_scenario(cls, scenario: str) -> bool:
        if scenario not in cls.VALID_SCENARIOS:
            logger.error(f"Invalid scenario '{scenario}'. Valid options: {sorted(cls.VALID_SCENARIOS)}")
            return False
        return True

    @classmethod
    def validate_memory_shape(cls, n_items: int, n_subs: int, top_k: int) -> List[str]:
        """Return warnings for memory sizes outside the recommended range."""
        warnings = []
        if n_subs < 20:
            warnings.append(f"n_subs={n_subs} is below 20; fewer sub-prototypes per item limit sub-class capacity")
        if top_k == 1:
            warnings.append("top_k=1 retrieves a single item per query")
        if n_items <= top_k:
            warnings.append(f"n_items={n_items} <= top_k={top_k}; the adaptive threshold keeps every item")
        for message in warnings:
            logger.warning(message)
        return warnings

    @classmethod
    def apply_overrides(cls, document: Dict[str, Any], overrides: Dict[str, Optional[Any]]) -> Dict[str, Any]:
        """Write non-None CLI overrides into a config document (nested dicts)."""
        for flag, value in overrides.items():
            if value is None:
                continue
            if flag not in cls.OVERRIDE_PATHS:
                logger.warning(f"Ignoring unknown override '{flag}'")
                continue
            if flag == "scenario" and not cls.validate_scenario(value):
                raise ValueError(f"invalid scenario '{value}'")
            if flag == "epochs" and value > 500:
                logger.warning(f"epochs={value} is outside recommended range (0-500)")
            node = document
            *parents, leaf = cls.OVERRIDE_PATHS[flag].split(".")
            for key in parents:
                node = node.setdefault(key, {})
            node[leaf] = value
        return document


class ConfigReporter:
    """Summarizes a resolved configuration and suggests adjustments."""

    @classmethod
    def generate_config_report(cls, config: RunConfig) -> Dict[str, Any]:
        report = {
            "command": config.command,
            "warnings": [],
            "suggestions": [],
        }
        mem = config.memory
        if config.command in ("train", "eval", "inspect", "sweep", "gradcheck"):
            report["warnings"].extend(
                ParameterValidator.validate_memory_shape(mem.n_items, mem.n_subs, mem.top_k)
            )
        if not mem.use_memory:
            report["suggestions"].append("Memory is disabled: this run is the memory-ablated baseline.")
        if mem.threshold_mode == "fixed":
            report["suggestions"].append(
                f"Fixed threshold {mem.fixed_threshold} ignores top_k; the kept set size varies per query."
            )
        weights = config.train.loss_weights
        if weights.lambda1 == 0 and weights.lambda2 == 0 and weights.lambda3 == 0:
            report["suggestions"].append("All auxiliary loss weights are 0: training is source-only.")
        if config.command in ("train", "sweep") and config.train.warmup_epochs >= config.train.epochs > 0:
            report["warnings"].append(
                f"warmup_epochs={config.train.warmup_epochs} covers every epoch; "
                f"the CDD and entropy terms never switch on"
            )
        if config.train.sgd.lr0 > 0.1:
            report["warnings"].append(f"lr0={config.train.sgd.lr0} is high; non-finite losses are likely")
        if normalize_dataset_name(config.dataset_name) not in DATASET_SPLITS:
            report["warnings"].append(f"dataset '{config.dataset_name}' has no registered class split")
        return report
