"""
Command-line entry point.

    memspm gen       --out DIR                       synthetic source/target datasets
    memspm train     --source S --target T --out DIR  checkpoint + history.csv
    memspm eval      --source S --target T --checkpoint C --out DIR
    memspm inspect   --checkpoint C --data D --out DIR
    memspm gradcheck --out DIR
    memspm sweep     --source S --target T --out DIR  seeds x variants, train + eval

Every command writes resolved_config.json (rerunnable with --config) and
config_report.json into its output directory.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from adaptation import train
from checkpoint import load_checkpoint, save_checkpoint
from data import EmbeddingDataset, apply_split, draw_synthetic, load_dataset, write_dataset
from evaluation import LabelSplit, make_split, normalize_dataset_name, run_evaluation, split_for_synthetic
from gradcheck import run_gradcheck
from inspection import run_inspection
from models import ErrorDetail, ErrorResponse, RunConfig, TrainConfig
from network import MemSPMNetwork
from numerics import ContractViolation
from parameter_validator import ConfigReporter, ParameterValidator
from run_artifacts import RunArtifacts
from settings import debug_mode, limited_threads, log_file, verbose

logger = logging.getLogger(__name__)

GRADCHECK_FAILED = 2


def configure_logging() -> None:
    log_level = logging.DEBUG if (debug_mode() or verbose()) else logging.INFO
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    path = log_file()
    if path:
        handler = logging.FileHandler(path)
        handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
        logging.getLogger().addHandler(handler)


def create_error_response(error: Exception, context: str) -> Dict[str, Any]:
    """Create standardized error response."""
    logger.error(f"{context}: {type(error).__name__}: {str(error)}")
    response = ErrorResponse(
        error=ErrorDetail(message=str(error), type=type(error).__name__, context=context)
    )
    return response.model_dump()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (flags override it)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--epochs", type=int)
    common.add_argument("--n-items", type=int)
    common.add_argument("--n-subs", type=int)
    common.add_argument("--top-k", type=int)
    common.add_argument("--k-target", type=int)
    common.add_argument("--scenario", help="PDA, OSDA or UniDA")

    parser = argparse.ArgumentParser(prog="memspm", description="Sub-prototype memory for universal domain adaptation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate synthetic datasets")
    for name in ("train", "eval", "sweep"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--source")
        p.add_argument("--target")
        if name == "eval":
            p.add_argument("--checkpoint")
    p = sub.add_parser("inspect", parents=[common])
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset to inspect")
    p = sub.add_parser("gradcheck", parents=[common])
    p.add_argument("--draws", type=int)
    p.add_argument("--corrupt-group", help="test hook: double this group's analytic gradient")
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    """defaults < --config document < command-line flags"""
    document: Dict[str, Any] = {}
    if args.config:
        with open(args.config, "r") as f:
            document = json.load(f)
    document["command"] = args.command

    for flag, key in (
        ("source", "source_path"),
        ("target", "target_path"),
        ("checkpoint", "checkpoint_path"),
        ("data", "inspect_path"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            document[key] = value
    if getattr(args, "draws", None) is not None:
        document.setdefault("gradcheck", {})["draws"] = args.draws
    if getattr(args, "corrupt_group", None) is not None:
        document.setdefault("gradcheck", {})["corrupt_group"] = args.corrupt_group

    overrides = {
        "seed": args.seed,
        "out": args.out,
        "epochs": args.epochs,
        "n_items": args.n_items,
        "n_subs": args.n_subs,
        "top_k": args.top_k,
        "k_target": args.k_target,
        "scenario": args.scenario,
    }
    ParameterValidator.apply_overrides(document, overrides)
    return RunConfig.model_validate(document)


def resolve_split(config: RunConfig) -> LabelSplit:
    if normalize_dataset_name(config.dataset_name) == "synthetic":
        return split_for_synthetic(config.synthetic, config.scenario)
    return make_split(config.scenario, config.dataset_name)


def _require(value: Optional[str], flag: str, command: str) -> str:
    if not value:
        raise ContractViolation(f"{command} needs {flag}")
    return value


def load_pair(config: RunConfig, split: LabelSplit) -> Tuple[EmbeddingDataset, EmbeddingDataset]:
    """Source and target datasets restricted to the split; target labels hidden."""
    if config.source_path is None and config.target_path is None and config.command == "sweep":
        draw = draw_synthetic(config.synthetic)
        source, target = draw.source, draw.target
    else:
        source = load_dataset(_require(config.source_path, "--source", config.command), "source")
        target = load_dataset(_require(config.target_path, "--target", config.command), "target")
    if source.dim != target.dim:
        raise ContractViolation(f"source width {source.dim} != target width {target.dim}")
    return apply_split(source, split, "source"), apply_split(target, split, "target")


def build_network(config: RunConfig, data_dim: int, n_classes: int, seed: int, **memory_updates) -> MemSPMNetwork:
    memory = config.memory.model_copy(update=memory_updates) if memory_updates else config.memory
    return MemSPMNetwork(memory, config.encoder.resolved(data_dim), n_classes, config.hidden_width, seed=seed)


def cmd_gen(config: RunConfig, artifacts: RunArtifacts) -> int:
    draw = draw_synthetic(config.synthetic)
    write_dataset(draw.source, artifacts.path("source.mspm"))
    write_dataset(draw.target, artifacts.path("target.mspm"))
    artifacts.write_json(
        "gen.json",
        {"spec": config.synthetic.model_dump(mode="json"), "stats": draw.stats.model_dump(mode="json")},
    )
    logger.info(
        f"✅ Generated {draw.source.n} source / {draw.target.n} target samples "
        f"(min mean distance {draw.stats.min_mean_distance:.3f})"
    )
    return 0


def cmd_train(config: RunConfig, artifacts: RunArtifacts) -> int:
    split = resolve_split(config)
    source, target = load_pair(config, split)
    net = build_network(config, source.dim, len(split.source_classes), config.train.seed)
    result = train(net, source, target, config.train)
    save_checkpoint(net, artifacts.path("checkpoint.mspc"), result.iterations)
    artifacts.write_csv("history.csv", result.history)
    return 0


def cmd_eval(config: RunConfig, artifacts: RunArtifacts) -> int:
    split = resolve_split(config)
    source, target = load_pair(config, split)
    net = load_checkpoint(_require(config.checkpoint_path, "--checkpoint", "eval")).to_network()
    k_target = config.train.resolved_k_target(net.n_classes)
    result = run_evaluation(net, source, target, split, k_target, seed=config.train.seed)
    artifacts.write_json("metrics.json", result.metrics.to_report().model_dump(mode="json", exclude_none=True))
    artifacts.write_csv(
        "predictions.csv",
        pd.DataFrame(
            {
                "sample": np.arange(target.n),
                "prediction": result.predictions,
                "truth": target.hidden_labels,
                "cluster": result.pseudo.cluster_of,
            }
        ),
    )
    return 0


def cmd_inspect(config: RunConfig, artifacts: RunArtifacts) -> int:
    net = load_checkpoint(_require(config.checkpoint_path, "--checkpoint", "inspect")).to_network()
    path = _require(config.inspect_path or config.source_path, "--data", "inspect")
    # target rows may carry label -1
    dataset = load_dataset(path, "target")
    report = run_inspection(net, dataset, artifacts)
    artifacts.write_json("inspect.json", report)
    return 0


def cmd_gradcheck(config: RunConfig, artifacts: RunArtifacts) -> int:
    report = run_gradcheck(config.gradcheck, seed=config.seed if config.seed is not None else 0)
    artifacts.write_json("gradcheck.json", report)
    for group in report.groups:
        print(f"{group.group:12s} max rel err {group.max_rel_error:.3e}")
    if not report.passed:
        logger.error(f"❌ Gradient check failed in group '{report.offending}'")
        return GRADCHECK_FAILED
    logger.info(f"✅ Gradient check passed (max rel err {report.max_rel_error:.3e})")
    return 0


ABLATIONS: Dict[str, Tuple[Dict[str, Any], Dict[str, float]]] = {
    "k1": ({"top_k": 1}, {}),
    "fixed_threshold": ({"threshold_mode": "fixed"}, {}),
    "no_cdd": ({}, {"lambda1": 0.0}),
    "no_reg": ({}, {"lambda2": 0.0}),
    "no_rec": ({}, {"lambda3": 0.0}),
}


@dataclass
class SweepVariant:
    name: str
    memory_updates: Dict[str, Any] = field(default_factory=dict)
    loss_updates: Dict[str, float] = field(default_factory=dict)

    def train_config(self, config: RunConfig, seed: int) -> TrainConfig:
        weights = config.train.loss_weights.model_copy(update=self.loss_updates)
        return config.train.model_copy(update={"seed": seed, "loss_weights": weights})


def sweep_variants(config: RunConfig) -> List[SweepVariant]:
    n_subs_values = config.sweep.n_subs_values or [config.memory.n_subs]
    variants = [SweepVariant(f"memspm_s{s}", {"n_subs": s}) for s in n_subs_values]
    variants += [SweepVariant(f"memspm_n{n}", {"n_items": n}) for n in config.sweep.n_items_values]
    for ablation in config.sweep.ablations:
        memory_updates, loss_updates = ABLATIONS[ablation]
        variants.append(SweepVariant(ablation, dict(memory_updates), dict(loss_updates)))
    if config.sweep.include_baseline:
        variants.append(SweepVariant("baseline", {"use_memory": False}))
    return variants


def cmd_sweep(config: RunConfig, artifacts: RunArtifacts) -> int:
    split = resolve_split(config)
    source, target = load_pair(config, split)
    n_classes = len(split.source_classes)
    rows = []
    for variant in sweep_variants(config):
        for seed in config.sweep.seeds:
            net = build_network(config, source.dim, n_classes, seed, **variant.memory_updates)
            train_cfg = variant.train_config(config, seed)
            train(net, source, target, train_cfg)
            result = run_evaluation(
                net, source, target, split, train_cfg.resolved_k_target(n_classes), seed=seed
            )
            m = result.metrics
            rows.append(
                {
                    "variant": variant.name,
                    "seed": str(seed),
                    "os_star": m.os_star,
                    "unk": m.unk,
                    "h_score": m.h_score,
                    "pda_accuracy": m.pda_accuracy,
                    "overall_accuracy": m.overall_accuracy,
                    "n_consensus": m.n_consensus_clusters,
                }
            )
            logger.info(f"sweep {variant.name} seed {seed}: H={m.h_score} OS*={m.os_star:.4f}")

    metric_cols = ["os_star", "unk", "h_score", "pda_accuracy", "overall_accuracy", "n_consensus"]
    frame = pd.DataFrame(rows)
    frame[metric_cols] = frame[metric_cols].astype(float)
    means = frame.groupby("variant", sort=False)[metric_cols].mean().reset_index()
    means["seed"] = "mean"
    frame = pd.concat([frame, means[frame.columns]], ignore_index=True)
    artifacts.write_csv("sweep.csv", frame)
    summary = {
        row["variant"]: {col: (None if pd.isna(row[col]) else float(row[col])) for col in metric_cols}
        for _, row in means.iterrows()
    }
    artifacts.write_json("sweep.json", {"seeds": config.sweep.seeds, "means": summary})
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    context = f"{args.command} command"
    try:
        config = build_config(args)
        artifacts = RunArtifacts(config.out)
        artifacts.write_json("resolved_config.json", config.model_dump(mode="json"))
        artifacts.write_json("config_report.json", ConfigReporter.generate_config_report(config))
        if debug_mode() or verbose():
            logger.debug(f"🔧 Resolved config: {config.model_dump_json()}")
        with limited_threads():
            return COMMANDS[args.command](config, artifacts)
    except Exception as e:
        sys.stderr.write(json.dumps(create_error_response(e, context)) + "\n")
        return 1


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
