from typing import List, Optional, Dict, Literal
from pydantic import BaseModel, Field, field_validator, model_validator
import logging

logger = logging.getLogger(__name__)

Scenario = Literal["PDA", "OSDA", "UniDA"]
Command = Literal["gen", "train", "eval", "inspect", "gradcheck", "sweep"]
Ablation = Literal["k1", "fixed_threshold", "no_cdd", "no_reg", "no_rec"]


class SgdConfig(BaseModel):
    """Nesterov momentum SGD with the (1 + alpha*i/N)^-beta learning-rate decay."""
    lr0: float = Field(default=0.05, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)
    alpha: float = Field(default=10.0, ge=0)
    beta: float = Field(default=0.75, ge=0)
    total_iters: int = Field(default=1, ge=1)


class LossWeights(BaseModel):
    lambda1: float = Field(default=0.1, ge=0)  # CDD
    lambda2: float = Field(default=3.0, ge=0)  # entropy regularizer
    lambda3: float = Field(default=0.5, ge=0)  # reconstruction


class TrainConfig(BaseModel):
    epochs: int = Field(default=60, ge=0)
    batch_size: int = Field(default=64, ge=1)
    sgd: SgdConfig = Field(default_factory=SgdConfig)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    refresh_every: int = Field(default=1, ge=1)
    # epochs trained on cross-entropy and reconstruction only
    warmup_epochs: int = Field(default=5, ge=0)
    # the memory items step with lr0 * memory_lr_mult
    memory_lr_mult: float = Field(default=10.0, gt=0)
    # None resolves to |C_s| + 4 once the label split is known
    k_target: Optional[int] = Field(default=None, ge=1)
    seed: int = 0

    def resolved_k_target(self, n_source_classes: int) -> int:
        return self.k_target if self.k_target is not None else n_source_classes + 4


class MemoryConfig(BaseModel):
    n_items: int = Field(default=64, ge=1)
    n_subs: int = Field(default=30, ge=1)
    top_k: int = Field(default=5, ge=1)
    epsilon: float = Field(default=1e-12, gt=0)
    threshold_mode: Literal["adaptive", "fixed"] = "adaptive"
    fixed_threshold: float = Field(default=0.005, ge=0)
    use_memory: bool = True

    @model_validator(mode='after')
    def check_top_k(self):
        if self.top_k > self.n_items:
            raise ValueError(f"top_k={self.top_k} exceeds n_items={self.n_items}")
        return self


class EncoderConfig(BaseModel):
    kind: Literal["precomputed", "random_projection"] = "precomputed"
    # Filled from the dataset width when left unset
    in_dim: Optional[int] = Field(default=None, ge=1)
    out_dim: Optional[int] = Field(default=None, ge=1)
    seed: int = 0

    @model_validator(mode='after')
    def check_identity_widths(self):
        if self.kind == "precomputed" and self.in_dim and self.out_dim and self.in_dim != self.out_dim:
            raise ValueError("precomputed embeddings require in_dim == out_dim")
        return self

    def resolved(self, data_dim: int) -> "EncoderConfig":
        """Fill unset widths from the dataset embedding width."""
        in_dim = self.in_dim or data_dim
        if in_dim != data_dim:
            raise ValueError(f"encoder in_dim={in_dim} does not match data width {data_dim}")
        out_dim = self.out_dim or in_dim
        if self.kind == "precomputed" and out_dim != in_dim:
            raise ValueError("precomputed embeddings require in_dim == out_dim")
        return self.model_copy(update={"in_dim": in_dim, "out_dim": out_dim})


class SyntheticSpec(BaseModel):
    n_common: int = Field(default=6, ge=1)
    n_src_private: int = Field(default=2, ge=0)
    n_tgt_private: int = Field(default=3, ge=0)
    subclusters_per_class: int = Field(default=3, ge=1)
    dim: int = Field(default=16, ge=1)
    samples_per_subcluster: int = Field(default=50, ge=1)
    shift_scale: float = Field(default=1.0, ge=0)
    noise_sigma: float = Field(default=0.15, gt=0)
    separation: float = Field(default=4.0, gt=0)
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return self.n_common + self.n_src_private + self.n_tgt_private


class SweepConfig(BaseModel):
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    # Empty means "only the configured n_subs"
    n_subs_values: List[int] = Field(default_factory=list)
    n_items_values: List[int] = Field(default_factory=list)
    ablations: List[Ablation] = Field(default_factory=list)
    include_baseline: bool = True

    @field_validator('seeds')
    @classmethod
    def validate_seeds(cls, v):
        if not v:
            raise ValueError("sweep needs at least one seed")
        return v


class GradcheckConfig(BaseModel):
    draws: int = Field(default=20, ge=1)
    step: float = Field(default=1e-5, gt=0)
    tol: float = Field(default=1e-4, gt=0)
    n_items: int = Field(default=6, ge=1, le=8)
    n_subs: int = Field(default=3, ge=1, le=4)
    top_k: int = Field(default=3, ge=1)
    dim: int = Field(default=6, ge=1, le=8)
    batch: int = Field(default=4, ge=1, le=4)
    n_classes: int = Field(default=3, ge=2)
    hidden_width: int = Field(default=8, ge=1)
    locus_margin: float = Field(default=1e-6, gt=0)
    # absolute disagreement below this is finite-difference roundoff
    atol: float = Field(default=1e-8, ge=0)
    # Test hook: scale this group's analytic gradient by 2 before comparing
    corrupt_group: Optional[str] = None


class RunConfig(BaseModel):
    """Fully-resolved description of one command invocation."""
    command: Command
    seed: Optional[int] = None
    out: str = "runs/default"
    source_path: Optional[str] = None
    target_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    inspect_path: Optional[str] = None
    scenario: Scenario = "UniDA"
    dataset_name: str = "synthetic"
    hidden_width: int = Field(default=256, ge=1)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    memory: MemoryConfig = Field(default_factory=MemoryConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)

    @model_validator(mode='after')
    def apply_run_seed(self):
        """A top-level seed overrides every component seed."""
        if self.seed is not None:
            self.synthetic.seed = self.seed
            self.train.seed = self.seed
            self.encoder.seed = self.seed
        return self


class GeneratorStats(BaseModel):
    n_source: int
    n_target: int
    n_classes: int
    n_subclusters: int
    min_mean_distance: float
    required_min_distance: float
    self_check_passed: bool
    notes: List[str] = Field(default_factory=list)


class MetricsReport(BaseModel):
    os_star: float
    unk: Optional[float] = None
    h_score: Optional[float] = None
    per_class: Dict[str, float]
    pda_accuracy: Optional[float] = None
    overall_accuracy: float
    n_consensus_clusters: int
    excluded_classes: List[int] = Field(default_factory=list)


class InspectReport(BaseModel):
    n_samples: int
    n_used_subprototypes: int
    per_class_ari: Dict[str, Optional[float]]
    mean_ari: Optional[float] = None
    chance_ari: Optional[float] = None
    ari_note: Optional[str] = None
    decoder_fidelity: Optional[float] = None
    top_used: List[List[int]] = Field(default_factory=list)
    pca_explained_variance: List[float] = Field(default_factory=list)


class GroupError(BaseModel):
    group: str
    max_rel_error: float
    n_flagged: int


class GradcheckReport(BaseModel):
    passed: bool
    tol: float
    step: float
    draws_used: int
    draws_resampled: int
    max_rel_error: float
    offending: Optional[str] = None
    groups: List[GroupError] = Field(default_factory=list)


class ErrorDetail(BaseModel):
    message: str
    type: str
    context: Optional[str] = None


class ErrorResponse(BaseModel):
    error: ErrorDetail
