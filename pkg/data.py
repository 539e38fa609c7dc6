"""
Embedding datasets: the in-memory type, the MSPM binary format, CSV import and
the synthetic generator that plants sub-class structure.

MSPM layout (little-endian):
    0   4s   magic "MSPM"
    4   u32  version (1)
    8   u32  n
    12  u32  d
    16  u8   domain (0 = source, 1 = target)
    17  u8   has_subclusters
    18  ...  zero padding up to byte 32
    32  n*d float32 vectors, then n int32 labels, then n int32 subcluster ids
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import ClassVar, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from evaluation import LabelSplit
from models import GeneratorStats, SyntheticSpec
from numerics import ContractViolation, RealMatrix
from run_artifacts import atomic_write_bytes

logger = logging.getLogger(__name__)

UNLABELED = -1
DOMAINS = ("source", "target")


class DatasetFormatError(ValueError):
    """Malformed MSPM file; `offset` is the byte position where reading failed."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


@dataclass
class EmbeddingDataset:
    vectors: RealMatrix
    labels: np.ndarray
    domain: str
    subcluster_ids: Optional[np.ndarray] = None
    # ground truth moved out of sight for target evaluation
    hidden_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ContractViolation(f"vectors must be an n x d matrix, got shape {self.vectors.shape}")
        if self.domain not in DOMAINS:
            raise ContractViolation(f"unknown domain '{self.domain}'")
        if self.vectors.shape[0] != self.labels.shape[0]:
            raise ContractViolation(
                f"{self.vectors.shape[0]} vectors but {self.labels.shape[0]} labels"
            )
        if self.domain == "source" and np.any(self.labels < 0):
            raise ContractViolation("source datasets must be fully labeled")
        for name in ("subcluster_ids", "hidden_labels"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=np.int64)
                if value.shape != self.labels.shape:
                    raise ContractViolation(f"{name} length does not match the labels")
                setattr(self, name, value)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def truth(self) -> np.ndarray:
        """Ground-truth labels wherever they live."""
        return self.hidden_labels if self.hidden_labels is not None else self.labels

    def subset(self, mask: np.ndarray) -> "EmbeddingDataset":
        return EmbeddingDataset(
            vectors=self.vectors[mask],
            labels=self.labels[mask],
            domain=self.domain,
            subcluster_ids=None if self.subcluster_ids is None else self.subcluster_ids[mask],
            hidden_labels=None if self.hidden_labels is None else self.hidden_labels[mask],
        )


# -- synthetic generator -----------------------------------------------------


def _repelled_means(
    rng: np.random.Generator, count: int, dim: int, radius: float, placed: List[RealMatrix]
) -> RealMatrix:
    """Greedy farthest-point choice of `count` points on a sphere from 10*count candidates."""
    candidates = rng.standard_normal((10 * count, dim))
    candidates /= np.linalg.norm(candidates, axis=1, keepdims=True)
    candidates *= radius
    chosen: List[RealMatrix] = []
    for _ in range(count):
        anchors = placed + chosen
        if not anchors:
            pick = 0
        else:
            anchor = np.vstack(anchors)
            gaps = np.linalg.norm(candidates[:, None, :] - anchor[None, :, :], axis=2).min(axis=1)
            pick = int(np.argmax(gaps))
        chosen.append(candidates[pick])
        candidates = np.delete(candidates, pick, axis=0)
    return np.vstack(chosen)


def _min_pairwise_distance(means: RealMatrix) -> float:
    if means.shape[0] < 2:
        return float("inf")
    d = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    return float(d[np.triu_indices(means.shape[0], k=1)].min())


@dataclass
class SyntheticDraw:
    source: EmbeddingDataset
    target: EmbeddingDataset
    means: RealMatrix  # (classes * G) x dim, source-domain sub-cluster means
    shift: RealMatrix
    stats: GeneratorStats = field(repr=False, default=None)


def draw_synthetic(spec: SyntheticSpec) -> SyntheticDraw:
    rng = np.random.default_rng(spec.seed)
    g = spec.subclusters_per_class
    n_classes = spec.n_classes

    placed: List[RealMatrix] = []
    for _ in range(n_classes):
        placed.append(_repelled_means(rng, g, spec.dim, spec.separation, placed))
    means = np.vstack(placed)

    shift = rng.standard_normal(spec.dim)
    norm = np.linalg.norm(shift)
    shift = shift / norm * spec.shift_scale if norm > 0 else np.zeros(spec.dim)

    c, s = spec.n_common, spec.n_src_private
    source_classes = list(range(c + s))
    target_classes = list(range(c)) + list(range(c + s, n_classes))

    def sample(classes: List[int], offset: RealMatrix, domain: str) -> EmbeddingDataset:
        vectors, labels, subs = [], [], []
        for cls in classes:
            for j in range(g):
                sub = cls * g + j
                noise = rng.normal(0.0, spec.noise_sigma, size=(spec.samples_per_subcluster, spec.dim))
                vectors.append(means[sub] + offset + noise)
                labels.append(np.full(spec.samples_per_subcluster, cls))
                subs.append(np.full(spec.samples_per_subcluster, sub))
        if not vectors:
            return EmbeddingDataset(np.zeros((0, spec.dim)), np.zeros(0), domain, np.zeros(0))
        return EmbeddingDataset(np.vstack(vectors), np.concatenate(labels), domain, np.concatenate(subs))

    source = sample(source_classes, np.zeros(spec.dim), "source")
    target = sample(target_classes, shift, "target")

    min_dist = _min_pairwise_distance(means)
    required = 2.0 * spec.noise_sigma * np.sqrt(spec.dim)
    passed = min_dist >= required
    notes = []
    if g == 1:
        notes.append("no sub-structure: one sub-cluster per class")
    if not passed:
        logger.warning(
            f"Generator self-check failed: min mean distance {min_dist:.4f} < {required:.4f}"
        )
        notes.append("sub-cluster means closer than 2*sigma*sqrt(dim)")
    stats = GeneratorStats(
        n_source=source.n,
        n_target=target.n,
        n_classes=n_classes,
        n_subclusters=n_classes * g,
        min_mean_distance=min_dist if np.isfinite(min_dist) else -1.0,
        required_min_distance=float(required),
        self_check_passed=bool(passed),
        notes=notes,
    )
    return SyntheticDraw(source=source, target=target, means=means, shift=shift, stats=stats)


def generate_synthetic(spec: SyntheticSpec) -> Tuple[EmbeddingDataset, EmbeddingDataset]:
    """Source and target datasets with planted sub-clusters and a shared domain shift.

    Both datasets carry their true labels; apply_split hides the target ones.
    """
    draw = draw_synthetic(spec)
    return draw.source, draw.target


# -- MSPM binary format --------------------------------------------------------


class MspmHeader:
    MAGIC: ClassVar[bytes] = b"MSPM"
    VERSION: ClassVar[int] = 1
    FORMAT: ClassVar[struct.Struct] = struct.Struct("<4sIIIBB")
    SIZE: ClassVar[int] = 32

    @classmethod
    def pack(cls, n: int, d: int, domain: str, has_sub: bool) -> bytes:
        raw = cls.FORMAT.pack(cls.MAGIC, cls.VERSION, n, d, DOMAINS.index(domain), int(has_sub))
        return raw.ljust(cls.SIZE, b"\0")

    @classmethod
    def unpack(cls, data: bytes) -> Tuple[int, int, str, bool]:
        if len(data) < cls.SIZE:
            raise DatasetFormatError(f"file too short for a header ({len(data)} bytes)", len(data))
        magic, version, n, d, domain, has_sub = cls.FORMAT.unpack_from(data, 0)
        if magic != cls.MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}", 0)
        if version != cls.VERSION:
            raise DatasetFormatError(f"unsupported version {version}", 4)
        if domain not in (0, 1):
            raise DatasetFormatError(f"bad domain byte {domain}", 16)
        if has_sub not in (0, 1):
            raise DatasetFormatError(f"bad subcluster flag {has_sub}", 17)
        return n, d, DOMAINS[domain], bool(has_sub)


def encode_dataset(ds: EmbeddingDataset) -> bytes:
    has_sub = ds.subcluster_ids is not None
    parts = [
        MspmHeader.pack(ds.n, ds.dim, ds.domain, has_sub),
        ds.vectors.astype("<f4").tobytes(),
        ds.labels.astype("<i4").tobytes(),
    ]
    if has_sub:
        parts.append(ds.subcluster_ids.astype("<i4").tobytes())
    return b"".join(parts)


def decode_dataset(data: bytes) -> EmbeddingDataset:
    n, d, domain, has_sub = MspmHeader.unpack(data)
    blocks = [("vectors", "<f4", n * d), ("labels", "<i4", n)]
    if has_sub:
        blocks.append(("subcluster_ids", "<i4", n))
    offset = MspmHeader.SIZE
    arrays = {}
    for name, dtype, count in blocks:
        end = offset + 4 * count
        if end > len(data):
            raise DatasetFormatError(f"truncated {name} block, expected {end} bytes", len(data))
        arrays[name] = (
            np.frombuffer(data, dtype=dtype, count=count, offset=offset) if count else np.zeros(0, dtype)
        )
        offset = end
    if offset != len(data):
        raise DatasetFormatError(f"{len(data) - offset} unexpected trailing bytes", offset)
    return EmbeddingDataset(
        vectors=arrays["vectors"].astype(np.float64).reshape(n, d),
        labels=arrays["labels"].astype(np.int64),
        domain=domain,
        subcluster_ids=arrays["subcluster_ids"].astype(np.int64) if has_sub else None,
    )


def write_dataset(ds: EmbeddingDataset, path: Union[str, Path]) -> Path:
    path = atomic_write_bytes(path, encode_dataset(ds))
    logger.debug(f"Wrote {ds.n} {ds.domain} vectors of width {ds.dim} to {path}")
    return path


def read_dataset(path: Union[str, Path]) -> EmbeddingDataset:
    with open(path, "rb") as f:
        data = f.read()
    ds = decode_dataset(data)
    logger.debug(f"Read {ds.n} {ds.domain} vectors of width {ds.dim} from {path}")
    return ds


def read_csv_dataset(path: Union[str, Path], domain: str) -> EmbeddingDataset:
    """Import `label,subcluster?,f0..f{d-1}` rows; label -1 marks an unlabeled row."""
    frame = pd.read_csv(path)
    if "label" not in frame.columns:
        raise ContractViolation(f"{path}: CSV import needs a 'label' column")
    features = [col for col in frame.columns if col.startswith("f") and col[1:].isdigit()]
    features.sort(key=lambda col: int(col[1:]))
    if [int(col[1:]) for col in features] != list(range(len(features))) or not features:
        raise ContractViolation(f"{path}: feature columns must be f0..f{{d-1}}")
    return EmbeddingDataset(
        vectors=frame[features].to_numpy(dtype=np.float64),
        labels=frame["label"].to_numpy(dtype=np.int64),
        domain=domain,
        subcluster_ids=frame["subcluster"].to_numpy(dtype=np.int64) if "subcluster" in frame else None,
    )


def load_dataset(path: Union[str, Path], domain: str) -> EmbeddingDataset:
    """Read an MSPM file, or a CSV file when the suffix says so."""
    if str(path).lower().endswith(".csv"):
        return read_csv_dataset(path, domain)
    return read_dataset(path)


def apply_split(ds: EmbeddingDataset, split: LabelSplit, role: str) -> EmbeddingDataset:
    """Keep the classes a domain sees under the split; hide target labels."""
    truth = ds.truth
    if role == "source":
        keep = np.isin(truth, split.source_classes)
    elif role == "target":
        keep = np.isin(truth, split.target_classes)
    else:
        raise ContractViolation(f"unknown role '{role}'")
    if not np.any(keep):
        raise ContractViolation(f"the split leaves no {role} samples")
    out = ds.subset(keep)
    if role == "source":
        return replace(out, labels=truth[keep], domain="source", hidden_labels=None)
    return replace(
        out,
        labels=np.full(int(keep.sum()), UNLABELED),
        domain="target",
        hidden_labels=truth[keep],
    )
