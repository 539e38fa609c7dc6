r"""
Forward model: frozen encoder, memory retrieval, classifier and decoder.

X --encode--> Z --address/retrieve--> Zhat --classify--> logits
                                           \--decode----> Xhat

The encoder never owns trainable parameters. The classifier and the decoder are
two fully-connected layers with a rectifier in between; their weights, and the
memory items, live in one ParamStore under the names listed in PARAM_NAMES.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from memory import (
    MEMORY_PARAM,
    AddressingBatch,
    AddressingResult,
    MemoryBank,
    address_batch,
    backward_retrieve_batch,
    init_items,
    retrieve_batch,
)
from models import EncoderConfig, MemoryConfig
from numerics import ContractViolation, ParamStore, RealMatrix, relu

logger = logging.getLogger(__name__)

CLASSIFIER_PARAMS = ("clf.w1", "clf.b1", "clf.w2", "clf.b2")
DECODER_PARAMS = ("dec.v1", "dec.c1", "dec.v2", "dec.c2")
PARAM_NAMES = CLASSIFIER_PARAMS + DECODER_PARAMS + (MEMORY_PARAM,)


@lru_cache(maxsize=16)
def projection_matrix(in_dim: int, out_dim: int, seed: int) -> RealMatrix:
    """Fixed out_dim x in_dim projection with N(0, 1/in_dim) entries; read-only."""
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
    p.setflags(write=False)
    return p


def encode(x: RealMatrix, spec: EncoderConfig) -> RealMatrix:
    """Map raw inputs (a vector or a batch of rows) to input-oriented embeddings."""
    x = np.asarray(x, dtype=np.float64)
    if spec.in_dim is None or spec.out_dim is None:
        raise ContractViolation("encoder widths must be resolved before encoding")
    if x.shape[-1] != spec.in_dim:
        raise ContractViolation(f"input width {x.shape[-1]} != encoder in_dim {spec.in_dim}")
    if spec.kind == "precomputed":
        return x.copy()
    return x @ projection_matrix(spec.in_dim, spec.out_dim, spec.seed).T


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tuple[RealMatrix, RealMatrix]:
    bound = 1.0 / np.sqrt(fan_in)
    return (
        rng.uniform(-bound, bound, size=(fan_in, fan_out)),
        rng.uniform(-bound, bound, size=fan_out),
    )


@dataclass
class TwoLayerCache:
    inputs: RealMatrix
    pre: RealMatrix
    hidden: RealMatrix


class TwoLayer:
    """relu(x W1 + b1) W2 + b2 over named ParamStore entries."""

    def __init__(self, store: ParamStore, names: Tuple[str, str, str, str]):
        self.store = store
        self.names = names

    @classmethod
    def create(
        cls,
        store: ParamStore,
        names: Tuple[str, str, str, str],
        in_width: int,
        hidden: int,
        out_width: int,
        rng: np.random.Generator,
    ) -> "TwoLayer":
        w1, b1 = _uniform_layer(rng, in_width, hidden)
        w2, b2 = _uniform_layer(rng, hidden, out_width)
        for name, value in zip(names, (w1, b1, w2, b2)):
            store.register(name, value)
        return cls(store, names)

    @property
    def weights(self) -> Tuple[RealMatrix, RealMatrix, RealMatrix, RealMatrix]:
        return tuple(self.store[name] for name in self.names)

    @property
    def out_width(self) -> int:
        return self.store[self.names[2]].shape[1]

    def forward(self, x: RealMatrix) -> Tuple[RealMatrix, TwoLayerCache]:
        w1, b1, w2, b2 = self.weights
        x = np.atleast_2d(x)
        if x.shape[1] != w1.shape[0]:
            raise ContractViolation(f"layer input width {x.shape[1]} != {w1.shape[0]}")
        pre = x @ w1 + b1
        hidden = relu(pre)
        return hidden @ w2 + b2, TwoLayerCache(x, pre, hidden)

    def backward(self, cache: TwoLayerCache, grad_out: RealMatrix) -> RealMatrix:
        """Accumulate parameter gradients into the store; return dL/dinputs."""
        w1, _, w2, _ = self.weights
        n1, nb1, n2, nb2 = self.names
        grads = self.store.grads
        grads[n2] += cache.hidden.T @ grad_out
        grads[nb2] += grad_out.sum(axis=0)
        d_pre = (grad_out @ w2.T) * (cache.pre > 0.0)
        grads[n1] += cache.inputs.T @ d_pre
        grads[nb1] += d_pre.sum(axis=0)
        return d_pre @ w1.T


class Classifier(TwoLayer):
    pass


class Decoder(TwoLayer):
    pass


def classify(zhat: RealMatrix, clf: Classifier) -> RealMatrix:
    logits, _ = clf.forward(zhat)
    return logits[0] if np.ndim(zhat) == 1 else logits


def predict(logits: RealMatrix) -> np.ndarray:
    """Argmax class per row (lowest index on ties)."""
    return np.argmax(logits, axis=-1)


def decode(zhat: RealMatrix, dec: Decoder) -> RealMatrix:
    xhat, _ = dec.forward(zhat)
    return xhat[0] if np.ndim(zhat) == 1 else xhat


@dataclass
class ForwardResult:
    z: RealMatrix
    addressing: Optional[AddressingResult]
    zhat: RealMatrix
    logits: RealMatrix
    xhat: RealMatrix


@dataclass
class ForwardPass:
    """Batched forward intermediates, kept for the backward pass."""

    x: RealMatrix
    z: RealMatrix
    addressing: Optional[AddressingBatch]
    zhat: RealMatrix
    logits: RealMatrix
    xhat: RealMatrix
    clf_cache: TwoLayerCache
    dec_cache: TwoLayerCache

    def row(self, i: int) -> ForwardResult:
        return ForwardResult(
            z=self.z[i],
            addressing=self.addressing.row(i) if self.addressing is not None else None,
            zhat=self.zhat[i],
            logits=self.logits[i],
            xhat=self.xhat[i],
        )


class MemSPMNetwork:
    """Encoder, memory bank, classifier and decoder sharing one ParamStore.

    Parameters are initialized from a single generator in a fixed order (memory
    items, classifier, decoder) so a seed pins the whole model.
    """

    def __init__(
        self,
        memory_cfg: MemoryConfig,
        encoder: EncoderConfig,
        n_classes: int,
        hidden_width: int = 256,
        seed: int = 0,
    ):
        if encoder.in_dim is None or encoder.out_dim is None:
            raise ContractViolation("encoder widths must be resolved before building the network")
        if n_classes < 1:
            raise ContractViolation("the classifier needs at least one source class")
        self.memory_cfg = memory_cfg
        self.encoder = encoder
        self.n_classes = n_classes
        self.hidden_width = hidden_width
        self.seed = seed
        self.store = ParamStore()

        rng = np.random.default_rng(seed)
        dim = encoder.out_dim
        self.bank: Optional[MemoryBank] = None
        if memory_cfg.use_memory:
            items = self.store.register(
                MEMORY_PARAM, init_items(memory_cfg.n_items, memory_cfg.n_subs, dim, rng)
            )
            self.bank = MemoryBank.from_config(items, memory_cfg)
        self.clf = Classifier.create(self.store, CLASSIFIER_PARAMS, dim, hidden_width, n_classes, rng)
        self.dec = Decoder.create(self.store, DECODER_PARAMS, dim, hidden_width, encoder.in_dim, rng)
        logger.debug(
            f"Built network: D={dim}, H={hidden_width}, classes={n_classes}, "
            f"memory={'%dx%d' % (memory_cfg.n_items, memory_cfg.n_subs) if self.bank else 'off'}"
        )

    @property
    def dim(self) -> int:
        return self.encoder.out_dim

    def forward_batch(self, x: RealMatrix) -> ForwardPass:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = encode(x, self.encoder)
        if self.bank is not None:
            addr = address_batch(z, self.bank)
            zhat = retrieve_batch(addr, self.bank)
        else:
            addr = None
            zhat = z
        logits, clf_cache = self.clf.forward(zhat)
        xhat, dec_cache = self.dec.forward(zhat)
        return ForwardPass(x, z, addr, zhat, logits, xhat, clf_cache, dec_cache)

    def forward(self, x: RealMatrix) -> ForwardResult:
        return self.forward_batch(np.asarray(x, dtype=np.float64)[None, :]).row(0)

    def backward(
        self,
        fp: ForwardPass,
        grad_logits: RealMatrix,
        grad_xhat: RealMatrix,
        grad_zhat: Optional[RealMatrix] = None,
    ) -> None:
        """Accumulate gradients of every parameter group into the store."""
        d_zhat = self.clf.backward(fp.clf_cache, grad_logits)
        d_zhat = d_zhat + self.dec.backward(fp.dec_cache, grad_xhat)
        if grad_zhat is not None:
            d_zhat = d_zhat + grad_zhat
        if self.bank is not None:
            grad_items, _ = backward_retrieve_batch(fp.addressing, self.bank, d_zhat)
            self.store.grads[MEMORY_PARAM] += grad_items

    def embed(self, x: RealMatrix, chunk: int = 1024) -> RealMatrix:
        """Task-oriented embeddings for many rows, without keeping caches."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[0] == 0:
            return np.zeros((0, self.dim))
        parts = []
        for start in range(0, x.shape[0], chunk):
            z = encode(x[start : start + chunk], self.encoder)
            if self.bank is not None:
                parts.append(retrieve_batch(address_batch(z, self.bank), self.bank))
            else:
                parts.append(z)
        return np.vstack(parts)

    def logits(self, x: RealMatrix) -> RealMatrix:
        return classify(self.embed(x), self.clf)

    def addressing(self, x: RealMatrix) -> AddressingBatch:
        if self.bank is None:
            raise ContractViolation("memory is disabled for this network")
        return address_batch(encode(np.atleast_2d(x), self.encoder), self.bank)
