"""Attention over the children of a tree node.

Three mechanisms share one calling convention: given the stacked child
hidden states ``M_k`` (n x d) they return the hidden-state override(s) the
cell should use plus the attention weights that produced them.

* ``soft``   -- ratio-of-scores weighting against a context vector, then tanh affine.
* ``model1`` -- key/query/value projections, scaled alignment, weighted values.
* ``model2`` -- key/query alignment applied to the raw children, then tanh affine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import cells
from .autodiff import DimensionError, Tensor

KINDS = ("none", "soft", "model1", "model2")
SOURCES = ("self", "own_sentence", "other_sentence", "phrase")
NORMALIZATIONS = ("softmax", "plain")

SOURCE_ALIASES = {"own": "own_sentence", "other": "other_sentence"}


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionSpec:
    kind: str = "none"
    query_source: str = "other_sentence"
    normalization: str = "softmax"

    def __post_init__(self):
        src = SOURCE_ALIASES.get(self.query_source, self.query_source)
        object.__setattr__(self, "query_source", src)
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown attention kind {self.kind!r}")
        if src not in SOURCES:
            raise ConfigurationError(f"unknown query source {self.query_source!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigurationError(f"unknown normalization {self.normalization!r}")
        if self.kind == "soft" and src == "self":
            raise ConfigurationError("soft attention needs a vector query source, not 'self'")

    @property
    def vector_query(self) -> bool:
        return self.query_source != "self"

    @property
    def needs_sentence_vectors(self) -> bool:
        return self.kind != "none" and self.query_source in ("own_sentence", "other_sentence")


@dataclass
class QueryContext:
    own_sentence_vec: Tensor | None = None
    other_sentence_vec: Tensor | None = None


def init_soft(store: ad.ParamStore, prefix: str, d: int, rng: np.random.Generator) -> None:
    b = 1.0 / math.sqrt(d)
    for name in ("W_m", "U_m", "W_a"):
        store.add(f"{prefix}.{name}", rng.uniform(-b, b, size=(d, d)))
    store.add(f"{prefix}.w", rng.uniform(-b, b, size=(1, d)))
    store.add(f"{prefix}.b_a", np.zeros((1, d)))


def init_kqv(store: ad.ParamStore, prefix: str, kind: str, d: int, attn_dim: int,
             rng: np.random.Generator) -> None:
    b = 1.0 / math.sqrt(d)
    store.add(f"{prefix}.W_k", rng.uniform(-b, b, size=(attn_dim, d)))
    store.add(f"{prefix}.W_q", rng.uniform(-b, b, size=(attn_dim, d)))
    if kind == "model1":
        store.add(f"{prefix}.W_v", rng.uniform(-b, b, size=(d, d)))
    else:
        store.add(f"{prefix}.W", rng.uniform(-b, b, size=(d, d)))
        store.add(f"{prefix}.b", np.zeros((1, d)))


def _stack(hs) -> Tensor:
    return hs if isinstance(hs, Tensor) else ad.concat_rows(list(hs))


def soft_attention(hs, s: Tensor, p: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Weighted child combination against context ``s``; returns (h_tilde, alpha 1 x n)."""
    M = _stack(hs)
    if s.shape != (1, M.cols):
        raise DimensionError(f"context {s.shape} does not fit children {M.shape}")
    m = ad.tanh(ad.linear(M, p["W_m"], ad.linear(s, p["U_m"])))
    scores = ad.transpose(ad.linear(m, p["w"]))
    alpha = ad.normalize_rows(scores)
    g = alpha @ M
    return ad.tanh(ad.linear(g, p["W_a"], p["b_a"])), alpha


def kqv_project(M_k: Tensor, M_q: Tensor, p: Mapping[str, Tensor], with_value: bool = True):
    if M_k.cols != M_q.cols:
        raise DimensionError(f"key rows {M_k.shape} and query rows {M_q.shape} differ in width")
    key = ad.linear(M_k, p["W_k"])
    query = ad.linear(M_q, p["W_q"])
    value = ad.linear(M_k, p["W_v"]) if with_value else None
    return key, query, value


def align(query: Tensor, key: Tensor, normalization: str = "softmax") -> Tensor:
    """Scaled dot-product alignment (m x n), normalized row-wise."""
    if query.cols != key.cols:
        raise DimensionError(f"align: query {query.shape} and key {key.shape} differ in width")
    scores = ad.scale(query @ ad.transpose(key), 1.0 / math.sqrt(key.cols))
    if normalization == "softmax":
        return ad.softmax(scores, axis="row")
    if normalization == "plain":
        return ad.normalize_rows(scores)
    raise ConfigurationError(f"unknown normalization {normalization!r}")


def query_vector(source: str, M_k: Tensor, ctx: QueryContext | None,
                 phrase: Mapping[str, Tensor] | None = None) -> Tensor:
    source = SOURCE_ALIASES.get(source, source)
    if source == "self":
        return M_k
    if source in ("own_sentence", "other_sentence"):
        vec = None if ctx is None else getattr(ctx, f"{source}_vec")
        if vec is None:
            raise ConfigurationError(f"query source {source!r} needs a sentence vector in the context")
        return vec
    if source == "phrase":
        if phrase is None:
            raise ConfigurationError("phrase query needs phrase-LSTM parameters")
        return cells.lstm_encode(phrase, [ad.row(M_k, k) for k in range(M_k.rows)])
    raise ConfigurationError(f"unknown query source {source!r}")


def _reduce(h: Tensor, matrix: bool, n_out: int) -> list[Tensor]:
    if n_out == 1:
        return [ad.sum_rows(h) if matrix else h]
    if matrix:
        return [ad.row(h, k) for k in range(h.rows)]
    return [h] * n_out


def model1_attend(M_k: Tensor, spec: AttentionSpec, ctx: QueryContext | None,
                  p: Mapping[str, Tensor], n_out: int = 1,
                  phrase: Mapping[str, Tensor] | None = None) -> tuple[list[Tensor], Tensor]:
    """Key/query/value attention. ``n_out`` is 1 for child-sum, 2 for binary."""
    M_q = query_vector(spec.query_source, M_k, ctx, phrase)
    key, query, value = kqv_project(M_k, M_q, p)
    alpha = align(query, key, spec.normalization)
    h = alpha @ value
    return _reduce(h, not spec.vector_query, n_out), alpha


def model2_attend(M_k: Tensor, spec: AttentionSpec, ctx: QueryContext | None,
                  p: Mapping[str, Tensor], n_out: int = 1,
                  phrase: Mapping[str, Tensor] | None = None) -> tuple[list[Tensor], Tensor]:
    """Alignment applied to the raw children, followed by a tanh affine layer."""
    M_q = query_vector(spec.query_source, M_k, ctx, phrase)
    key, query, _ = kqv_project(M_k, M_q, p, with_value=False)
    alpha = align(query, key, spec.normalization)
    h = ad.tanh(ad.linear(alpha @ M_k, p["W"], p["b"]))
    return _reduce(h, not spec.vector_query, n_out), alpha


def attend(M_k: Tensor, spec: AttentionSpec, ctx: QueryContext | None,
           params: Mapping[str, Mapping[str, Tensor]], n_out: int = 1) -> tuple[list[Tensor], Tensor]:
    """Dispatch on ``spec.kind`` using the ``soft`` / ``kqv`` / ``phrase`` param groups."""
    phrase = params.get("phrase")
    if spec.kind == "soft":
        s = query_vector(spec.query_source, M_k, ctx, phrase)
        h, alpha = soft_attention(M_k, s, params["soft"])
        return [h] * n_out, alpha
    if spec.kind == "model1":
        return model1_attend(M_k, spec, ctx, params["kqv"], n_out, phrase)
    if spec.kind == "model2":
        return model2_attend(M_k, spec, ctx, params["kqv"], n_out, phrase)
    raise ConfigurationError(f"attend called with kind {spec.kind!r}")


def child_weights(alpha: np.ndarray) -> list[float]:
    """Per-child probability: the row for a vector query, the column mean for a matrix."""
    alpha = np.asarray(alpha)
    return [float(v) for v in (alpha[0] if alpha.shape[0] == 1 else alpha.mean(axis=0))]
