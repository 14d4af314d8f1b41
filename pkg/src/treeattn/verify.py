"""End-to-end gradient verification over the cell x attention x query grid."""

from __future__ import annotations

import time
from dataclasses import dataclass

from . import autodiff as ad
from .attention import AttentionSpec
from .model import ModelConfig, TreeAttnModel, kl_loss, sparse_target
from .treebank import DepTree, SickExample, Vocabulary, binarize_cnf, parse_ptb

TOLERANCE = 1e-4
QUERY_SOURCES = ("self", "own_sentence", "other_sentence", "phrase")
SEED_TRIES = 50


def grid(normalization: str = "softmax") -> list[tuple[str, AttentionSpec]]:
    """Every legal (cell, attention) pairing; soft attention needs a vector query."""
    out = []
    for cell in ("child_sum", "binary"):
        out.append((cell, AttentionSpec("none")))
        if cell == "child_sum":
            out += [(cell, AttentionSpec("soft", q)) for q in QUERY_SOURCES if q != "self"]
        for kind in ("model1", "model2"):
            out += [(cell, AttentionSpec(kind, q, normalization)) for q in QUERY_SOURCES]
    return out


def fixture_pair() -> SickExample:
    """A hand-built four-token pair with dependency and binary constituency trees."""
    a = "a man plays guitar".split()
    b = "the woman holds violin".split()
    heads = [2, 3, 0, 3]
    rels = ["det", "nsubj", "root", "dobj"]
    dep_a = DepTree([(w, w) for w in a], heads, rels)
    dep_b = DepTree([(w, w) for w in b], heads, rels)
    ptb = "(S (NP (DT {}) (NN {})) (VP (VBZ {}) (NN {})))"
    const_a = binarize_cnf(parse_ptb(ptb.format(*a)))
    const_b = binarize_cnf(parse_ptb(ptb.format(*b)))
    return SickExample("fixture", a, b, dep_a, dep_b, const_a, const_b, 3.6)


def small_config(cell: str, spec: AttentionSpec, d: int = 8, seed: int = 0) -> ModelConfig:
    return ModelConfig(cell=cell, attention=spec, d=d, mlp_hidden=d, attn_dim=d, embed_dim=d,
                       dropout=0.0, seed=seed, embed_trainable=True)


@dataclass
class CheckResult:
    cell: str
    spec: AttentionSpec
    max_error: float
    n_params: int
    seconds: float
    seed: int
    in_domain: bool = True

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE

    @property
    def name(self) -> str:
        s = self.spec
        if s.kind == "none":
            return f"{self.cell}/none"
        if s.kind == "soft" or s.normalization == "softmax":
            return f"{self.cell}/{s.kind}/{s.query_source}"
        return f"{self.cell}/{s.kind}/{s.query_source}/{s.normalization}"

    def to_dict(self) -> dict:
        return {"config": self.name, "max_error": self.max_error, "passed": self.passed,
                "n_params": self.n_params, "seed": self.seed, "in_domain": self.in_domain,
                "seconds": round(self.seconds, 3)}


def in_domain(model: TreeAttnModel, ex: SickExample) -> bool:
    """True when every attention row on ``ex`` is a probability distribution.

    Softmax rows always are. Ratio normalization over sign-indefinite scores
    can cancel to a tiny denominator, giving weights far outside [0, 1]; the
    loss there is too curved for central differences to be meaningful.
    """
    tr_a, tr_b, _ = model.trace(ex)
    for rec in tr_a + tr_b:
        for row in rec.get("alpha_matrix", ()):
            if min(row) < 0.0 or max(row) > 1.0:
                return False
    return True


def fixture_model(cell: str, spec: AttentionSpec, d: int = 8,
                  seed: int = 0) -> tuple[TreeAttnModel, bool]:
    """Model on the fixture pair at the first in-domain seed from ``seed``.

    Falls back to ``seed`` itself, flagged False, if none of the next
    ``SEED_TRIES`` seeds is in domain.
    """
    ex = fixture_pair()
    vocab = Vocabulary(ex.sentence_a + ex.sentence_b)
    for s in range(seed, seed + SEED_TRIES):
        model = TreeAttnModel(small_config(cell, spec, d, s), vocab)
        if in_domain(model, ex):
            return model, True
    return TreeAttnModel(small_config(cell, spec, d, seed), vocab), False


def check(cell: str, spec: AttentionSpec, d: int = 8, seed: int = 0,
          eps: float = 1e-5, batched: bool = True) -> CheckResult:
    ex = fixture_pair()
    model, ok = fixture_model(cell, spec, d, seed)
    target = sparse_target(ex.gold)

    def f(bound):
        p_hat, _ = model.forward(bound, ex)
        return kl_loss(p_hat, target)

    start = time.perf_counter()
    err = ad.grad_check(f, model.params, eps=eps, batched=batched)
    n = sum(model.params[n].size for n in model.params.trainable())
    return CheckResult(cell, spec, err, n, time.perf_counter() - start,
                       model.config.seed, ok)


def run_grid(d: int = 8, seed: int = 0, normalization: str = "softmax",
             batched: bool = True) -> list[CheckResult]:
    return [check(cell, spec, d, seed, batched=batched) for cell, spec in grid(normalization)]
