"""Synthetic pre-parsed sentence-pair corpus for smoke runs and overfit checks."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionSpec
from .model import EvalReport, ModelConfig, TreeAttnModel, evaluate, train
from .treebank import (
    ConstTree,
    DepTree,
    EmbeddingTable,
    SickExample,
    Vocabulary,
    binarize_cnf,
    iter_tokens,
)

WORDS = {
    "DT": ["a", "the", "some", "this"],
    "NN": ["man", "woman", "dog", "cat", "violin", "ball", "child", "guitar", "park", "road"],
    "VBZ": ["is", "plays", "runs", "holds", "watches", "jumps"],
    "JJ": ["small", "big", "young", "old", "red"],
    "RB": ["quickly", "slowly", "happily"],
    "IN": ["in", "on", "near", "with"],
}
TAGS = list(WORDS)
PHRASES = ["NP", "VP", "PP", "ADJP", "S"]
RELATIONS = ["nsubj", "dobj", "det", "amod", "advmod", "prep", "pobj", "dep"]


def _sentence(rng: np.random.Generator, length: int) -> tuple[list[str], list[str]]:
    tags = [TAGS[int(k)] for k in rng.integers(0, len(TAGS), size=length)]
    return [WORDS[t][int(rng.integers(0, len(WORDS[t])))] for t in tags], tags


def _dep_tree(rng: np.random.Generator, words: list[str]) -> DepTree:
    n = len(words)
    order = rng.permutation(n)
    head = [0] * n
    for pos in range(1, n):
        head[order[pos]] = int(order[rng.integers(0, pos)]) + 1
    rel = ["root" if h == 0 else RELATIONS[int(rng.integers(0, len(RELATIONS)))] for h in head]
    return DepTree([(w, w.lower()) for w in words], head, rel)


def _const_tree(rng: np.random.Generator, words: list[str], tags: list[str], top: bool = True) -> ConstTree:
    leaves = [ConstTree(t, leaf=w) for w, t in zip(words, tags)]

    def build(lo: int, hi: int) -> ConstTree:
        if hi - lo == 1:
            return leaves[lo]
        parts = int(rng.integers(2, min(3, hi - lo) + 1))
        cuts = sorted(rng.choice(np.arange(lo + 1, hi), size=parts - 1, replace=False).tolist())
        bounds = [lo, *cuts, hi]
        kids = [build(a, b) for a, b in zip(bounds, bounds[1:])]
        return ConstTree(PHRASES[int(rng.integers(0, len(PHRASES)))], kids)

    tree = build(0, len(words))
    return ConstTree("ROOT", [tree]) if top else tree


def _perturb(rng: np.random.Generator, words: list[str], tags: list[str]) -> tuple[list[str], list[str]]:
    words, tags = list(words), list(tags)
    for k in range(len(words)):
        if rng.random() < 0.4:
            tags[k] = TAGS[int(rng.integers(0, len(TAGS)))]
            words[k] = WORDS[tags[k]][int(rng.integers(0, len(WORDS[tags[k]])))]
    if rng.random() < 0.5 and len(words) < 8:
        w, t = _sentence(rng, 1)
        words += w
        tags += t
    return words, tags


def make_toy_pairs(n_pairs: int = 32, seed: int = 0) -> list[tuple]:
    """Raw pairs: (words_a, words_b, dep_a, dep_b, const_a, const_b, gold)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_pairs):
        wa, ta = _sentence(rng, int(rng.integers(3, 7)))
        wb, tb = _perturb(rng, wa, ta)
        sa, sb = set(wa), set(wb)
        overlap = len(sa & sb) / len(sa | sb)
        gold = float(np.clip(1.0 + 4.0 * overlap + rng.normal(0.0, 0.3), 1.0, 5.0))
        gold = round(gold, 2)
        out.append((wa, wb, _dep_tree(rng, wa), _dep_tree(rng, wb),
                    _const_tree(rng, wa, ta), _const_tree(rng, wb, tb), gold))
    return out


def make_toy_corpus(n_pairs: int = 32, seed: int = 0) -> list[SickExample]:
    return [
        SickExample(f"toy:{k}", wa, wb, da, db, binarize_cnf(ca), binarize_cnf(cb), g)
        for k, (wa, wb, da, db, ca, cb, g) in enumerate(make_toy_pairs(n_pairs, seed))
    ]


def toy_vectors(dim: int, seed: int = 0) -> tuple[list[str], np.ndarray]:
    """Fixed Gaussian word vectors for every toy word (sorted), rounded to 6 places."""
    vocab = sorted({w for ws in WORDS.values() for w in ws})
    rng = np.random.default_rng(seed + 1)
    return vocab, np.round(rng.normal(0.0, 0.5, size=(len(vocab), dim)), 6)


def toy_embedding_table(vocab: Vocabulary, dim: int, seed: int = 0) -> EmbeddingTable:
    """Same vectors as the written embedding file; words outside the toy set stay at 0."""
    words, vectors = toy_vectors(dim, seed)
    table = np.zeros((len(vocab), dim))
    for w, vec in zip(words, vectors):
        if w in vocab.stoi:
            table[vocab.stoi[w]] = vec
    return EmbeddingTable(table, coverage=1.0)


def _conll(tree: DepTree) -> str:
    lines = [f"{k + 1}\t{form}\t_\t_\t_\t_\t{h}\t{r}\t_\t_"
             for k, ((form, _), h, r) in enumerate(zip(tree.tokens, tree.head, tree.relation))]
    return "\n".join(lines) + "\n"


def write_toy_corpus(directory, n_pairs: int = 32, seed: int = 0, embed_dim: int = 300) -> dict:
    """Write manifest, CoNLL, PTB and an embedding file; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pairs = make_toy_pairs(n_pairs, seed)
    conll, ptb, rows = [], [], ["\t".join(("sentence_a", "sentence_b", "score",
                                          "dep_a", "dep_b", "ptb_a", "ptb_b"))]
    for k, (wa, wb, da, db, ca, cb, gold) in enumerate(pairs):
        conll += [_conll(da), _conll(db)]
        ptb += [ca.to_ptb(), cb.to_ptb()]
        rows.append("\t".join((" ".join(wa), " ".join(wb), f"{gold}",
                               f"toy.conll#{2 * k}", f"toy.conll#{2 * k + 1}",
                               f"toy.ptb#{2 * k}", f"toy.ptb#{2 * k + 1}")))
    (directory / "toy.conll").write_text("\n".join(conll), encoding="utf-8")
    (directory / "toy.ptb").write_text("\n".join(ptb) + "\n", encoding="utf-8")
    (directory / "toy.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    vocab, vectors = toy_vectors(embed_dim, seed)
    emb = [w + " " + " ".join(f"{v:.6f}" for v in vec) for w, vec in zip(vocab, vectors)]
    (directory / "embeddings.txt").write_text("\n".join(emb) + "\n", encoding="utf-8")
    return {"manifest": directory / "toy.tsv", "conll": directory / "toy.conll",
            "ptb": directory / "toy.ptb", "embeddings": directory / "embeddings.txt"}


# -- overfit check -------------------------------------------------------------------

OVERFIT_PEARSON = 0.99
OVERFIT_MSE = 0.01
FLAGSHIP = [(cell, kind) for cell in ("child_sum", "binary") for kind in ("model1", "model2")]


def overfit_config(cell: str, kind: str, dim: int = 16, epochs: int = 200, seed: int = 0) -> ModelConfig:
    """Small, dropout-free settings that memorise the 32-pair toy set."""
    return ModelConfig(cell=cell, attention=AttentionSpec(kind, "other_sentence"), d=dim,
                       attn_dim=dim, embed_dim=dim, mlp_hidden=dim, lr=0.05, batch=4,
                       dropout=0.0, grad_clip=5.0, epochs=epochs, seed=seed)


@dataclass
class OverfitResult:
    cell: str
    kind: str
    epochs: int
    report: EvalReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.pearson >= OVERFIT_PEARSON and self.report.mse <= OVERFIT_MSE


def overfit(cell: str, kind: str, n_pairs: int = 32, dim: int = 16, epochs: int = 200,
            seed: int = 0) -> OverfitResult:
    """Train on the toy set (dev = train) until both thresholds hold or epochs run out."""
    data = make_toy_corpus(n_pairs, seed)
    vocab = Vocabulary(w for s in iter_tokens(data) for w in s)
    cfg = overfit_config(cell, kind, dim, epochs, seed)
    model = TreeAttnModel(cfg, vocab, toy_embedding_table(vocab, dim, seed))
    start = time.perf_counter()
    res = train(cfg, data, data, model=model,
                stop=lambda _, r: r.pearson >= OVERFIT_PEARSON and r.mse <= OVERFIT_MSE)
    seconds = time.perf_counter() - start
    return OverfitResult(cell, kind, len(res.history), evaluate(res.model, data), seconds)
