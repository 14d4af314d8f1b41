"""Treebank ingestion: CoNLL-X dependencies, PTB brackets, CNF binarization,
vocabulary and pretrained embeddings."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Union

import numpy as np

UNK = "<unk>"
DUMMY = "X"


class ParseError(ValueError):
    pass


class StructureError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


# -- dependency trees ------------------------------------------------------------

@dataclass
class DepTree:
    """Dependency parse. ``head[k]`` is 1-based (0 = root); ``children`` are 0-based."""

    tokens: list[tuple[str, str]]
    head: list[int]
    relation: list[str]
    children: list[list[int]] = field(default_factory=list)
    root: int = -1

    def __post_init__(self):
        if not self.children:
            self.children = [[] for _ in self.tokens]
            for k, h in enumerate(self.head):
                if h > 0:
                    self.children[h - 1].append(k)
        if self.root < 0:
            roots = [k for k, h in enumerate(self.head) if h == 0]
            self.root = roots[0] if len(roots) == 1 else -1

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> list[str]:
        return [form for form, _ in self.tokens]


def _validate_dep(tree: DepTree, ordinal: int) -> None:
    n = len(tree.tokens)
    roots = [k for k, h in enumerate(tree.head) if h == 0]
    if len(roots) != 1:
        raise StructureError(f"sentence {ordinal}: expected exactly one root, found {len(roots)}")
    for k, h in enumerate(tree.head):
        if not 0 <= h <= n:
            raise StructureError(f"sentence {ordinal}: token {k + 1} has out-of-range head {h}")
    for k in range(n):
        seen = set()
        cur = k
        while tree.head[cur] != 0:
            if cur in seen:
                raise StructureError(f"sentence {ordinal}: cycle through token {k + 1}")
            seen.add(cur)
            cur = tree.head[cur] - 1


def parse_conll(text: str) -> list[DepTree]:
    """Parse CoNLL-X text. Fields ID, FORM, HEAD, DEPREL are read; the rest ignored."""
    trees: list[DepTree] = []
    rows: list[tuple[str, int, str]] = []

    def flush():
        if rows:
            tree = DepTree(
                tokens=[(form, form.lower()) for form, _, _ in rows],
                head=[h for _, h, _ in rows],
                relation=[r for _, _, r in rows],
            )
            _validate_dep(tree, len(trees) + 1)
            trees.append(tree)
            rows.clear()

    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 8:
            raise ParseError(f"line {lineno}: expected at least 8 tab-separated fields, got {len(cols)}")
        if "-" in cols[0] or "." in cols[0]:
            continue  # multiword ranges / empty nodes
        try:
            idx, head = int(cols[0]), int(cols[6])
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer ID or HEAD") from None
        if idx != len(rows) + 1:
            raise ParseError(f"line {lineno}: token id {idx} out of sequence")
        rows.append((cols[1], head, cols[7]))
    flush()
    return trees


# -- constituency trees ------------------------------------------------------------

@dataclass
class ConstTree:
    label: str
    children: list["ConstTree"] = field(default_factory=list)
    leaf: str | None = None

    def is_preterminal(self) -> bool:
        return self.leaf is not None

    def leaves(self) -> list[str]:
        if self.leaf is not None:
            return [self.leaf]
        return [w for c in self.children for w in c.leaves()]

    def to_ptb(self) -> str:
        if self.leaf is not None:
            return f"({self.label} {self.leaf})"
        return f"({self.label} {' '.join(c.to_ptb() for c in self.children)})"

    __str__ = to_ptb


_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def _parse_ptb_at(text: str, tokens: list[re.Match], pos: int) -> tuple[ConstTree, int]:
    m = tokens[pos]
    if m.group() != "(":
        raise ParseError(f"offset {m.start()}: expected '('")
    pos += 1
    if pos >= len(tokens):
        raise ParseError(f"offset {len(text)}: unbalanced parentheses")
    label = ""
    if tokens[pos].group() not in "()":
        label = tokens[pos].group()
        pos += 1
    children: list[ConstTree] = []
    leaf = None
    while True:
        if pos >= len(tokens):
            raise ParseError(f"offset {len(text)}: unbalanced parentheses")
        tok = tokens[pos]
        if tok.group() == ")":
            pos += 1
            break
        if tok.group() == "(":
            if leaf is not None:
                raise ParseError(f"offset {tok.start()}: constituent mixes a word and subtrees")
            child, pos = _parse_ptb_at(text, tokens, pos)
            children.append(child)
        else:
            if children or leaf is not None:
                raise ParseError(f"offset {tok.start()}: unexpected word {tok.group()!r}")
            leaf = tok.group()
            pos += 1
    if not children and leaf is None:
        raise ParseError(f"offset {m.start()}: empty constituent")
    if leaf is not None and not label:
        raise ParseError(f"offset {m.start()}: word {leaf!r} without a tag")
    return ConstTree(label, children, leaf), pos


def parse_ptb_many(text: str) -> list[ConstTree]:
    tokens = list(_TOKEN.finditer(text))
    trees, pos = [], 0
    while pos < len(tokens):
        if tokens[pos].group() == ")":
            raise ParseError(f"offset {tokens[pos].start()}: unbalanced parentheses")
        tree, pos = _parse_ptb_at(text, tokens, pos)
        trees.append(tree)
    return trees


def parse_ptb(text: str) -> ConstTree:
    trees = parse_ptb_many(text)
    if len(trees) != 1:
        raise ParseError(f"expected one bracketed tree, found {len(trees)}")
    return trees[0]


# -- binarization --------------------------------------------------------------------

@dataclass
class BinTree:
    """CNF tree: either a preterminal (``leaf`` set) or an internal node with two children."""

    label: str
    left: "BinTree | None" = None
    right: "BinTree | None" = None
    leaf: str | None = None

    def is_preterminal(self) -> bool:
        return self.leaf is not None

    @property
    def children(self) -> list["BinTree"]:
        return [] if self.leaf is not None else [self.left, self.right]

    def leaves(self) -> list[str]:
        if self.leaf is not None:
            return [self.leaf]
        return self.left.leaves() + self.right.leaves()

    def to_const(self) -> ConstTree:
        if self.leaf is not None:
            return ConstTree(self.label, leaf=self.leaf)
        return ConstTree(self.label, [self.left.to_const(), self.right.to_const()])

    def to_ptb(self) -> str:
        return self.to_const().to_ptb()

    __str__ = to_ptb


def binarize_cnf(t: Union[ConstTree, BinTree]) -> BinTree:
    """Right-factored CNF with dummy ``X`` nodes; unary chains collapse to the lower node."""
    if isinstance(t, BinTree):
        t = t.to_const()
    while t.leaf is None and len(t.children) == 1:
        t = t.children[0]
    if t.leaf is not None:
        return BinTree(t.label, leaf=t.leaf)
    kids = [binarize_cnf(c) for c in t.children]
    right = kids[-1]
    for k in reversed(kids[1:-1]):
        right = BinTree(DUMMY, k, right)
    return BinTree(t.label, kids[0], right)


def is_binary(t: BinTree) -> bool:
    if t.leaf is not None:
        return t.left is None and t.right is None
    return t.left is not None and t.right is not None and is_binary(t.left) and is_binary(t.right)


# -- vocabulary and embeddings -----------------------------------------------------------

class Vocabulary:
    """Lowercased word ids; ``UNK`` is id 0, the rest in sorted order."""

    def __init__(self, words: Iterable[str]):
        uniq = sorted({w.lower() for w in words} - {UNK})
        self.itos = [UNK] + uniq
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @property
    def unk_id(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def size(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.stoi

    def __getitem__(self, word: str) -> int:
        return self.stoi.get(word.lower(), 0)

    def lookup(self, words: Iterable[str]) -> list[int]:
        return [self[w] for w in words]

    def to_list(self) -> list[str]:
        return list(self.itos[1:])

    @classmethod
    def from_list(cls, words: list[str]) -> "Vocabulary":
        return cls(words)


def build_vocab(corpus: Iterable[Iterable[str]]) -> Vocabulary:
    words = [w for sent in corpus for w in ([sent] if isinstance(sent, str) else sent)]
    if not words:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(words)


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    trainable: bool = False
    coverage: float = 0.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def random_embeddings(vocab: Vocabulary, dim: int, rng: np.random.Generator) -> EmbeddingTable:
    return EmbeddingTable(rng.uniform(-0.05, 0.05, size=(len(vocab), dim)))


def load_embeddings(path, vocab: Vocabulary, rng: np.random.Generator, dim: int = 300) -> EmbeddingTable:
    """Copy vectors for in-vocabulary words; others ~ U[-0.05, 0.05].

    Coverage counts vocabulary words found in the file, UNK excluded.
    A leading ``<count> <dim>`` header line (word2vec text format) is skipped.
    """
    table = rng.uniform(-0.05, 0.05, size=(len(vocab), dim))
    found: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) != dim + 1:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            word = parts[0].lower()
            idx = vocab.stoi.get(word)
            if idx is None or idx == vocab.unk_id or idx in found:
                continue
            try:
                table[idx] = [float(v) for v in parts[1:]]
            except ValueError:
                raise EmbeddingFormatError(f"{path}:{lineno}: non-numeric value") from None
            found.add(idx)
    denom = max(len(vocab) - 1, 1)
    return EmbeddingTable(table, coverage=len(found) / denom)


# -- dataset manifest ---------------------------------------------------------------------

@dataclass
class SickExample:
    id: str
    sentence_a: list[str]
    sentence_b: list[str]
    dep_a: DepTree
    dep_b: DepTree
    const_a: BinTree
    const_b: BinTree
    gold: float

    def __post_init__(self):
        if not 1.0 <= self.gold <= 5.0:
            raise ValueError(f"example {self.id}: gold score {self.gold} outside [1, 5]")


class DataError(ValueError):
    pass


class _FileCache:
    def __init__(self, base: Path):
        self.base = base
        self._dep: dict[Path, list[DepTree]] = {}
        self._ptb: dict[Path, list[ConstTree]] = {}

    def _split(self, ref: str) -> tuple[Path, int]:
        path, _, idx = ref.rpartition("#")
        if not path:
            raise DataError(f"reference {ref!r} is not of the form <file>#<index>")
        return (self.base / path).resolve(), int(idx)

    def dep(self, ref: str) -> DepTree:
        path, idx = self._split(ref)
        if path not in self._dep:
            self._dep[path] = parse_conll(path.read_text(encoding="utf-8"))
        return self._dep[path][idx]

    def ptb(self, ref: str) -> ConstTree:
        path, idx = self._split(ref)
        if path not in self._ptb:
            self._ptb[path] = parse_ptb_many(path.read_text(encoding="utf-8"))
        return self._ptb[path][idx]


MANIFEST_COLUMNS = ("sentence_a", "sentence_b", "score", "dep_a", "dep_b", "ptb_a", "ptb_b")


def read_manifest(path) -> list[SickExample]:
    """Load a dataset manifest.

    One example per line, tab-separated: sentence A, sentence B, gold score,
    then ``<file>#<index>`` references to the CoNLL parses of A and B and the
    PTB parses of A and B. Paths are relative to the manifest. Lines starting
    with ``#`` and a header line starting with ``sentence_a`` are skipped.
    """
    path = Path(path)
    cache = _FileCache(path.parent)
    out: list[SickExample] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#") or line.startswith("sentence_a\t"):
            continue
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_COLUMNS):
            raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(cols)}")
        ex_id = f"{path.name}:{lineno}"
        try:
            gold = float(cols[2])
            dep_a, dep_b = cache.dep(cols[3]), cache.dep(cols[4])
            const_a, const_b = cache.ptb(cols[5]), cache.ptb(cols[6])
        except (ParseError, StructureError, ValueError, IndexError, OSError) as exc:
            raise DataError(f"example {ex_id}: {exc}") from exc
        toks_a, toks_b = cols[0].split(), cols[1].split()
        for name, toks, dep, const in (("A", toks_a, dep_a, const_a), ("B", toks_b, dep_b, const_b)):
            if dep.words != toks:
                raise DataError(f"example {ex_id}: dependency tokens of sentence {name} do not match")
            if const.leaves() != toks:
                raise DataError(f"example {ex_id}: constituency leaves of sentence {name} do not match")
        try:
            ex = SickExample(ex_id, toks_a, toks_b, dep_a, dep_b,
                             binarize_cnf(const_a), binarize_cnf(const_b), gold)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        out.append(ex)
    return out


def iter_tokens(examples: Iterable[SickExample]) -> Iterator[list[str]]:
    for ex in examples:
        yield ex.sentence_a
        yield ex.sentence_b
