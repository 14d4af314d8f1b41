"""Sentence-pair relatedness model, Adagrad training and Pearson/MSE evaluation."""

from __future__ import annotations

import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionSpec, QueryContext, init_kqv, init_soft
from .autodiff import DimensionError, ParamStore, Tape, Tensor
from .cells import init_binary, init_child_sum, init_lstm, lstm_encode, pack
from .encoder import encode_tree
from .treebank import EmbeddingTable, SickExample, Vocabulary, iter_tokens, random_embeddings

log = logging.getLogger(__name__)

CELLS = ("child_sum", "binary")
SCORES = np.arange(1.0, 6.0).reshape(5, 1)


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose (init, dropout, shuffle, ...)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), *extra])


@dataclass
class ModelConfig:
    cell: str = "binary"
    attention: AttentionSpec = field(
        default_factory=lambda: AttentionSpec("model2", "other_sentence", "softmax"))
    d: int = 150
    mlp_hidden: int = 50
    attn_dim: int = 150
    embed_dim: int = 300
    lr: float = 0.025
    batch: int = 25
    dropout: float = 0.1
    grad_clip: float = 5.0
    weight_decay: float = 1e-5
    epochs: int = 15
    seed: int = 0
    attend_forget: bool = False
    embed_trainable: bool = False

    def __post_init__(self):
        if isinstance(self.attention, Mapping):
            self.attention = AttentionSpec(**self.attention)
        if self.cell not in CELLS:
            raise ValueError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.cell == "binary" and self.attention.kind == "soft":
            raise ValueError("soft attention applies to the child-sum cell only")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        spec = out.pop("attention")
        out["attention"] = spec["kind"]
        out["query_source"] = spec["query_source"]
        out["normalization"] = spec["normalization"]
        return out

    @classmethod
    def from_dict(cls, values: Mapping) -> "ModelConfig":
        values = dict(values)
        spec = values.pop("attention", None)
        if isinstance(spec, Mapping):
            spec = AttentionSpec(**spec)
        else:
            spec = AttentionSpec(
                spec if spec is not None else "model2",
                values.pop("query_source", "other_sentence"),
                values.pop("normalization", "softmax"),
            )
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(attention=spec, **values)


# -- head and loss -------------------------------------------------------------------

def init_head(store: ParamStore, d: int, hidden: int, rng: np.random.Generator) -> None:
    b1, b2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(hidden)
    store.add("head.W_x", rng.uniform(-b1, b1, size=(hidden, d)))
    store.add("head.W_d", rng.uniform(-b1, b1, size=(hidden, d)))
    store.add("head.b", np.zeros((1, hidden)))
    store.add("head.W_p", rng.uniform(-b2, b2, size=(5, hidden)))
    store.add("head.b_p", np.zeros((1, 5)))


def similarity_head(p: Mapping[str, Tensor], h_l: Tensor, h_r: Tensor) -> tuple[Tensor, Tensor]:
    """Distribution over scores 1..5 and its expectation, from two sentence vectors."""
    if h_l.shape != h_r.shape:
        raise DimensionError(f"sentence vectors {h_l.shape} and {h_r.shape} differ")
    prod = h_l * h_r
    dist = ad.absolute(h_l - h_r)
    hs = ad.sigmoid(ad.linear(prod, p["W_x"], p["b"]) + ad.linear(dist, p["W_d"]))
    p_hat = ad.softmax(ad.linear(hs, p["W_p"], p["b_p"]), axis="row")
    return p_hat, p_hat @ Tensor(SCORES)


def sparse_target(y: float) -> np.ndarray:
    """5-bin distribution whose expectation over scores 1..5 is ``y``."""
    if not 1.0 <= y <= 5.0:
        raise ValueError(f"score {y} outside [1, 5]")
    p = np.zeros(5)
    lo = math.floor(y)
    if lo == 5:
        p[4] = 1.0
    else:
        p[lo - 1] = lo - y + 1.0
        p[lo] = y - lo
    return p


def kl_loss(p_hat: Tensor, p) -> Tensor:
    """KL(p || p_hat) with 0 log 0 = 0; ``p`` is a constant target."""
    p = np.asarray(p, dtype=np.float64).reshape(1, -1)
    pos = p > 0
    entropy_term = float(np.sum(p[pos] * np.log(p[pos])))
    cross = ad.total(ad.mul(Tensor(p), ad.log(p_hat)))
    return ad.add(Tensor([[entropy_term]]), ad.scale(cross, -1.0))


# -- optimisation --------------------------------------------------------------------

def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return dict(grads)
    k = max_norm / norm
    return {n: g * k for n, g in grads.items()}


def adagrad_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
                 weight_decay: float = 0.0, eps: float = 1e-10) -> None:
    """In-place Adagrad with L2 weight decay folded into the gradient."""
    for name, g in grads.items():
        theta = store.values[name]
        if g.shape != theta.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {name!r} {theta.shape}")
        g = g + weight_decay * theta
        acc = store.accum[name]
        acc += g * g
        theta -= lr * g / (np.sqrt(acc) + eps)


# -- model ----------------------------------------------------------------------------

class TreeAttnModel:
    """Parameters plus the forward computation for one sentence pair."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary,
                 embeddings: EmbeddingTable | None = None, params: ParamStore | None = None):
        self.config = config
        self.vocab = vocab
        if params is not None:
            self.params = params
            return
        cfg = config
        rng = substream(cfg.seed, "init")
        if embeddings is None:
            embeddings = random_embeddings(vocab, cfg.embed_dim, rng)
        if embeddings.matrix.shape != (len(vocab), cfg.embed_dim):
            raise DimensionError(
                f"embedding table {embeddings.matrix.shape} does not fit vocab {len(vocab)} x {cfg.embed_dim}")
        store = ParamStore()
        store.add("embed.E", embeddings.matrix, frozen=not cfg.embed_trainable)
        if cfg.cell == "child_sum":
            init_child_sum(store, "cell", cfg.d, cfg.embed_dim, rng)
        else:
            init_binary(store, "cell", cfg.d, cfg.embed_dim, rng)
        spec = cfg.attention
        if spec.needs_sentence_vectors:
            init_lstm(store, "sent", cfg.d, cfg.embed_dim, rng)
        if spec.kind != "none" and spec.query_source == "phrase":
            init_lstm(store, "phrase", cfg.d, cfg.d, rng)
        if spec.kind == "soft":
            init_soft(store, "soft", cfg.d, rng)
        elif spec.kind in ("model1", "model2"):
            init_kqv(store, "kqv", spec.kind, cfg.d, cfg.attn_dim, rng)
        init_head(store, cfg.d, cfg.mlp_hidden, rng)
        self.params = store

    def _embed(self, bound, words: Sequence[str], rng: np.random.Generator | None) -> list[Tensor]:
        E = bound["embed"]["E"]
        rows = [ad.row(E, i) for i in self.vocab.lookup(words)]
        return [self._dropout(x, rng) for x in rows]

    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        p = self.config.dropout
        if rng is None or p == 0.0:
            return x
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
        return ad.mul(x, Tensor(mask))

    def forward(self, bound, ex: SickExample, rng: np.random.Generator | None = None,
                traces: tuple[list, list] | None = None) -> tuple[Tensor, Tensor]:
        cfg, spec = self.config, self.config.attention
        xa = self._embed(bound, ex.sentence_a, rng)
        xb = self._embed(bound, ex.sentence_b, rng)
        ctx_a = ctx_b = None
        if spec.needs_sentence_vectors:
            sent = pack(bound["sent"])
            va, vb = lstm_encode(sent, xa), lstm_encode(sent, xb)
            ctx_a, ctx_b = QueryContext(va, vb), QueryContext(vb, va)
        if cfg.cell == "child_sum":
            ta, tb = ex.dep_a, ex.dep_b
        else:
            ta, tb = ex.const_a, ex.const_b
        tr_a, tr_b = traces if traces is not None else (None, None)
        ha = encode_tree(ta, bound, spec, ctx_a, xa, tr_a, cfg.attend_forget).h
        hb = encode_tree(tb, bound, spec, ctx_b, xb, tr_b, cfg.attend_forget).h
        return similarity_head(bound["head"], self._dropout(ha, rng), self._dropout(hb, rng))

    def loss(self, bound, ex: SickExample, rng: np.random.Generator | None = None) -> Tensor:
        p_hat, _ = self.forward(bound, ex, rng)
        return kl_loss(p_hat, sparse_target(ex.gold))

    def predict(self, ex: SickExample) -> float:
        _, y = self.forward(self.params.bind(None), ex)
        return y.item()

    def trace(self, ex: SickExample) -> tuple[list, list, float]:
        """Per-node attention records for both sentences, plus the prediction."""
        tr_a, tr_b = [], []
        _, y = self.forward(self.params.bind(None), ex, traces=(tr_a, tr_b))
        return tr_a, tr_b, y.item()

    def save(self, path, fmt: str = "binary") -> None:
        meta = {"config": self.config.to_dict(), "vocab": self.vocab.to_list()}
        self.params.save(path, meta=meta, fmt=fmt)

    @classmethod
    def load(cls, path) -> "TreeAttnModel":
        store, meta = ParamStore.load(path)
        return cls(ModelConfig.from_dict(meta["config"]), Vocabulary.from_list(meta["vocab"]),
                   params=store)

    def copy(self) -> "TreeAttnModel":
        return TreeAttnModel(self.config, self.vocab, params=self.params.copy())


# -- evaluation ------------------------------------------------------------------------

class UndefinedCorrelationError(ValueError):
    pass


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length series of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    vx, vy = float(dx @ dx), float(dy @ dy)
    if vx == 0.0 or vy == 0.0:
        raise UndefinedCorrelationError("zero variance: correlation undefined")
    # one square root of the product keeps r = +-1 exact for mirrored series
    return float(np.clip((dx @ dy) / math.sqrt(vx * vy), -1.0, 1.0))


@dataclass
class EvalReport:
    pearson: float
    mse: float
    n: int
    error: str | None = None

    def to_dict(self) -> dict:
        return {"pearson": None if math.isnan(self.pearson) else self.pearson,
                "mse": self.mse, "n": self.n, "error": self.error}


def report_from(preds: Sequence[float], golds: Sequence[float]) -> EvalReport:
    p, g = np.asarray(preds), np.asarray(golds)
    mse = float(np.mean((p - g) ** 2))
    try:
        return EvalReport(pearson(p, g), mse, len(p))
    except UndefinedCorrelationError as exc:
        return EvalReport(float("nan"), mse, len(p), str(exc))


def evaluate(model: TreeAttnModel, dataset: Sequence[SickExample]) -> EvalReport:
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    bound = model.params.bind(None)
    preds = [model.forward(bound, ex)[1].item() for ex in dataset]
    return report_from(preds, [ex.gold for ex in dataset])


# -- training --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: TreeAttnModel
    history: list[dict]
    best_epoch: int


def example_gradients(model: TreeAttnModel, ex: SickExample,
                      rng: np.random.Generator | None = None) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        bound = model.params.bind(tape)
        loss = model.loss(bound, ex, rng)
        grads = model.params.gradients(bound, tape.backward(loss))
    return loss.item(), grads


def train(
    config: ModelConfig,
    train_set: Sequence[SickExample],
    dev_set: Sequence[SickExample],
    model: TreeAttnModel | None = None,
    stop: Callable[[int, EvalReport], bool] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Mini-batch Adagrad on the KL loss, keeping the best-dev-MSE parameters.

    ``stop(epoch, dev_report)`` may end training early; ``on_epoch`` receives
    each history record as it is produced.
    """
    if not train_set:
        raise ValueError("training set is empty")
    if not dev_set:
        raise ValueError("development set is empty")
    if model is None:
        vocab = Vocabulary(w for s in iter_tokens(list(train_set) + list(dev_set)) for w in s)
        model = TreeAttnModel(config, vocab)
    store = model.params
    names = store.trainable()
    history: list[dict] = []
    best_mse, best_store, best_epoch = math.inf, store.copy(), 0
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = substream(config.seed, "shuffle", epoch).permutation(n)
        total_loss = 0.0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            acc = {name: np.zeros_like(store[name]) for name in names}
            for k in idx:
                rng = substream(config.seed, "dropout", epoch, int(k))
                loss, grads = example_gradients(model, train_set[k], rng)
                total_loss += loss
                for name in names:
                    acc[name] += grads[name]
            m = float(len(idx))
            acc = {name: g / m for name, g in acc.items()}
            acc = clip_gradients(acc, config.grad_clip)
            adagrad_step(store, acc, config.lr, config.weight_decay)
        report = evaluate(model, dev_set)
        record = {"epoch": epoch, "train_loss": total_loss / n,
                  "dev_pearson": report.to_dict()["pearson"], "dev_mse": report.mse}
        history.append(record)
        log.info("epoch %d loss %.6f dev pearson %s mse %.6f", epoch, record["train_loss"],
                 record["dev_pearson"], report.mse)
        if on_epoch is not None:
            on_epoch(record)
        if report.mse < best_mse:
            best_mse, best_store, best_epoch = report.mse, store.copy(), epoch
        if stop is not None and stop(epoch, report):
            break
    best = TreeAttnModel(config, model.vocab, params=best_store)
    return TrainResult(best, history, best_epoch)
