"""Bottom-up tree encoding with attention threaded through the cells."""

from __future__ import annotations

from typing import Mapping, Sequence

from . import attention as attn
from . import autodiff as ad
from .attention import AttentionSpec, QueryContext
from .autodiff import Tensor
from .cells import CellState, binary_step, child_sum_step, pack
from .treebank import BinTree, DepTree

Bound = Mapping[str, Mapping[str, Tensor]]


def _record(trace, node_id, label, word, child_ids, alpha, spec):
    if trace is None:
        return
    entry = {"id": node_id, "label": label, "word": word, "children": child_ids}
    if alpha is not None:
        a = alpha.data
        entry["alpha"] = attn.child_weights(a)
        entry["alpha_matrix"] = a.tolist()
        entry["normalization"] = spec.normalization
    trace.append(entry)


def _encode_dep(tree: DepTree, k: int, params: Bound, spec, ctx, inputs, trace) -> CellState:
    kids = [_encode_dep(tree, c, params, spec, ctx, inputs, trace) for c in tree.children[k]]
    override, alpha = None, None
    if kids and spec.kind != "none":
        M_k = ad.concat_rows([s.h for s in kids])
        (override,), alpha = attn.attend(M_k, spec, ctx, params, n_out=1)
    state = child_sum_step(params["cell"], inputs[k], kids, override)
    _record(trace, k + 1, tree.relation[k], tree.tokens[k][0],
            [c + 1 for c in tree.children[k]], alpha, spec)
    return state


def _encode_bin(node: BinTree, params: Bound, spec, ctx, inputs, counter, trace,
                attend_forget) -> CellState:
    node_id = counter[0]
    counter[0] += 1
    if node.leaf is not None:
        x = inputs[counter[1]]
        counter[1] += 1
        _record(trace, node_id, node.label, node.leaf, [], None, spec)
        return binary_step(params["cell"], x, None, None)
    slot = len(trace) if trace is not None else None
    if trace is not None:
        trace.append(None)  # keep preorder in the trace
    left_id = counter[0]
    left = _encode_bin(node.left, params, spec, ctx, inputs, counter, trace, attend_forget)
    right_id = counter[0]
    right = _encode_bin(node.right, params, spec, ctx, inputs, counter, trace, attend_forget)
    override, alpha = None, None
    if spec.kind != "none":
        M_k = ad.concat_rows([left.h, right.h])
        pair, alpha = attn.attend(M_k, spec, ctx, params, n_out=2)
        override = (pair[0], pair[1])
    state = binary_step(params["cell"], None, left, right, override, attend_forget)
    if trace is not None:
        sub: list = []
        _record(sub, node_id, node.label, None, [left_id, right_id], alpha, spec)
        trace[slot] = sub[0]
    return state


def encode_tree(
    tree: DepTree | BinTree,
    params: Bound,
    spec: AttentionSpec,
    ctx: QueryContext | None,
    inputs: Sequence[Tensor],
    trace: list | None = None,
    attend_forget: bool = False,
) -> CellState:
    """Encode ``tree`` bottom-up and return the root state.

    ``inputs`` holds one embedded word per token (dependency) or per leaf
    (binary tree), in surface order. A dependency tree runs child-sum steps
    and every node reads its word; a binary tree runs binary steps where only
    preterminals read words. If ``trace`` is a list, one record per node is
    appended (dependency: post-order, ids are 1-based token ids; binary:
    pre-order ids).
    """
    params = dict(params)
    for group in ("cell", "phrase"):
        if group in params:
            params[group] = pack(params[group])
    if isinstance(tree, DepTree):
        if len(inputs) != len(tree):
            raise ValueError(f"{len(inputs)} inputs for a {len(tree)}-token tree")
        return _encode_dep(tree, tree.root, params, spec, ctx, inputs, trace)
    if isinstance(tree, BinTree):
        counter = [0, 0]
        state = _encode_bin(tree, params, spec, ctx, inputs, counter, trace, attend_forget)
        if counter[1] != len(inputs):
            raise ValueError(f"{len(inputs)} inputs for a tree with {counter[1]} leaves")
        return state
    raise TypeError(f"cannot encode {type(tree).__name__}")
