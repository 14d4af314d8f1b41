"""Tree-LSTM cell steps and the sequential LSTM used for query vectors.

All vectors are 1 x d row tensors; a weight ``W`` of shape (out, in) acts
as ``x @ W.T``. Each step takes a dict of bound parameter tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

Params = Mapping[str, Tensor]

GATES = ("i", "o", "c", "f")


@dataclass
class CellState:
    h: Tensor
    c: Tensor


def _uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_child_sum(store: ad.ParamStore, prefix: str, d: int, e: int, rng: np.random.Generator) -> None:
    for g in GATES:
        store.add(f"{prefix}.W_{g}", _uniform(rng, d, e))
        store.add(f"{prefix}.U_{g}", _uniform(rng, d, d))
        store.add(f"{prefix}.b_{g}", np.zeros((1, d)))


# the plain sequential LSTM has exactly the child-sum parameter layout
init_lstm = init_child_sum


def init_binary(store: ad.ParamStore, prefix: str, d: int, e: int, rng: np.random.Generator) -> None:
    for g in GATES:
        store.add(f"{prefix}.W_{g}", _uniform(rng, d, e))
        store.add(f"{prefix}.b_{g}", np.zeros((1, d)))
    for g in ("i", "o", "c"):
        for l in (1, 2):
            store.add(f"{prefix}.U_{g}{l}", _uniform(rng, d, d))
    for k in (1, 2):
        for l in (1, 2):
            store.add(f"{prefix}.U_f{k}{l}", _uniform(rng, d, d))


class Packed(dict):
    """Gate weights stacked so each input needs one matmul per step.

    Build once per forward pass with :func:`pack`; the stacked tensors are
    copies, so in-place edits to the source arrays are not seen afterwards.
    """


def pack(p: Params) -> Packed:
    if isinstance(p, Packed):
        return p
    q = Packed(p)
    q["b_iou"] = ad.concat_cols([p["b_i"], p["b_o"], p["b_c"]])
    q["W_iou"] = ad.concat_rows([p["W_i"], p["W_o"], p["W_c"]])
    if "U_i" in p:
        q["U_iou"] = ad.concat_rows([p["U_i"], p["U_o"], p["U_c"]])
    else:
        for l in (1, 2):
            q[f"U_iou{l}"] = ad.concat_rows([p[f"U_i{l}"], p[f"U_o{l}"], p[f"U_c{l}"]])
            q[f"U_ff{l}"] = ad.concat_rows([p[f"U_f1{l}"], p[f"U_f2{l}"]])
        q["b_ff"] = ad.concat_cols([p["b_f"], p["b_f"]])
    return q


def _check_input(x: Tensor | None, p: Params) -> None:
    if x is not None and x.shape != (1, p["W_i"].cols):
        raise DimensionError(f"input {x.shape} does not fit W_i {p['W_i'].shape}")


def _combine(z: Tensor, zf: Tensor | None, cs: Tensor | None) -> CellState:
    """Gate nonlinearities and the memory update as one recorded operation.

    ``z`` is 1 x 3d (input, output, candidate pre-activations), ``zf`` holds
    one forget pre-activation row per child and ``cs`` the matching child
    memories. Computes c = i*u + sum_k f_k*c_k and h = o*tanh(c).
    """
    zd = z.data
    d = z.cols // 3
    i = ad.stable_sigmoid(zd[..., :d])
    o = ad.stable_sigmoid(zd[..., d : 2 * d])
    u = np.tanh(zd[..., 2 * d :])
    c = i * u
    if zf is not None:
        f = ad.stable_sigmoid(zf.data)
        cd = cs.data
        for k in range(cd.shape[-2]):
            c = c + f[..., k : k + 1, :] * cd[..., k : k + 1, :]
    tc = np.tanh(c)
    out = ad.join([o * tc, c], axis=-1)

    def rule(g):
        gh, gc = g[:, :d], g[:, d:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([dc * u * i * (1.0 - i), gh * tc * o * (1.0 - o),
                             dc * i * (1.0 - u * u)], axis=1)
        if zf is None:
            return (dz,)
        return dz, dc * cd * f * (1.0 - f), dc * f

    hc = ad.custom(out, (z,) if zf is None else (z, zf, cs), rule)
    return CellState(ad.cols(hc, 0, d), ad.cols(hc, d, 2 * d))


def child_sum_step(
    p: Params,
    x: Tensor | None,
    children: Sequence[CellState],
    h_override: Tensor | None = None,
) -> CellState:
    """Child-sum Tree-LSTM node update.

    ``h_override`` replaces the summed child hidden state in the input,
    output and candidate gates; per-child forget gates always see the raw
    child hidden states.
    """
    _check_input(x, p)
    q = pack(p)
    d = q["U_i"].rows
    for ch in children:
        if ch.h.shape != (1, d):
            raise DimensionError(f"child hidden {ch.h.shape} does not match d={d}")
    H = ad.concat_rows([ch.h for ch in children]) if children else None
    h_tilde = h_override if h_override is not None else (None if H is None else ad.sum_rows(H))
    z = q["b_iou"] if x is None else ad.linear(x, q["W_iou"], q["b_iou"])
    if h_tilde is not None:
        z = z + ad.linear(h_tilde, q["U_iou"])
    if not children:
        return _combine(z, None, None)
    wx = q["b_f"] if x is None else ad.linear(x, q["W_f"], q["b_f"])
    zf = ad.linear(H, q["U_f"], wx)
    return _combine(z, zf, ad.concat_rows([ch.c for ch in children]))


def lstm_step(p: Params, x: Tensor, prev: CellState | None) -> CellState:
    """Standard LSTM step; identical to a child-sum step with one child."""
    return child_sum_step(p, x, [] if prev is None else [prev])


def lstm_encode(p: Params, tokens: Sequence[Tensor]) -> Tensor:
    """Final hidden state of a left-to-right LSTM over ``tokens``."""
    if not tokens:
        raise ValueError("lstm_encode needs a non-empty sequence")
    p = pack(p)
    state = None
    for x in tokens:
        state = lstm_step(p, x, state)
    return state.h


def binary_step(
    p: Params,
    x: Tensor | None,
    left: CellState | None,
    right: CellState | None,
    h_override: tuple[Tensor, Tensor] | None = None,
    attend_forget: bool = False,
) -> CellState:
    """Binary (N=2) Tree-LSTM node update.

    With no children this is a preterminal: gates see only ``x``. Overrides
    replace the two child hiddens in the input, output and candidate gates,
    and in the forget gates too when ``attend_forget`` is set.
    """
    _check_input(x, p)
    if (left is None) != (right is None):
        raise ValueError("binary_step needs both children or neither")
    q = pack(p)
    z = q["b_iou"] if x is None else ad.linear(x, q["W_iou"], q["b_iou"])
    if left is None:
        return _combine(z, None, None)
    d = q["U_i1"].rows
    for ch in (left, right):
        if ch.h.shape != (1, d):
            raise DimensionError(f"child hidden {ch.h.shape} does not match d={d}")
    raw = (left.h, right.h)
    att = raw if h_override is None else h_override
    z = z + ad.linear(att[0], q["U_iou1"]) + ad.linear(att[1], q["U_iou2"])
    fh = att if attend_forget else raw
    # row k of the reshaped slab is the pre-activation of forget gate k
    zf = ad.linear(fh[0], q["U_ff1"], q["b_ff"]) + ad.linear(fh[1], q["U_ff2"])
    if x is not None:
        wx = ad.linear(x, q["W_f"])
        zf = zf + ad.concat_cols([wx, wx])
    zf = ad.reshape(zf, 2, d)
    return _combine(z, zf, ad.concat_rows([left.c, right.c]))
