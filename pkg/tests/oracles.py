"""Independent reference computations for the tests.

Everything here works on plain nested lists / numpy arrays through mpmath at
40 significant digits and never calls into ``treeattn``'s tensor code.
Vectors are column-style lists; weights act as ``W @ x``.
"""

from __future__ import annotations

import mpmath as mp
import numpy as np

mp.mp.dps = 40


def M(a) -> mp.matrix:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    return mp.matrix(a.tolist())


def V(a) -> mp.matrix:
    """Column vector."""
    return mp.matrix([[float(v)] for v in np.asarray(a, dtype=np.float64).reshape(-1)])


def to_np(m: mp.matrix) -> np.ndarray:
    return np.array([[float(m[i, j]) for j in range(m.cols)] for i in range(m.rows)])


def vec_np(m: mp.matrix) -> np.ndarray:
    return to_np(m).reshape(-1)


def emap(f, m: mp.matrix) -> mp.matrix:
    out = mp.matrix(m.rows, m.cols)
    for i in range(m.rows):
        for j in range(m.cols):
            out[i, j] = f(m[i, j])
    return out


def hadamard(a: mp.matrix, b: mp.matrix) -> mp.matrix:
    out = mp.matrix(a.rows, a.cols)
    for i in range(a.rows):
        for j in range(a.cols):
            out[i, j] = a[i, j] * b[i, j]
    return out


def sig(m):
    return emap(lambda v: 1 / (1 + mp.exp(-v)), m)


def th(m):
    return emap(mp.tanh, m)


def zeros(d):
    return mp.matrix(d, 1)


def _guard(s):
    """Denominator floor: |s| < 1e-8 becomes 1e-8 with the sign of s."""
    if abs(s) < mp.mpf("1e-8"):
        return mp.mpf("1e-8") * (1 if s >= 0 else -1)
    return s


def softmax_list(xs):
    xs = [mp.mpf(x) for x in xs]
    top = max(xs)
    es = [mp.exp(x - top) for x in xs]
    s = sum(es)
    return [e / s for e in es]


# -- cells -----------------------------------------------------------------------------

def child_sum(P, x, children, h_override=None):
    """P: dict of numpy weights (W_i, U_i, b_i, ...); x: array or None; children: [(h, c)]."""
    d = np.asarray(P["U_i"]).shape[0]
    xv = None if x is None else V(x)
    hs = [(V(h), V(c)) for h, c in children]
    if h_override is not None:
        ht = V(h_override)
    else:
        ht = zeros(d)
        for h, _ in hs:
            ht = ht + h

    def pre(g, hvec):
        z = V(np.asarray(P[f"b_{g}"]).reshape(-1))
        if xv is not None:
            z = z + M(P[f"W_{g}"]) * xv
        return z + M(P[f"U_{g}"]) * hvec

    i = sig(pre("i", ht))
    o = sig(pre("o", ht))
    u = th(pre("c", ht))
    c = hadamard(i, u)
    for h, ck in hs:
        f = sig(pre("f", h))
        c = c + hadamard(f, ck)
    h = hadamard(o, th(c))
    return vec_np(h), vec_np(c)


def lstm_step(P, x, h_prev, c_prev):
    """Textbook LSTM step: i, f, o gates and candidate from [x, h_prev]."""
    xv, hv, cv = V(x), V(h_prev), V(c_prev)

    def pre(g):
        return M(P[f"W_{g}"]) * xv + M(P[f"U_{g}"]) * hv + V(np.asarray(P[f"b_{g}"]).reshape(-1))

    i, f, o, u = sig(pre("i")), sig(pre("f")), sig(pre("o")), th(pre("c"))
    c = hadamard(f, cv) + hadamard(i, u)
    h = hadamard(o, th(c))
    return vec_np(h), vec_np(c)


def lstm_run(P, xs):
    d = np.asarray(P["U_i"]).shape[0]
    h, c = np.zeros(d), np.zeros(d)
    for x in xs:
        h, c = lstm_step(P, x, h, c)
    return h


def binary(P, x, left, right, override=None, attend_forget=False):
    d = np.asarray(P["W_i"]).shape[0]
    xv = zeros(np.asarray(P["W_i"]).shape[1]) if x is None else V(x)
    if left is None:
        def pre0(g):
            return M(P[f"W_{g}"]) * xv + V(np.asarray(P[f"b_{g}"]).reshape(-1))
        i, o, u = sig(pre0("i")), sig(pre0("o")), th(pre0("c"))
        c = hadamard(i, u)
        return vec_np(hadamard(o, th(c))), vec_np(c)
    raw = [V(left[0]), V(right[0])]
    cs = [V(left[1]), V(right[1])]
    att = raw if override is None else [V(override[0]), V(override[1])]

    def pre(g, hvecs):
        z = M(P[f"W_{g}"]) * xv + V(np.asarray(P[f"b_{g}"]).reshape(-1))
        for l in range(2):
            z = z + M(P[f"U_{g}{l + 1}"]) * hvecs[l]
        return z

    i, o, u = sig(pre("i", att)), sig(pre("o", att)), th(pre("c", att))
    fh = att if attend_forget else raw
    c = hadamard(i, u)
    for k in range(2):
        z = M(P["W_f"]) * xv + V(np.asarray(P["b_f"]).reshape(-1))
        for l in range(2):
            z = z + M(P[f"U_f{k + 1}{l + 1}"]) * fh[l]
        c = c + hadamard(sig(z), cs[k])
    return vec_np(hadamard(o, th(c))), vec_np(c)


# -- attention ----------------------------------------------------------------------------

def soft(P, hs, s):
    """Returns (h_tilde, alphas)."""
    sv = V(s)
    ms = [th(M(P["W_m"]) * V(h) + M(P["U_m"]) * sv) for h in hs]
    w = M(P["w"])  # 1 x d
    scores = [(w * m)[0, 0] for m in ms]
    total = sum(scores)
    total = _guard(total)
    alphas = [sc / total for sc in scores]
    g = zeros(len(np.asarray(hs[0]).reshape(-1)))
    for a, h in zip(alphas, hs):
        g = g + a * V(h)
    ht = th(M(P["W_a"]) * g + V(np.asarray(P["b_a"]).reshape(-1)))
    return vec_np(ht), [float(a) for a in alphas]


def align_rows(Q, K, mode="softmax"):
    """Q: list of query vectors, K: list of key vectors -> list of alpha rows (mpf)."""
    width = len(K[0])
    rows = []
    for q in Q:
        scores = [mp.fsum(mp.mpf(a) * mp.mpf(b) for a, b in zip(q, k)) / mp.sqrt(width) for k in K]
        if mode == "softmax":
            rows.append(softmax_list(scores))
        else:
            s = mp.fsum(scores)
            s = _guard(s)
            rows.append([x / s for x in scores])
    return rows


def _project(W, vecs):
    Wm = M(W)
    return [[(Wm * V(v))[i, 0] for i in range(Wm.rows)] for v in vecs]


def model1(P, hs, query_vec=None, n_out=1, mode="softmax"):
    """Key/query/value attention; query_vec None means self attention."""
    keys = _project(P["W_k"], hs)
    values = _project(P["W_v"], hs)
    queries = _project(P["W_q"], hs if query_vec is None else [query_vec])
    alpha = align_rows(queries, keys, mode)
    outs = []
    for arow in alpha:
        outs.append([mp.fsum(a * v[j] for a, v in zip(arow, values)) for j in range(len(values[0]))])
    return _reduce(outs, query_vec is None, n_out), [[float(a) for a in r] for r in alpha]


def model2(P, hs, query_vec=None, n_out=1, mode="softmax"):
    keys = _project(P["W_k"], hs)
    queries = _project(P["W_q"], hs if query_vec is None else [query_vec])
    alpha = align_rows(queries, keys, mode)
    W, b = M(P["W"]), np.asarray(P["b"]).reshape(-1)
    outs = []
    for arow in alpha:
        mixed = [mp.fsum(a * mp.mpf(float(h[j])) for a, h in zip(arow, hs)) for j in range(len(hs[0]))]
        z = W * mp.matrix([[v] for v in mixed])
        outs.append([mp.tanh(z[i, 0] + b[i]) for i in range(W.rows)])
    return _reduce(outs, query_vec is None, n_out), [[float(a) for a in r] for r in alpha]


def _reduce(rows, matrix, n_out):
    rows = [np.array([float(v) for v in r]) for r in rows]
    if n_out == 1:
        return [sum(rows)] if matrix else [rows[0]]
    return rows if matrix else [rows[0]] * n_out


# -- misc ---------------------------------------------------------------------------------

def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = f(x)
        flat[k] = orig - eps
        down = f(x)
        flat[k] = orig
        gf[k] = (up - down) / (2 * eps)
    return g


def pearson_hand(xs, ys) -> float:
    n = len(xs)
    mx, my = mp.fsum(xs) / n, mp.fsum(ys) / n
    cov = mp.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    vx = mp.fsum((x - mx) ** 2 for x in xs)
    vy = mp.fsum((y - my) ** 2 for y in ys)
    return float(cov / mp.sqrt(vx * vy))
