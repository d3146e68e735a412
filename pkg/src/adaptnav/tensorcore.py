"""Small differentiable core: parameter sets, dense layers, losses, Adam and checkpoints.

Models compose these functions by hand; every ``*_forward`` returns what the
matching ``*_backward`` needs.  Parameter sets may be *stacked*: each array has
a leading agent axis and optimizer/clipping/Polyak updates can be restricted to
a subset of rows so that independent agents share storage.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class ParamSet:
    """Named float64 arrays with same-shape gradient buffers, in insertion order."""

    def __init__(self):
        self.values: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self.values.items():
            out.add(k, v.copy())
        return out

    def load_from(self, other: "ParamSet") -> None:
        for k in self.values:
            self.values[k][...] = other.values[k]

    def n_params(self) -> int:
        return sum(v.size for v in self.values.values())


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int,
                   lead: tuple[int, ...] = ()) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=lead + (fan_out, fan_in))


# ---------------------------------------------------------------- layers

def linear_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y = W x + b over the trailing axis of ``x``."""
    if W.shape[-1] != x.shape[-1] or W.shape[-2] != b.shape[-1]:
        raise ShapeError(f"linear: W{W.shape} b{b.shape} x{x.shape}")
    return x @ W.T + b


def linear_backward(W: np.ndarray, x: np.ndarray, gy: np.ndarray):
    """Returns (dW, db, dx) with batch axes summed out of dW and db."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = gy.reshape(-1, gy.shape[-1])
    return g2.T @ x2, g2.sum(axis=0), gy @ W


# weight blocks up to this many entries are gathered per sample; larger ones
# are applied per agent segment to avoid copying [B, out, in] tensors
GATHER_LIMIT = 512


def _segments(idx: np.ndarray):
    """Sort order of ``idx`` and (row, lo, hi) runs of equal values in sorted order."""
    if np.all(idx[1:] >= idx[:-1]):
        order = np.arange(len(idx))
    else:
        order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    ends = np.r_[starts[1:], len(idx)]
    return order, list(zip(sidx[starts].tolist(), starts.tolist(), ends.tolist()))


def stacked_linear_forward(W: np.ndarray, b: np.ndarray, idx: np.ndarray, x: np.ndarray):
    """Per-sample weights ``W[idx[n]]``; W is [A, out, in], x is [B, in]."""
    if W.shape[-1] != x.shape[-1]:
        raise ShapeError(f"stacked linear: W{W.shape} x{x.shape}")
    if W.shape[1] * W.shape[2] <= GATHER_LIMIT:
        return np.einsum("noi,ni->no", W[idx], x) + b[idx]
    y = np.empty((len(idx), W.shape[1]))
    if len(idx) == 0:
        return y
    order, segs = _segments(idx)
    xs = x[order]
    ys = np.empty_like(y)
    for a, lo, hi in segs:
        ys[lo:hi] = xs[lo:hi] @ W[a].T + b[a]
    y[order] = ys
    return y


def stacked_linear_backward(W: np.ndarray, idx: np.ndarray, x: np.ndarray, gy: np.ndarray):
    """(dW, db, dx) where only the rows named in ``idx`` receive gradient."""
    gW = np.zeros_like(W)
    gb = np.zeros(W.shape[:2])
    gx = np.empty((len(idx), W.shape[2]))
    if len(idx) == 0:
        return gW, gb, gx
    small = W.shape[1] * W.shape[2] <= GATHER_LIMIT
    if small:
        gx = np.einsum("no,noi->ni", gy, W[idx])
    order, segs = _segments(idx)
    gys, xs = gy[order], x[order]
    gxs = np.empty_like(gx)
    for a, lo, hi in segs:
        gW[a] = gys[lo:hi].T @ xs[lo:hi]
        gb[a] = gys[lo:hi].sum(axis=0)
        if not small:
            gxs[lo:hi] = gys[lo:hi] @ W[a]
    if not small:
        gx[order] = gxs
    return gW, gb, gx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return gy * (x > 0)


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, gy: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return gy * np.where(x > 0, 1.0, slope)


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return gy * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def softmax(x: np.ndarray, mask: np.ndarray | None = None, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; masked entries come out exactly 0."""
    if mask is None:
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)
    mask = np.broadcast_to(mask, x.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("softmax: every entry of a row is masked")
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, gp: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (gp - (gp * p).sum(axis=axis, keepdims=True))


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = max(diff.size, 1)
    return float(np.mean(diff ** 2)) if diff.size else 0.0, 2.0 * diff / n


# ---------------------------------------------------------------- optimisation

@dataclass
class AdamState:
    lr: float
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: np.ndarray | int = 0


def adam_init(params: ParamSet, lr: float, eps: float = 1e-8, stacked: int | None = None) -> AdamState:
    """Moments for ``params``; ``stacked`` gives the agent-axis length for per-row step counts."""
    st = AdamState(lr=lr, eps=eps)
    for k, v in params.values.items():
        st.m[k] = np.zeros_like(v)
        st.v[k] = np.zeros_like(v)
    st.step = np.zeros(stacked, dtype=np.int64) if stacked else 0
    return st


def adam_step(params: ParamSet, state: AdamState, rows: np.ndarray | None = None) -> None:
    """Bias-corrected Adam update; clears the gradients it consumed.

    With ``rows`` only those leading-axis slices are updated and only their
    step counters advance.
    """
    b1, b2 = state.beta1, state.beta2
    if rows is None:
        state.step = state.step + 1
        t = state.step
        for k, p in params.values.items():
            g = params.grads[k]
            m, v = state.m[k], state.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if np.ndim(t):
                tt = t.reshape((-1,) + (1,) * (p.ndim - 1))
            else:
                tt = t
            mhat = m / (1 - b1 ** tt)
            vhat = v / (1 - b2 ** tt)
            p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
            g.fill(0.0)
        return
    rows = np.asarray(rows)
    state.step[rows] += 1
    t = state.step[rows]
    for k, p in params.values.items():
        g = params.grads[k][rows]
        m = b1 * state.m[k][rows] + (1 - b1) * g
        v = b2 * state.v[k][rows] + (1 - b2) * g * g
        state.m[k][rows] = m
        state.v[k][rows] = v
        tt = t.reshape((-1,) + (1,) * (p.ndim - 1))
        mhat = m / (1 - b1 ** tt)
        vhat = v / (1 - b2 ** tt)
        p[rows] -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
        params.grads[k][rows] = 0.0


def grad_norm(params: ParamSet, rows: np.ndarray | None = None) -> np.ndarray | float:
    if rows is None:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in params.grads.values())))
    rows = np.asarray(rows)
    sq = np.zeros(len(rows))
    for g in params.grads.values():
        sq += (g[rows] ** 2).reshape(len(rows), -1).sum(axis=1)
    return np.sqrt(sq)


def clip_grad_norm(params: ParamSet, max_norm: float, rows: np.ndarray | None = None):
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the scale."""
    norm = grad_norm(params, rows)
    scale = np.minimum(1.0, max_norm / np.maximum(norm, 1e-12))
    if rows is None:
        scale = float(scale)
        if scale < 1.0:
            for g in params.grads.values():
                g *= scale
        return scale
    rows = np.asarray(rows)
    for g in params.grads.values():
        g[rows] *= scale.reshape((-1,) + (1,) * (g.ndim - 1))
    return scale


def polyak_update(target: ParamSet, online: ParamSet, tau: float,
                  rows: np.ndarray | None = None) -> None:
    """target <- tau * online + (1 - tau) * target, with ``tau`` the online fraction."""
    for k, t in target.values.items():
        o = online.values[k]
        if rows is None:
            t *= 1.0 - tau
            t += tau * o
        else:
            t[rows] = (1.0 - tau) * t[rows] + tau * o[rows]


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, groups: Mapping[str, ParamSet], meta: dict | None = None) -> None:
    """Lossless JSON: every value written as a hex float."""
    doc = {"format_version": CHECKPOINT_VERSION, "meta": meta or {}, "groups": {}}
    for gname, ps in groups.items():
        doc["groups"][gname] = {
            name: {"shape": list(v.shape), "values": [float(x).hex() for x in v.reshape(-1)]}
            for name, v in ps.values.items()
        }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, ParamSet], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    groups = {}
    for gname, entries in doc["groups"].items():
        ps = ParamSet()
        for name, rec in entries.items():
            vals = np.array([float.fromhex(x) for x in rec["values"]], dtype=np.float64)
            ps.add(name, vals.reshape(rec["shape"]))
        groups[gname] = ps
    return groups, doc.get("meta", {})


# ---------------------------------------------------------------- gradient checking

def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor absorbs round-off on near-zero entries."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def gradient_check(f: Callable[[], float], arrays: Mapping[str, np.ndarray],
                   analytic: Mapping[str, np.ndarray], h: float = 1e-5) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per array."""
    return {name: relative_error(analytic[name], numerical_grad(f, arr, h))
            for name, arr in arrays.items()}
