"""Graph attention over the intersection graph, with hand-written backward passes.

A layer is evaluated for a batch of *target* nodes, each with a padded list of
neighbour positions into the layer input (slot 0 is always the node itself).
The same code serves full-graph passes (targets = all nodes) and the local
receptive-field passes used in training, where only a few nodes per sample
are needed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .netgraph import RoadNetwork
from .tensorcore import (ParamSet, elu, elu_backward, leaky_relu, leaky_relu_backward, softmax,
                         softmax_backward, xavier_uniform)

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class GatLayerSpec:
    fin: int
    fout: int
    heads: int
    concat: bool

    @property
    def out_dim(self) -> int:
        return self.heads * self.fout if self.concat else self.fout


def stack_config(hops: int, state_dim: int = 4, dims: Sequence[int] = (7, 10),
                 heads: int = 3) -> list[GatLayerSpec]:
    """Hidden layers concatenate heads, the last layer averages them."""
    if hops not in (0, 1, 2):
        raise ValueError(f"hops must be 0, 1 or 2, got {hops}")
    specs = []
    fin = state_dim
    for layer in range(hops):
        final = layer == hops - 1
        spec = GatLayerSpec(fin, dims[layer], heads, concat=not final)
        specs.append(spec)
        fin = spec.out_dim
    return specs


def output_dim(specs: Sequence[GatLayerSpec], state_dim: int) -> int:
    return specs[-1].out_dim if specs else state_dim


def init_gat(specs: Sequence[GatLayerSpec], rng: np.random.Generator) -> ParamSet:
    ps = ParamSet()
    for l, s in enumerate(specs):
        ps.add(f"l{l}.W", xavier_uniform(rng, s.fout, s.fin, lead=(s.heads,)))
        ps.add(f"l{l}.a_src", xavier_uniform(rng, 1, s.fout, lead=(s.heads,))[:, 0, :])
        ps.add(f"l{l}.a_dst", xavier_uniform(rng, 1, s.fout, lead=(s.heads,))[:, 0, :])
        ps.add(f"l{l}.bias", np.zeros(s.out_dim))
    return ps


def neighbor_table(net: RoadNetwork) -> tuple[np.ndarray, np.ndarray]:
    """[N, K] neighbour ids (self first, then ascending one-hop neighbours either direction).

    Padding slots repeat the node id and are masked out.
    """
    n = net.n_intersections
    nbrs = [set() for _ in range(n)]
    for r in net.roads:
        nbrs[r.head].add(r.tail)
        nbrs[r.tail].add(r.head)
    k = 1 + max(len(s) for s in nbrs)
    table = np.repeat(np.arange(n)[:, None], k, axis=1)
    mask = np.zeros((n, k), dtype=bool)
    for i, s in enumerate(nbrs):
        row = [i] + sorted(s)
        table[i, :len(row)] = row
        mask[i, :len(row)] = True
    return table, mask


# ---------------------------------------------------------------- one layer

def layer_forward(params: ParamSet, l: int, spec: GatLayerSpec, X: np.ndarray, nbr: np.ndarray,
                  mask: np.ndarray, dropout: float = 0.0, rng: np.random.Generator | None = None):
    """X [B, n, fin]; nbr/mask [B, T, K] -> out [B, T, out_dim], cache."""
    B, T, K = nbr.shape
    H, O = spec.heads, spec.fout
    W = params[f"l{l}.W"]
    a_src = params[f"l{l}.a_src"]
    a_dst = params[f"l{l}.a_dst"]
    bi = np.arange(B)[:, None, None]
    Xg = X[bi, nbr]                                                  # [B,T,K,fin]
    Hg = (Xg @ W.reshape(H * O, spec.fin).T).reshape(B, T, K, H, O)
    src = (Hg[:, :, 0] * a_src).sum(-1)                              # [B,T,H]
    dst = (Hg * a_dst).sum(-1)                                       # [B,T,K,H]
    pre = src[:, :, None, :] + dst
    e = leaky_relu(pre, LEAKY_SLOPE)
    alpha = softmax(e, mask[..., None], axis=2)
    keep = None
    alpha_d = alpha
    if dropout > 0 and rng is not None:
        keep = (rng.random(alpha.shape) >= dropout) / (1.0 - dropout)
        alpha_d = alpha * keep
    agg = (alpha_d[..., None] * Hg).sum(axis=2)                     # [B,T,H,O]
    if spec.concat:
        z = agg.reshape(B, T, H * O) + params[f"l{l}.bias"]
        out = elu(z)
    else:
        z = agg.mean(axis=2) + params[f"l{l}.bias"]
        out = z
    cache = dict(X=X, nbr=nbr, Xg=Xg, Hg=Hg, pre=pre, alpha=alpha, alpha_d=alpha_d, keep=keep, z=z)
    return out, cache


def layer_backward(params: ParamSet, l: int, spec: GatLayerSpec, cache: dict, gout: np.ndarray,
                   need_input_grad: bool = True) -> np.ndarray | None:
    """Accumulates parameter grads into ``params.grads``; returns dL/dX if requested."""
    H, O = spec.heads, spec.fout
    Hg, Xg, alpha, alpha_d = cache["Hg"], cache["Xg"], cache["alpha"], cache["alpha_d"]
    B, T, K = alpha.shape[:3]
    W = params[f"l{l}.W"]
    a_src = params[f"l{l}.a_src"]
    a_dst = params[f"l{l}.a_dst"]
    if spec.concat:
        gz = elu_backward(cache["z"], gout)
        gagg = gz.reshape(B, T, H, O)
    else:
        gz = gout
        gagg = np.broadcast_to(gz[:, :, None, :] / H, (B, T, H, O))
    params.grads[f"l{l}.bias"] += gz.reshape(-1, gz.shape[-1]).sum(axis=0)

    g_alpha = (gagg[:, :, None] * Hg).sum(-1)                        # [B,T,K,H]
    gHg = alpha_d[..., None] * gagg[:, :, None]
    if cache["keep"] is not None:
        g_alpha = g_alpha * cache["keep"]
    g_e = softmax_backward(alpha, g_alpha, axis=2)
    g_pre = leaky_relu_backward(cache["pre"], g_e, LEAKY_SLOPE)
    g_src = g_pre.sum(axis=2)                                        # [B,T,H]
    params.grads[f"l{l}.a_src"] += np.einsum("bth,btho->ho", g_src, Hg[:, :, 0])
    params.grads[f"l{l}.a_dst"] += np.einsum("btkh,btkho->ho", g_pre, Hg)
    gHg = gHg + g_pre[..., None] * a_dst
    gHg[:, :, 0] += g_src[..., None] * a_src
    gH2 = gHg.reshape(B * T * K, H * O)
    X2 = Xg.reshape(B * T * K, spec.fin)
    params.grads[f"l{l}.W"] += (gH2.T @ X2).reshape(H, O, spec.fin)
    if not need_input_grad:
        return None
    gXg = (gH2 @ W.reshape(H * O, spec.fin)).reshape(B, T, K, spec.fin)
    gX = np.zeros_like(cache["X"])
    bi = np.broadcast_to(np.arange(B)[:, None, None], cache["nbr"].shape)
    np.add.at(gX, (bi, cache["nbr"]), gXg)
    return gX


# ---------------------------------------------------------------- stacks

class GatStack:
    """A fixed layer stack bound to one network's neighbour table."""

    def __init__(self, specs: Sequence[GatLayerSpec], table: np.ndarray, mask: np.ndarray,
                 dropout: float = 0.0):
        self.specs = list(specs)
        self.table = table
        self.mask = mask
        self.dropout = dropout

    @property
    def hops(self) -> int:
        return len(self.specs)

    def forward_full(self, params: ParamSet, X: np.ndarray, train: bool = False,
                     rng: np.random.Generator | None = None):
        """Every node at every layer. X [B, N, F] -> [B, N, out], caches."""
        B = X.shape[0]
        nbr = np.broadcast_to(self.table, (B,) + self.table.shape)
        mask = np.broadcast_to(self.mask, nbr.shape)
        caches = []
        h = X
        for l, spec in enumerate(self.specs):
            h, c = layer_forward(params, l, spec, h, nbr, mask,
                                 self.dropout if train else 0.0, rng)
            caches.append(c)
        return h, caches

    def forward_nodes(self, params: ParamSet, X: np.ndarray, targets: np.ndarray,
                      train: bool = False, rng: np.random.Generator | None = None):
        """Embeddings of ``targets[b]`` only, via its receptive field. X [B,N,F] -> [B, out]."""
        B = X.shape[0]
        L = self.hops
        if L == 0:
            return X[np.arange(B), targets], None
        # node ids needed at each depth: sets[L] = targets, sets[l-1] = table[sets[l]]
        sets = [None] * (L + 1)
        sets[L] = targets[:, None]
        for l in range(L, 0, -1):
            sets[l - 1] = self.table[sets[l]].reshape(B, -1)
        h = X[np.arange(B)[:, None], sets[0]]
        caches = []
        K = self.table.shape[1]
        for l, spec in enumerate(self.specs):
            T = sets[l + 1].shape[1]
            nbr = np.broadcast_to(np.arange(T * K).reshape(T, K), (B, T, K))
            mask = self.mask[sets[l + 1]]
            h, c = layer_forward(params, l, spec, h, nbr, mask,
                                 self.dropout if train else 0.0, rng)
            caches.append(c)
        return h[:, 0], caches

    def forward_nodes_dedup(self, params: ParamSet, X: np.ndarray, targets: np.ndarray,
                            train: bool = False, rng: np.random.Generator | None = None):
        """Like ``forward_nodes`` but evaluates each distinct receptive field once.

        Returns (out [B, out], caches, inverse); pass ``inverse`` to ``backward``.
        Samples that share a receptive field also share a dropout mask.
        """
        B = X.shape[0]
        if self.hops == 0:
            return X[np.arange(B), targets], None, None
        field = targets[:, None]
        for _ in range(self.hops):
            field = self.table[field].reshape(B, -1)
        vals = X[np.arange(B)[:, None], field].reshape(B, -1)
        key = np.concatenate([targets[:, None].astype(np.int64), _pack_rows(vals)], axis=1)
        first, inverse = unique_rows(key)
        out, caches = self.forward_nodes(params, X[first], targets[first], train, rng)
        return out[inverse], caches, inverse

    def backward(self, params: ParamSet, caches, gout: np.ndarray, local: bool = True,
                 inverse: np.ndarray | None = None) -> None:
        """Accumulate parameter grads given dL/d(output). ``gout`` is [B, out] for local passes."""
        if not self.specs:
            return
        if inverse is not None:
            n_unique = caches[-1]["alpha"].shape[0]
            summed = np.zeros((n_unique, gout.shape[1]))
            np.add.at(summed, inverse, gout)
            gout = summed
        g = gout[:, None, :] if local else gout
        for l in range(self.hops - 1, -1, -1):
            g = layer_backward(params, l, self.specs[l], caches[l], g, need_input_grad=l > 0)

    def attention(self, params: ParamSet, X: np.ndarray) -> list["AttentionRecord"]:
        """Attention weights of every layer on a single snapshot X [N, F]."""
        _, caches = self.forward_full(params, X[None])
        records = []
        for l, c in enumerate(caches):
            records.append(AttentionRecord(l, self.table, self.mask, c["alpha"][0]))
        return records


def _pack_rows(vals: np.ndarray) -> np.ndarray:
    """Exact int64 row keys: 62 bits per column for 0/1 rows, raw float bits otherwise."""
    if vals.size and np.all((vals == 0) | (vals == 1)):
        B, n = vals.shape
        width = -(-n // 62) * 62
        bits = np.zeros((B, width), dtype=np.int64)
        bits[:, :n] = vals
        weights = np.left_shift(np.int64(1), np.arange(62, dtype=np.int64))
        return bits.reshape(B, -1, 62) @ weights
    v = np.ascontiguousarray(vals, dtype=np.float64)
    return v.view(np.int64).reshape(len(v), -1)


def unique_rows(key: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(index of first occurrence per distinct row, inverse map) for an int matrix."""
    B = len(key)
    order = np.lexsort(key.T[::-1])
    sk = key[order]
    new = np.ones(B, dtype=bool)
    new[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    group = np.cumsum(new) - 1
    inverse = np.empty(B, dtype=np.int64)
    inverse[order] = group
    return order[new], inverse


@dataclass
class AttentionRecord:
    layer: int
    table: np.ndarray
    mask: np.ndarray
    alpha: np.ndarray  # [N, K, heads]

    def weights(self, node: int, head: int = 0) -> dict[int, float]:
        return {int(j): float(a) for j, a, m in
                zip(self.table[node], self.alpha[node, :, head], self.mask[node]) if m}

    def entropy(self) -> np.ndarray:
        return attention_entropy(self)


def attention_entropy(record: AttentionRecord) -> np.ndarray:
    """[N, heads] entropies in nats."""
    a = record.alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, -a * np.log(a), 0.0)
    return terms.sum(axis=1)


def write_attention_csv(path: str | Path, records: Sequence[AttentionRecord],
                        snapshot: int = 0, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["snapshot", "layer", "node", "neighbor", "head", "weight", "entropy"])
        for rec in records:
            ent = rec.entropy()
            n, k, heads = rec.alpha.shape
            for i in range(n):
                for h in range(heads):
                    for s in range(k):
                        if rec.mask[i, s]:
                            w.writerow([snapshot, rec.layer, i, int(rec.table[i, s]), h,
                                        repr(float(rec.alpha[i, s, h])), repr(float(ent[i, h]))])
