"""Minimal reverse-mode autodiff on float64 numpy arrays, plus Adam.

All training math runs in 64-bit. A Tape records primitive ops in
topological order; backward() replays them once in reverse and returns
gradients for every leaf. Ops cover exactly what the encoders and losses
need: gather, matmul, add_bias, mean_rows, tanh, dot, mse, softmax_nll,
scalar_add, scale, stack_scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

Array = np.ndarray


def as_tensor(x) -> Array:
    """Coerce to a C-order float64 array and verify finiteness."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite values in tensor")
    return arr


def softmax_nll_value(scores: Array, positive_index: int) -> float:
    """-log softmax(scores)[positive_index], via max-shifted log-sum-exp."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise ValueError("scores must be a non-empty 1-D array")
    if not 0 <= positive_index < scores.size:
        raise IndexError(f"positive_index {positive_index} out of range for {scores.size} scores")
    shifted = scores - scores.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[positive_index])


@dataclass
class _Node:
    op: str
    value: Array
    args: tuple[int, ...]
    aux: Any = None


class Tape:
    """Record of primitive ops; node ids are list indices (topological)."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def value(self, nid: int) -> Array:
        return self._nodes[nid].value

    def op_name(self, nid: int) -> str:
        return self._nodes[nid].op

    def _push(self, op: str, value: Array, args: tuple[int, ...], aux: Any = None) -> int:
        # a non-finite entry makes the sum non-finite (overflow aside)
        if not math.isfinite(float(value.sum())):
            raise FloatingPointError(f"op {op!r} produced non-finite values")
        self._nodes.append(_Node(op, value, args, aux))
        return len(self._nodes) - 1

    # ---- inputs ----

    def leaf(self, value) -> int:
        """Trainable input; backward() reports a gradient for it."""
        return self._push("leaf", as_tensor(value), ())

    def constant(self, value) -> int:
        """Non-trainable input; adjoints are not propagated into it."""
        return self._push("const", as_tensor(value), ())

    # ---- primitives ----

    def gather(self, table: int, rows) -> int:
        idx = np.asarray(rows, dtype=np.intp)
        tab = self.value(table)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("gather needs a non-empty 1-D index list")
        if idx.min() < 0 or idx.max() >= tab.shape[0]:
            raise IndexError("gather index out of range")
        return self._push("gather", tab[idx], (table,), idx)

    def matmul(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        if av.shape[-1] != bv.shape[0]:
            raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
        return self._push("matmul", av @ bv, (a, b))

    def add_bias(self, x: int, bias: int) -> int:
        xv, bv = self.value(x), self.value(bias)
        if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
            raise ValueError(f"add_bias shape mismatch: {xv.shape} + {bv.shape}")
        return self._push("add_bias", xv + bv, (x, bias))

    def mean_rows(self, x: int) -> int:
        xv = self.value(x)
        if xv.ndim != 2 or xv.shape[0] == 0:
            raise ValueError("mean_rows needs a non-empty 2-D input")
        return self._push("mean_rows", xv.mean(axis=0), (x,))

    def segment_mean(self, x: int, offsets) -> int:
        """Row s of the output is mean_rows over x[offsets[s]:offsets[s+1]]."""
        xv = self.value(x)
        off = np.asarray(offsets, dtype=np.intp)
        if xv.ndim != 2:
            raise ValueError("segment_mean needs a 2-D input")
        if off.ndim != 1 or off.size < 2 or off[0] != 0 or off[-1] != xv.shape[0]:
            raise ValueError("offsets must run from 0 to the row count")
        if np.any(np.diff(off) < 1):
            raise ValueError("every segment must be non-empty")
        value = np.stack([xv[a:b].mean(axis=0) for a, b in zip(off[:-1], off[1:])])
        return self._push("segment_mean", value, (x,), off)

    def tanh(self, x: int) -> int:
        return self._push("tanh", np.tanh(self.value(x)), (x,))

    def dot(self, u: int, v: int) -> int:
        uv, vv = self.value(u), self.value(v)
        if uv.shape != vv.shape or uv.ndim != 1:
            raise ValueError(f"dot needs equal-shape 1-D inputs, got {uv.shape} and {vv.shape}")
        return self._push("dot", np.asarray(np.dot(uv, vv)), (u, v))

    def mse(self, x: int, y: int) -> int:
        xv, yv = self.value(x), self.value(y)
        if xv.shape != yv.shape:
            raise ValueError(f"mse shape mismatch: {xv.shape} vs {yv.shape}")
        diff = xv - yv
        return self._push("mse", np.asarray(np.mean(diff * diff)), (x, y))

    def softmax_nll(self, scores: int, positive_index: int) -> int:
        sv = self.value(scores)
        if sv.ndim != 1 or sv.size < 1:
            raise ValueError("softmax_nll needs a non-empty 1-D score vector")
        if not 0 <= positive_index < sv.size:
            raise IndexError(f"positive_index {positive_index} out of range for {sv.size} scores")
        shifted = sv - sv.max()
        exps = np.exp(shifted)
        total = exps.sum()
        value = np.asarray(np.log(total) - shifted[positive_index])
        probs = exps / total
        return self._push("softmax_nll", value, (scores,), (positive_index, probs))

    def scalar_add(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        if av.shape != () or bv.shape != ():
            raise ValueError("scalar_add needs scalar nodes")
        return self._push("scalar_add", av + bv, (a, b))

    def scale(self, x: int, c: float) -> int:
        return self._push("scale", self.value(x) * c, (x,), float(c))

    def stack_scalars(self, items) -> int:
        ids = tuple(items)
        if not ids:
            raise ValueError("stack_scalars needs at least one node")
        vals = [self.value(i) for i in ids]
        if any(v.shape != () for v in vals):
            raise ValueError("stack_scalars needs scalar nodes")
        return self._push("stack", np.array(vals), ids)

    def stack_rows(self, items) -> int:
        """Stack equal-length 1-D nodes into a 2-D matrix."""
        ids = tuple(items)
        if not ids:
            raise ValueError("stack_rows needs at least one node")
        vals = [self.value(i) for i in ids]
        if any(v.ndim != 1 or v.shape != vals[0].shape for v in vals):
            raise ValueError("stack_rows needs equal-length 1-D nodes")
        return self._push("stack_rows", np.stack(vals), ids)


def backward(tape: Tape, loss_node: int) -> dict[int, Array]:
    """Gradient of a scalar loss wrt every leaf; the tape is left unchanged."""
    nodes = tape._nodes
    if not 0 <= loss_node < len(nodes):
        raise IndexError(f"unknown node {loss_node}")
    if nodes[loss_node].value.shape != ():
        raise ValueError("loss node must be scalar")

    adj: list[Array | None] = [None] * (loss_node + 1)
    adj[loss_node] = np.asarray(1.0)

    def accum(nid: int, grad: Array) -> None:
        if nodes[nid].op == "const":
            return
        if adj[nid] is None:
            adj[nid] = np.array(grad)  # own the buffer; grad may alias a parent adjoint
        else:
            adj[nid] += grad

    for nid in range(loss_node, -1, -1):
        g = adj[nid]
        if g is None:
            continue
        node = nodes[nid]
        op, args = node.op, node.args
        if op in ("leaf", "const"):
            continue
        elif op == "gather":
            (table,) = args
            if nodes[table].op != "const":
                if adj[table] is None:
                    adj[table] = np.zeros_like(nodes[table].value)
                np.add.at(adj[table], node.aux, g)
        elif op == "matmul":
            a, b = args
            av, bv = nodes[a].value, nodes[b].value
            if av.ndim == 1 and bv.ndim == 2:
                accum(a, bv @ g)
                accum(b, np.outer(av, g))
            elif av.ndim == 2 and bv.ndim == 1:
                accum(a, np.outer(g, bv))
                accum(b, av.T @ g)
            else:
                accum(a, g @ bv.T)
                accum(b, av.T @ g)
        elif op == "add_bias":
            x, bias = args
            accum(x, g)
            accum(bias, g if g.ndim == 1 else g.sum(axis=0))
        elif op == "mean_rows":
            (x,) = args
            m = nodes[x].value.shape[0]
            accum(x, np.broadcast_to(g / m, nodes[x].value.shape))
        elif op == "segment_mean":
            (x,) = args
            if nodes[x].op != "const":
                off = node.aux
                if adj[x] is None:
                    adj[x] = np.zeros_like(nodes[x].value)
                target = adj[x]
                for s, (a, b) in enumerate(zip(off[:-1], off[1:])):
                    target[a:b] += g[s] / (b - a)
        elif op == "tanh":
            (x,) = args
            accum(x, g * (1.0 - node.value * node.value))
        elif op == "dot":
            u, v = args
            accum(u, g * nodes[v].value)
            accum(v, g * nodes[u].value)
        elif op == "mse":
            x, y = args
            d = nodes[x].value - nodes[y].value
            coeff = 2.0 * g / d.size
            accum(x, coeff * d)
            accum(y, -coeff * d)
        elif op == "softmax_nll":
            (scores,) = args
            pos, probs = node.aux
            gs = probs.copy()
            gs[pos] -= 1.0
            accum(scores, g * gs)
        elif op == "scalar_add":
            a, b = args
            accum(a, g)
            accum(b, g)
        elif op == "scale":
            (x,) = args
            accum(x, g * node.aux)
        elif op == "stack":
            for i, item in enumerate(args):
                accum(item, np.asarray(g[i]))
        elif op == "stack_rows":
            for i, item in enumerate(args):
                accum(item, g[i])
        else:  # pragma: no cover
            raise ValueError(f"unknown op {op!r}")

    grads: dict[int, Array] = {}
    for nid in range(len(nodes)):
        if nodes[nid].op == "leaf":
            g = adj[nid] if nid <= loss_node and adj[nid] is not None else None
            grads[nid] = g if g is not None else np.zeros_like(nodes[nid].value)
    return grads


@dataclass
class AdamState:
    """Adam moments and step counter, keyed like the parameter dict."""

    m: dict[str, Array]
    v: dict[str, Array]
    step: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Array], learning_rate: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: dict[str, Array], grads: dict[str, Array],
              state: AdamState) -> tuple[dict[str, Array], AdamState]:
    """One Adam update with bias correction; returns fresh parameter arrays."""
    for key, p in params.items():
        if grads[key].shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {key!r}: "
                             f"{grads[key].shape} vs {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out: dict[str, Array] = {}
    for key, p in params.items():
        g = grads[key]
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        np.sqrt(v_hat, out=v_hat)
        v_hat += state.eps
        m_hat /= v_hat
        m_hat *= state.learning_rate
        out[key] = p - m_hat
    return out, state
