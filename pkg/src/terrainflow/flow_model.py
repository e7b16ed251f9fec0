"""Log-flow approximators for (state, action) edges.

``FlowParams`` is the attention encoder-decoder: point tokens (x, y, kind,
normalized cardinality) plus a learned empty-set token go through two
self-attention + feed-forward blocks; an embedded action then cross-attends
to the encoded set, passes a feed-forward block and a linear head. Both
blocks use residual connections, GELU (exact erf form), no normalization
layers and no positional signal, so the output is invariant to the order of
the points.

``TabularFlow`` stores one log-flow per (state, action) of an enumerable
configuration and serves as an exact oracle.

Both expose the same duck-typed interface used by the trainer:

* ``log_flows(state, ids)``: raw (unclamped) log-flows of AddPoint ids.
* ``policy_log_flows(state)``: log-flows of every action id on the grid.
* ``value_and_grad(queries, closure)``: reverse-mode gradient of a scalar
  built from ``log_flows`` outputs; see :func:`gradients`.
* ``arrays``: name -> ndarray of trainable parameters, updated in place.
"""

from __future__ import annotations

import json
import math
import struct
from collections import defaultdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .mdp import (
    GRID,
    MAX_POINTS,
    AddPoint,
    State,
    action_id,
    action_vectors,
    encode_state,
    enumerate_states,
    feasible_add_ids,
    num_actions,
)

D_MODEL = 128
N_HEADS = 4
N_BLOCKS = 2
POINT_DIM = 4
ACTION_DIM = 3

CHECKPOINT_MAGIC = b"TFCK"
CHECKPOINT_VERSION = 1

# Rough cap on token rows per batched chunk; bounds peak memory of the caches.
_CHUNK_ROWS = 6144
_BLOCK_ROWS = 16_000

Query = tuple[State, np.ndarray]
LossClosure = Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]]


class FlowContractError(ValueError):
    pass


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")]


def param_shapes(d: int = D_MODEL) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "point_embed.W": (POINT_DIM, d),
        "point_embed.b": (d,),
        "empty_token": (d,),
    }
    for i in range(N_BLOCKS):
        for name in _attn_names(f"enc{i}.attn"):
            shapes[name] = (d, d) if name.rsplit(".", 1)[1].startswith("W") else (d,)
        shapes[f"enc{i}.ff.W"] = (d, d)
        shapes[f"enc{i}.ff.b"] = (d,)
    shapes["action_embed.W"] = (ACTION_DIM, d)
    shapes["action_embed.b"] = (d,)
    for name in _attn_names("dec.attn"):
        shapes[name] = (d, d) if name.rsplit(".", 1)[1].startswith("W") else (d,)
    shapes["dec.ff.W"] = (d, d)
    shapes["dec.ff.b"] = (d,)
    shapes["head.W"] = (d,)
    shapes["head.b"] = ()
    return shapes


# ---------------------------------------------------------------------------
# layers


def gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact GELU, ``x * Phi(x)``; also returns ``Phi(x)`` for the backward pass."""
    cdf = ndtr(x)
    return x * cdf, cdf


def gelu_grad(dy: np.ndarray, x: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return dy * (cdf + x * pdf)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def _linear_grad(grads: dict, wname: str, bname: str, x: np.ndarray, dy: np.ndarray) -> None:
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads[wname] += x2.T @ dy2
    grads[bname] += dy2.sum(axis=0)


def mha_forward(p: dict, prefix: str, xq: np.ndarray, xkv: np.ndarray, heads: int = N_HEADS):
    """Multi-head scaled dot-product attention over the last two axes."""
    q = xq @ p[f"{prefix}.Wq"] + p[f"{prefix}.bq"]
    k = xkv @ p[f"{prefix}.Wk"] + p[f"{prefix}.bk"]
    v = xkv @ p[f"{prefix}.Wv"] + p[f"{prefix}.bv"]
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    attn = softmax((qh @ kh.swapaxes(-1, -2)) * scale)
    merged = _merge_heads(attn @ vh)
    out = merged @ p[f"{prefix}.Wo"] + p[f"{prefix}.bo"]
    return out, (xq, xkv, qh, kh, vh, attn, merged, scale)


def mha_backward(p: dict, grads: dict, prefix: str, dout: np.ndarray, cache):
    xq, xkv, qh, kh, vh, attn, merged, scale = cache
    heads = qh.shape[-3]
    _linear_grad(grads, f"{prefix}.Wo", f"{prefix}.bo", merged, dout)
    d_o = _split_heads(dout @ p[f"{prefix}.Wo"].T, heads)
    d_attn = d_o @ vh.swapaxes(-1, -2)
    d_vh = attn.swapaxes(-1, -2) @ d_o
    d_s = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True)) * scale
    d_q = _merge_heads(d_s @ kh)
    d_k = _merge_heads(d_s.swapaxes(-1, -2) @ qh)
    d_v = _merge_heads(d_vh)
    _linear_grad(grads, f"{prefix}.Wq", f"{prefix}.bq", xq, d_q)
    _linear_grad(grads, f"{prefix}.Wk", f"{prefix}.bk", xkv, d_k)
    _linear_grad(grads, f"{prefix}.Wv", f"{prefix}.bv", xkv, d_v)
    dxq = d_q @ p[f"{prefix}.Wq"].T
    dxkv = d_k @ p[f"{prefix}.Wk"].T + d_v @ p[f"{prefix}.Wv"].T
    return dxq, dxkv


def _ff_forward(p: dict, prefix: str, x: np.ndarray):
    pre = x @ p[f"{prefix}.W"] + p[f"{prefix}.b"]
    act, cdf = gelu(pre)
    return x + act, (x, pre, cdf)


def _ff_backward(p: dict, grads: dict, prefix: str, dout: np.ndarray, cache) -> np.ndarray:
    x, pre, cdf = cache
    dpre = gelu_grad(dout, pre, cdf)
    _linear_grad(grads, f"{prefix}.W", f"{prefix}.b", x, dpre)
    return dout + dpre @ p[f"{prefix}.W"].T


# ---------------------------------------------------------------------------
# encoder / decoder


def encode(p: dict, tokens: np.ndarray):
    """``tokens (B, T, 4)`` -> encoded set ``(B, T + 1, D)``; slot 0 is the empty-set token."""
    b = tokens.shape[0]
    d = p["empty_token"].shape[0]
    empty = np.broadcast_to(p["empty_token"], (b, 1, d))
    embedded = tokens @ p["point_embed.W"] + p["point_embed.b"]
    x = np.concatenate([empty, embedded], axis=1)
    caches = []
    for i in range(N_BLOCKS):
        att, c_att = mha_forward(p, f"enc{i}.attn", x, x)
        x1 = x + att
        x, c_ff = _ff_forward(p, f"enc{i}.ff", x1)
        caches.append((c_att, c_ff))
    return x, (tokens, caches)


def encode_backward(p: dict, grads: dict, d_enc: np.ndarray, cache) -> None:
    tokens, caches = cache
    dx = d_enc
    for i in reversed(range(N_BLOCKS)):
        c_att, c_ff = caches[i]
        dx1 = _ff_backward(p, grads, f"enc{i}.ff", dx, c_ff)
        dxq, dxkv = mha_backward(p, grads, f"enc{i}.attn", dx1, c_att)
        dx = dx1 + dxq + dxkv
    grads["empty_token"] += dx[:, 0, :].sum(axis=0)
    _linear_grad(grads, "point_embed.W", "point_embed.b", tokens, dx[:, 1:, :])


def decode(p: dict, enc: np.ndarray, actions: np.ndarray, output_bias: float):
    """``actions (B, K, 3)`` against ``enc (B, N, D)`` -> log-flows ``(B, K)``."""
    e = actions @ p["action_embed.W"] + p["action_embed.b"]
    att, c_att = mha_forward(p, "dec.attn", e, enc)
    y = e + att
    z, c_ff = _ff_forward(p, "dec.ff", y)
    out = z @ p["head.W"] + p["head.b"] + output_bias
    return out, (actions, c_att, c_ff, z)


def decode_backward(p: dict, grads: dict, dout: np.ndarray, cache) -> np.ndarray:
    actions, c_att, c_ff, z = cache
    grads["head.W"] += np.einsum("bk,bkd->d", dout, z)
    grads["head.b"] += dout.sum()
    dz = dout[..., None] * p["head.W"]
    dy = _ff_backward(p, grads, "dec.ff", dz, c_ff)
    dxq, d_enc = mha_backward(p, grads, "dec.attn", dy, c_att)
    de = dy + dxq
    _linear_grad(grads, "action_embed.W", "action_embed.b", actions, de)
    return d_enc


# ---------------------------------------------------------------------------
# parameters


class FlowParams:
    """Parameters of the attention log-flow network plus a constant output bias.

    ``version`` increases with every in-place update so derived caches (the
    precomputed action queries used while sampling) know when to refresh.
    """

    def __init__(self, arrays: dict[str, np.ndarray], output_bias: float = 0.0):
        expected = param_shapes(arrays["empty_token"].shape[0])
        if set(arrays) != set(expected):
            raise ValueError(f"parameter names mismatch: {sorted(set(arrays) ^ set(expected))}")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {arrays[name].shape}, expected {shape}")
        self.arrays = {name: np.array(arrays[name], dtype=np.float64) for name in expected}
        self.output_bias = float(output_bias)
        self.version = 0
        self._action_cache: tuple | None = None

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> FlowParams:
        return FlowParams({k: v.copy() for k, v in self.arrays.items()}, self.output_bias)

    def bump(self) -> None:
        self.version += 1
        self._action_cache = None

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.arrays])

    # -- forward -----------------------------------------------------------

    def encode_states(self, states: Sequence[State]):
        tokens = np.stack([encode_state(s) for s in states]) if states[0].card else np.zeros((len(states), 0, 4))
        return encode(self.arrays, tokens)

    def log_flows(self, state: State, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        enc, _ = self.encode_states([state])
        out, _ = decode(self.arrays, enc, action_vectors(ids, state.grid)[None], self.output_bias)
        return out[0]

    def _all_actions(self, grid: int):
        if self._action_cache is None or self._action_cache[0] != grid:
            p = self.arrays
            vecs = action_vectors(np.arange(num_actions(grid)), grid)
            emb = vecs @ p["action_embed.W"] + p["action_embed.b"]
            query = emb @ p["dec.attn.Wq"] + p["dec.attn.bq"]
            n, d = query.shape
            # Transposed (features x actions) layout: reductions run along the long axis.
            query_t = np.ascontiguousarray(query.T.reshape(N_HEADS, d // N_HEADS, n))
            emb_t = np.ascontiguousarray(emb.T)
            self._action_cache = (grid, emb_t, query_t)
        return self._action_cache[1:]

    def policy_log_flows(self, state: State) -> np.ndarray:
        """Log-flows for every action id of the grid (occupied cells included).

        Same math as :func:`decode`, with the action-only terms precomputed
        and everything laid out features-by-actions.
        """
        p = self.arrays
        emb_t, query_t = self._all_actions(state.grid)
        enc, _ = self.encode_states([state])
        enc = enc[0]
        heads, dh, n = query_t.shape
        k = (enc @ p["dec.attn.Wk"] + p["dec.attn.bk"]).reshape(-1, heads, dh).transpose(1, 0, 2)
        v_t = (enc @ p["dec.attn.Wv"] + p["dec.attn.bv"]).reshape(-1, heads, dh).transpose(1, 2, 0)
        scores = k @ query_t
        scores *= 1.0 / math.sqrt(dh)
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        o = v_t @ scores
        o /= scores.sum(axis=1, keepdims=True)
        y_t = p["dec.attn.Wo"].T @ o.reshape(heads * dh, n)
        y_t += emb_t
        y_t += p["dec.attn.bo"][:, None]
        pre = p["dec.ff.W"].T @ y_t
        pre += p["dec.ff.b"][:, None]
        pre *= ndtr(pre)
        y_t += pre
        return p["head.W"] @ y_t + (p["head.b"] + self.output_bias)

    # -- reverse mode ------------------------------------------------------

    def _cast(self, dtype) -> dict[str, np.ndarray]:
        if np.dtype(dtype) == np.float64:
            return self.arrays
        return {k: v.astype(dtype) for k, v in self.arrays.items()}

    def value_and_grad(self, queries: Sequence[Query], closure: LossClosure, dtype=np.float64):
        """Loss and parameter gradient of ``closure`` applied to the query outputs.

        ``closure(outputs) -> (loss, d_loss/d_outputs)`` where ``outputs[i]`` is
        ``log_flows(*queries[i])``. The forward pass runs twice: once without
        caches to feed the closure, then chunk by chunk with caches right
        before each chunk's backward pass, which keeps memory bounded.
        """
        p = self._cast(dtype)
        chunks = []
        for (card, k), idx in sorted(_group_queries(queries, range(len(queries))).items()):
            step = max(1, _CHUNK_ROWS // (card + 1 + k))
            chunks.extend(idx[j : j + step] for j in range(0, len(idx), step))

        outputs: list[np.ndarray] = [None] * len(queries)  # type: ignore[list-item]
        for chunk in chunks:
            out, _ = self._forward_chunk(p, queries, chunk)
            for j, qi in enumerate(chunk):
                outputs[qi] = out[j].astype(np.float64)
        loss, d_outputs = closure(outputs)

        grads = {k: np.zeros_like(v) for k, v in p.items()}
        for chunk in chunks:
            dout = np.stack([np.asarray(d_outputs[qi], dtype=dtype) for qi in chunk])
            if not np.any(dout):
                continue
            _, cache = self._forward_chunk(p, queries, chunk)
            self._backward_chunk(p, grads, dout, cache)
        return loss, {k: v.astype(np.float64) for k, v in grads.items()}

    def blockwise_value_and_grad(self, blocks: Sequence[Sequence[Query]], closure, dtype=np.float64, max_rows: int = _BLOCK_ROWS):
        """Sum over independent blocks of ``closure(b, outputs_b) -> (value, d_outputs_b)``.

        Each block's value depends on its own queries only, so blocks are
        processed chunk by chunk with a single cached forward pass each.
        Returns ``(values, grads)`` with one value per block.
        """
        p = self._cast(dtype)
        order = sorted(range(len(blocks)), key=lambda b: [(q[0].card, len(q[1])) for q in blocks[b]])
        chunks, current, rows = [], [], 0
        for b in order:
            cost = sum(_cache_rows(q[0].card, len(q[1])) for q in blocks[b])
            if current and rows + cost > max_rows:
                chunks.append(current)
                current, rows = [], 0
            current.append(b)
            rows += cost
        if current:
            chunks.append(current)

        values = [0.0] * len(blocks)
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        for chunk in chunks:
            flat = [q for b in chunk for q in blocks[b]]
            outputs: list[np.ndarray] = [None] * len(flat)  # type: ignore[list-item]
            passes = []
            for idx in _group_queries(flat, range(len(flat))).values():
                out, cache = self._forward_chunk(p, flat, idx)
                for j, qi in enumerate(idx):
                    outputs[qi] = out[j].astype(np.float64)
                passes.append((idx, cache))
            d_flat: list[np.ndarray] = []
            pos = 0
            for b in chunk:
                n = len(blocks[b])
                values[b], d_block = closure(b, outputs[pos : pos + n])
                d_flat.extend(d_block)
                pos += n
            for idx, cache in passes:
                dout = np.stack([np.asarray(d_flat[qi], dtype=dtype) for qi in idx])
                if np.any(dout):
                    self._backward_chunk(p, grads, dout, cache)
        return values, {k: v.astype(np.float64) for k, v in grads.items()}

    def _forward_chunk(self, p: dict, queries: Sequence[Query], chunk: Sequence[int]):
        states = [queries[i][0] for i in chunk]
        dtype = p["head.W"].dtype
        acts = np.stack([action_vectors(queries[i][1], states[0].grid) for i in chunk]).astype(dtype)
        if states[0].card:
            tokens = np.stack([encode_state(s) for s in states]).astype(dtype)
        else:
            tokens = np.zeros((len(states), 0, 4), dtype=dtype)
        enc, enc_cache = encode(p, tokens)
        out, dec_cache = decode(p, enc, acts, self.output_bias)
        return out, (enc_cache, dec_cache)

    def _backward_chunk(self, p: dict, grads: dict, dout: np.ndarray, cache) -> None:
        enc_cache, dec_cache = cache
        d_enc = decode_backward(p, grads, dout, dec_cache)
        encode_backward(p, grads, d_enc, enc_cache)


def _cache_rows(card: int, k: int) -> int:
    """Rough cached-activation footprint of one query, in units of D-wide rows."""
    n = card + 1
    return n + k + n * (n + k) // 10


def _group_queries(queries: Sequence[Query], indices) -> dict[tuple[int, int], list[int]]:
    groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i in indices:
        s, ids = queries[i]
        groups[(s.card, len(ids))].append(i)
    return groups


def init_params(seed: int, output_bias: float = 0.0, d_model: int = D_MODEL) -> FlowParams:
    """Affine weights ~ U(+-1/sqrt(fan_in)), zero offsets, zero empty-set token."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(d_model).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("W"):
            fan_in = shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return FlowParams(arrays, output_bias)


def flow_log(params, s: State, a) -> float:
    """Log-flow of one AddPoint edge; termination flows come from rewards, not the model."""
    if not isinstance(a, AddPoint):
        raise FlowContractError("flow_log is defined for AddPoint actions only")
    return float(params.log_flows(s, np.array([action_id(a.point, s.grid)]))[0])


def flow_log_batch(params, s: State, actions: Sequence) -> np.ndarray:
    ids = []
    for a in actions:
        if not isinstance(a, AddPoint):
            raise FlowContractError("flow_log_batch is defined for AddPoint actions only")
        ids.append(action_id(a.point, s.grid))
    return params.log_flows(s, np.array(ids, dtype=np.int64))


def gradients(params, queries: Sequence[Query], loss_closure: LossClosure):
    """Reverse-mode gradient of a scalar built from log-flow outputs.

    Returns ``(loss, grads)`` with ``grads`` shaped like ``params.arrays``.
    """
    return params.value_and_grad(queries, loss_closure)


# ---------------------------------------------------------------------------
# tabular oracle


class TabularFlow:
    """One trainable log-flow per (state, AddPoint id) of an enumerable configuration."""

    def __init__(self, index: dict[tuple[State, int], int], table: np.ndarray, output_bias: float = 0.0):
        self.index = index
        self.arrays = {"table": np.asarray(table, dtype=np.float64)}
        self.output_bias = float(output_bias)
        self.version = 0

    @classmethod
    def enumerate(cls, grid: int, max_points: int, init: float = 0.0, output_bias: float = 0.0) -> TabularFlow:
        index: dict[tuple[State, int], int] = {}
        for s in enumerate_states(grid, max_points):
            for aid in feasible_add_ids(s):
                index[(s, int(aid))] = len(index)
        return cls(index, np.full(len(index), float(init)), output_bias)

    def bump(self) -> None:
        self.version += 1

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {"table": np.zeros_like(self.arrays["table"])}

    def positions(self, state: State, ids: np.ndarray) -> np.ndarray:
        return np.array([self.index[(state, int(a))] for a in ids], dtype=np.int64)

    def get(self, state: State, aid: int) -> float:
        return float(self.arrays["table"][self.index[(state, int(aid))]])

    def set(self, state: State, aid: int, value: float) -> None:
        self.arrays["table"][self.index[(state, int(aid))]] = value
        self.bump()

    def log_flows(self, state: State, ids: np.ndarray) -> np.ndarray:
        return self.arrays["table"][self.positions(state, ids)] + self.output_bias

    def policy_log_flows(self, state: State) -> np.ndarray:
        out = np.full(num_actions(state.grid), -np.inf)
        ids = feasible_add_ids(state)
        if len(ids):
            out[ids] = self.log_flows(state, ids)
        return out

    def value_and_grad(self, queries: Sequence[Query], closure: LossClosure):
        pos = [self.positions(s, ids) for s, ids in queries]
        table = self.arrays["table"]
        outputs = [table[p] + self.output_bias for p in pos]
        loss, d_outputs = closure(outputs)
        grad = np.zeros_like(table)
        for p, d in zip(pos, d_outputs):
            np.add.at(grad, p, d)
        return loss, {"table": grad}

    def blockwise_value_and_grad(self, blocks: Sequence[Sequence[Query]], closure, dtype=np.float64):
        table = self.arrays["table"]
        values = []
        grad = np.zeros_like(table)
        for b, block in enumerate(blocks):
            pos = [self.positions(s, ids) for s, ids in block]
            value, d_outputs = closure(b, [table[p] + self.output_bias for p in pos])
            values.append(value)
            for p, d in zip(pos, d_outputs):
                np.add.at(grad, p, d)
        return values, {"table": grad}


def tabular_flow_log(table: TabularFlow, s: State, a) -> float:
    if not isinstance(a, AddPoint):
        raise FlowContractError("tabular_flow_log is defined for AddPoint actions only")
    return table.get(s, action_id(a.point, s.grid)) + table.output_bias


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: FlowParams, path: str | Path, meta: dict | None = None) -> None:
    """Versioned binary dump: header, JSON metadata, then named float64 tensors."""
    info = {"output_bias": params.output_bias, "d_model": params.arrays["empty_token"].shape[0]}
    info["meta"] = meta or {}
    blob = json.dumps(info, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, len(blob), len(params.arrays)), blob]
    for name, arr in params.arrays.items():
        raw = name.encode("ascii")
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[FlowParams, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version, meta_len, count = struct.unpack_from("<III", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    info = json.loads(data[off : off + meta_len].decode("utf-8"))
    off += meta_len
    arrays = {}
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", data, off)
        off += 3
        name = data[off : off + name_len].decode("ascii")
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return FlowParams(arrays, info["output_bias"]), info.get("meta", {})

