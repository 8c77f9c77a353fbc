"""Graph autoencoder forward pass and the classifier-head variant.

The backbone runs one message-passing round over the temporal graph:
per-point MLP encoding, per-edge message generation with shared weights,
multi-head attention aggregation of incoming messages, and a node update.
The autoencoder then concatenates each raw coordinate with the global
max-pooled feature and decodes new coordinates; the classifier variant
feeds the pooled feature to a linear head with softmax.

Everything differentiable is expressed through `pointveil.autodiff`, so
`gradients` returns exact reverse-mode derivatives under the documented
subgradient conventions: graph topology, attention stability shifts, and
nearest-neighbor matchings are constants; max pooling routes to the lowest
argmax row.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from pointveil import autodiff as ad
from pointveil.autodiff import Tensor
from pointveil.data import FrameGrid
from pointveil.graph import (MODE_SPATIAL_ALL, MODE_TEMPORAL, MODE_WITHIN_FRAME,
                             TemporalGraph, build_temporal_graph)
from pointveil.util import array_checksum, seeded_rng

PARAMS_MAGIC = b"IMCP"
PARAMS_VERSION = 1

LOSS_CHAMFER = "chamfer"
LOSS_GESTURE = "gesture"
LOSS_DEID = "deid"
LOSS_COMBINED = "combined"
LOSS_SELECTORS = (LOSS_CHAMFER, LOSS_GESTURE, LOSS_DEID, LOSS_COMBINED)

ATTN_SUM_TOL = 1e-6


class ConfigurationError(ValueError):
    """Raised when params/config/inputs do not fit together."""


@dataclass(frozen=True)
class ModelConfig:
    d_h: int = 64
    d_m: int = 64
    d_k: int = 16
    d_v: int = 16
    heads: int = 4
    d_z: int = 64
    k: int = 2
    seed: int = 0
    no_temporal_edges: bool = False
    no_temporal_knn: bool = False
    no_max_pool: bool = False
    decoder_node_feats: bool = False

    def __post_init__(self):
        for name in ("d_h", "d_m", "d_k", "d_v", "heads", "d_z", "k"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.d_z != self.heads * self.d_v:
            raise ConfigurationError(
                f"d_z ({self.d_z}) must equal heads*d_v ({self.heads * self.d_v})")
        if self.no_temporal_edges and self.no_temporal_knn:
            raise ConfigurationError(
                "no_temporal_edges and no_temporal_knn are mutually exclusive")

    @property
    def graph_mode(self) -> str:
        if self.no_temporal_edges:
            return MODE_WITHIN_FRAME
        if self.no_temporal_knn:
            return MODE_SPATIAL_ALL
        return MODE_TEMPORAL

    def decoder_in_dim(self) -> int:
        return 3 + (2 * self.d_h if self.decoder_node_feats else self.d_h)


# ---------------------------------------------------------------------------
# Parameters


class ModelParams:
    """Named tensors in a fixed canonical order (dict insertion order)."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = {name: np.asarray(arr) for name, arr in tensors.items()}

    def __iter__(self):
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.tensors:
            raise KeyError(name)
        self.tensors[name] = value

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def has_head(self) -> bool:
        return "head.w" in self.tensors

    @property
    def num_classes(self) -> int:
        if not self.has_head:
            raise ConfigurationError("parameters carry no classifier head")
        return self.tensors["head.w"].shape[1]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams({n: a.copy() for n, a in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({n: a.astype(dtype) for n, a in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams({n: np.zeros_like(a) for n, a in self.tensors.items()})

    def checksum(self) -> str:
        return array_checksum(self.tensors.items())

    def num_values(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def to_bytes(self) -> bytes:
        """Binary parameter block: versioned header, canonical tensor order,
        float32 payloads; write-read-write is byte stable."""
        out = bytearray()
        out += PARAMS_MAGIC
        out += struct.pack("<II", PARAMS_VERSION, len(self.tensors))
        for name, arr in self.tensors.items():
            encoded = name.encode("utf-8")
            out += struct.pack("<H", len(encoded))
            out += encoded
            out += struct.pack("<B", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        return bytes(out)

    def save(self, path: str) -> None:
        from pointveil.util import atomic_write_bytes
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str, dtype=np.float32) -> "ModelParams":
        with open(path, "rb") as fh:
            blob = fh.read()
        return cls.from_bytes(blob, dtype=dtype)

    @classmethod
    def from_bytes(cls, blob: bytes, dtype=np.float32) -> "ModelParams":
        if blob[:4] != PARAMS_MAGIC:
            raise ConfigurationError("not a parameter file (bad magic)")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != PARAMS_VERSION:
            raise ConfigurationError(f"unsupported parameter file version {version}")
        offset = 12
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            tensors[name] = arr.reshape(shape).astype(dtype)
        return cls(tensors)


def _layer_layout(cfg: ModelConfig, num_classes: int | None) -> list[tuple[str, tuple, str]]:
    d_h, d_m, d_k, d_v = cfg.d_h, cfg.d_m, cfg.d_k, cfg.d_v
    layout = [
        ("enc.w1", (3, d_h), "relu"),
        ("enc.b1", (d_h,), "bias"),
        ("enc.w2", (d_h, d_h), "relu"),
        ("enc.b2", (d_h,), "bias"),
        ("msg.w1", (2 * d_h, d_m), "relu"),
        ("msg.b1", (d_m,), "bias"),
        ("msg.w2", (d_m, d_m), "relu"),
        ("msg.b2", (d_m,), "bias"),
    ]
    for b in range(cfg.heads):
        layout += [
            (f"attn.q{b}", (d_h, d_k), "linear"),
            (f"attn.k{b}", (d_m, d_k), "linear"),
            (f"attn.v{b}", (d_m, d_v), "linear"),
        ]
    layout += [
        ("attn.out", (cfg.heads * d_v, cfg.d_z), "linear"),
        ("upd.w1", (d_h + cfg.d_z, d_h), "relu"),
        ("upd.b1", (d_h,), "bias"),
        ("upd.w2", (d_h, d_h), "relu"),
        ("upd.b2", (d_h,), "bias"),
    ]
    if num_classes is None:
        layout += [
            ("dec.w1", (cfg.decoder_in_dim(), d_h), "relu"),
            ("dec.b1", (d_h,), "bias"),
            ("dec.w2", (d_h, 3), "linear"),
            ("dec.b2", (3,), "bias"),
        ]
    else:
        layout += [
            ("head.w", (d_h, num_classes), "linear"),
            ("head.b", (num_classes,), "bias"),
        ]
    return layout


def _init_from_layout(layout, seed: int, tag: str, dtype) -> ModelParams:
    rng = seeded_rng(seed, "init", tag)
    tensors: dict[str, np.ndarray] = {}
    for name, shape, kind in layout:
        if kind == "bias":
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = shape[0]
        std = math.sqrt((2.0 if kind == "relu" else 1.0) / fan_in)
        tensors[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return ModelParams(tensors)


def init_autoencoder(cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    return _init_from_layout(_layer_layout(cfg, None), cfg.seed, "autoencoder", dtype)


def init_classifier(cfg: ModelConfig, num_classes: int, dtype=np.float32) -> ModelParams:
    if num_classes < 2:
        raise ConfigurationError("classifier needs at least 2 classes")
    return _init_from_layout(_layer_layout(cfg, num_classes), cfg.seed,
                             f"classifier{num_classes}", dtype)


def check_params_match(params: ModelParams, cfg: ModelConfig,
                       num_classes: int | None = None) -> None:
    expected = _layer_layout(cfg, num_classes)
    names = [n for n, _, _ in expected]
    if params.names != names:
        raise ConfigurationError(
            f"parameter names {params.names} do not match config layout {names}")
    for name, shape, _ in expected:
        if params[name].shape != shape:
            raise ConfigurationError(
                f"tensor {name} has shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# Edge plans and batches


@dataclass
class EdgePlans:
    """Index arrays plus cached scatter matrices for one stacked graph."""

    src: np.ndarray
    dst: np.ndarray
    n_nodes: int
    uniform: int | None
    src_scatter: object
    dst_scatter: object

    @classmethod
    def from_edges(cls, edges: np.ndarray, n_nodes: int, dtype) -> "EdgePlans":
        src = edges[:, 0].astype(np.int64)
        dst = edges[:, 1].astype(np.int64)
        uniform = None
        if len(dst) and len(dst) % n_nodes == 0:
            u = len(dst) // n_nodes
            if np.array_equal(dst, np.repeat(np.arange(n_nodes), u)):
                uniform = u
        src_scatter = ad.scatter_matrix(src, n_nodes, dtype=dtype)
        dst_scatter = None if uniform else ad.scatter_matrix(dst, n_nodes, dtype=dtype)
        return cls(src, dst, n_nodes, uniform, src_scatter, dst_scatter)


@dataclass
class GraphBatch:
    """A stack of same-shape grids flattened into one disjoint graph."""

    coords: np.ndarray        # (Nb, 3)
    plans: EdgePlans
    n_samples: int
    nodes_per_sample: int
    sample_ids: np.ndarray    # (Nb,)
    subjects: np.ndarray
    gestures: np.ndarray
    frames: int
    points_per_frame: int


def make_graph_batch(grids: list[FrameGrid], cfg: ModelConfig, dtype=np.float32,
                     edge_cache: list[np.ndarray] | None = None) -> GraphBatch:
    if not grids:
        raise ValueError("empty grid batch")
    f, p = grids[0].frames, grids[0].points_per_frame
    n = f * p
    coords = np.concatenate([g.node_coords() for g in grids]).astype(dtype)
    edge_blocks = []
    for i, g in enumerate(grids):
        if (g.frames, g.points_per_frame) != (f, p):
            raise ValueError("all grids in a batch must share F and P")
        edges = edge_cache[i] if edge_cache is not None else (
            build_temporal_graph(g, cfg.k, mode=cfg.graph_mode).edges)
        edge_blocks.append(edges.astype(np.int64) + i * n)
    all_edges = np.concatenate(edge_blocks) if edge_blocks else np.zeros((0, 2), np.int64)
    plans = EdgePlans.from_edges(all_edges, len(grids) * n, dtype)
    return GraphBatch(
        coords=coords,
        plans=plans,
        n_samples=len(grids),
        nodes_per_sample=n,
        sample_ids=np.repeat(np.arange(len(grids)), n),
        subjects=np.asarray([g.subject for g in grids], dtype=np.int64),
        gestures=np.asarray([g.gesture for g in grids], dtype=np.int64),
        frames=f,
        points_per_frame=p,
    )


def batch_from_coords(coords: np.ndarray, template: GraphBatch,
                      cfg: ModelConfig, dtype=np.float32) -> GraphBatch:
    """Rebuild topology over new coordinates that reuse a batch's layout."""
    f, p = template.frames, template.points_per_frame
    n = f * p
    cube = np.asarray(coords, dtype=np.float32).reshape(template.n_samples, f, p, 3)
    edge_blocks = []
    for i in range(template.n_samples):
        g = FrameGrid(cube[i], int(template.subjects[i]), int(template.gestures[i]))
        edges = build_temporal_graph(g, cfg.k, mode=cfg.graph_mode).edges
        edge_blocks.append(edges.astype(np.int64) + i * n)
    all_edges = np.concatenate(edge_blocks)
    plans = EdgePlans.from_edges(all_edges, template.n_samples * n, dtype)
    return GraphBatch(
        coords=np.asarray(coords, dtype=dtype),
        plans=plans,
        n_samples=template.n_samples,
        nodes_per_sample=n,
        sample_ids=template.sample_ids,
        subjects=template.subjects,
        gestures=template.gestures,
        frames=f,
        points_per_frame=p,
    )


# ---------------------------------------------------------------------------
# Tensor-level forward pieces


def _as_param_tensors(params: ModelParams, trainable: bool):
    """Trainable params become tape leaves; frozen ones stay raw arrays."""
    if trainable:
        return {name: Tensor(arr) for name, arr in params}
    return {name: arr for name, arr in params}


def _linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def _mlp2(x, pt, prefix: str, final_relu: bool = True):
    h = ad.relu(_linear(x, pt[f"{prefix}.w1"], pt[f"{prefix}.b1"]))
    h = _linear(h, pt[f"{prefix}.w2"], pt[f"{prefix}.b2"])
    return ad.relu(h) if final_relu else h


def _check_attention_sums(alpha: np.ndarray, plans: EdgePlans) -> None:
    cols = alpha.reshape(len(plans.dst), -1)
    if plans.uniform is not None:
        sums = cols.reshape(plans.n_nodes, plans.uniform, -1).sum(axis=1, dtype=np.float64)
        bad = np.abs(sums - 1.0) > ATTN_SUM_TOL
    else:
        sums = np.zeros((plans.n_nodes, cols.shape[1]), dtype=np.float64)
        np.add.at(sums, plans.dst, cols.astype(np.float64))
        deg = np.bincount(plans.dst, minlength=plans.n_nodes)
        bad = (deg > 0)[:, None] & (np.abs(sums - 1.0) > ATTN_SUM_TOL)
    if np.any(bad):
        worst = float(np.max(np.abs(sums[np.asarray(bad)] - 1.0)))
        raise AssertionError(
            f"attention weights failed to normalize: max |sum-1| = {worst:.3e}")


def _attention(h: Tensor, m: Tensor, plans: EdgePlans, pt, cfg: ModelConfig) -> Tensor:
    """All heads evaluated in one fused pass over the edge messages."""
    scale = 1.0 / math.sqrt(cfg.d_k)
    n_edges = len(plans.dst)
    b, d_k, d_v = cfg.heads, cfg.d_k, cfg.d_v
    w_q = ad.concat([pt[f"attn.q{i}"] for i in range(b)], axis=1)
    w_k = ad.concat([pt[f"attn.k{i}"] for i in range(b)], axis=1)
    w_v = ad.concat([pt[f"attn.v{i}"] for i in range(b)], axis=1)
    q_edge = ad.gather(ad.matmul(h, w_q), plans.dst,
                       scatter=plans.dst_scatter, uniform=plans.uniform)
    keys = ad.matmul(m, w_k)      # (E, B*d_k)
    vals = ad.matmul(m, w_v)      # (E, B*d_v)
    qk = ad.reshape(ad.mul(q_edge, keys), (n_edges * b, d_k))
    logits = ad.reshape(ad.mul(ad.sum_axis(qk, axis=1), scale), (n_edges, b))
    alpha = ad.segment_softmax(logits, plans.dst, plans.n_nodes,
                               scatter=plans.dst_scatter, uniform=plans.uniform)
    _check_attention_sums(alpha.data, plans)
    weighted = ad.reshape(
        ad.mul(ad.reshape(vals, (n_edges * b, d_v)),
               ad.reshape(alpha, (n_edges * b, 1))),
        (n_edges, b * d_v))
    z = ad.segment_sum(weighted, plans.dst, plans.n_nodes,
                       scatter=plans.dst_scatter, uniform=plans.uniform)
    return ad.matmul(z, pt["attn.out"])


def _backbone(coords_t, plans: EdgePlans, pt, cfg: ModelConfig):
    """Returns (initial features h, updated features h').

    The first message layer acts on h_i and (h_j - h_i); splitting its
    weight rows lets both halves run as node-level matmuls, leaving only
    gathers and an add at edge granularity.
    """
    h = _mlp2(coords_t, pt, "enc")
    w1 = pt["msg.w1"]
    w_self = ad.slice_rows(w1, 0, cfg.d_h)
    w_diff = ad.slice_rows(w1, cfg.d_h, 2 * cfg.d_h)
    a_nodes = ad.matmul(h, ad.sub(w_self, w_diff))   # h_i @ (W_self - W_diff)
    c_nodes = ad.matmul(h, w_diff)                   # h @ W_diff
    pre = ad.add(
        ad.add(ad.gather(a_nodes, plans.dst, scatter=plans.dst_scatter,
                         uniform=plans.uniform),
               ad.gather(c_nodes, plans.src, scatter=plans.src_scatter)),
        pt["msg.b1"])
    m = ad.relu(_linear(ad.relu(pre), pt["msg.w2"], pt["msg.b2"]))
    z = _attention(h, m, plans, pt, cfg)
    h_upd = _mlp2(ad.concat([h, z], axis=1), pt, "upd")
    return h, h_upd


def _autoencoder_output(batch: GraphBatch, pt, cfg: ModelConfig) -> Tensor:
    coords_t = Tensor(batch.coords)
    _, h_upd = _backbone(coords_t, batch.plans, pt, cfg)
    parts = [coords_t]
    if cfg.no_max_pool:
        parts.append(h_upd)
    else:
        pooled = ad.group_max(h_upd, batch.n_samples)
        per_node = ad.gather(pooled, batch.sample_ids, uniform=batch.nodes_per_sample)
        parts.append(per_node)
        if cfg.decoder_node_feats:
            parts.append(h_upd)
    return _mlp2(ad.concat(parts, axis=1), pt, "dec", final_relu=False)


def _classifier_logits(batch: GraphBatch, coords_t: Tensor, pt, cfg: ModelConfig) -> Tensor:
    _, h_upd = _backbone(coords_t, batch.plans, pt, cfg)
    pooled = ad.group_max(h_upd, batch.n_samples)
    return _linear(pooled, pt["head.w"], pt["head.b"])


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _nll_from_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true classes, tape-differentiable."""
    n = logits.data.shape[0]
    shift = logits.data.max(axis=1, keepdims=True)
    shifted = ad.sub(logits, shift)
    lse = ad.log(ad.sum_axis(ad.exp(shifted), axis=1, keepdims=True))
    logp = ad.sub(shifted, lse)
    chosen = ad.pick(logp, np.arange(n), np.asarray(labels))
    return ad.mul(ad.sum_all(chosen), -1.0 / n)


def _chamfer_loss(out: Tensor, target: np.ndarray, batch: GraphBatch) -> Tensor:
    """Mean per-sample symmetric squared-NN distance sum.

    Nearest-neighbor matchings come from the current values and are held
    fixed in the tape, which is the exact subgradient of the min.
    """
    n = batch.nodes_per_sample
    fwd_idx = np.empty(out.data.shape[0], dtype=np.int64)
    bwd_idx = np.empty(out.data.shape[0], dtype=np.int64)
    for s in range(batch.n_samples):
        sl = slice(s * n, (s + 1) * n)
        o = np.asarray(out.data[sl], dtype=np.float64)
        t = np.asarray(target[sl], dtype=np.float64)
        _, j = cKDTree(t).query(o)
        fwd_idx[sl] = j + s * n
        _, j = cKDTree(o).query(t)
        bwd_idx[sl] = j + s * n
    d1 = ad.sub(out, target[fwd_idx])
    term1 = ad.sum_all(ad.mul(d1, d1))
    matched = ad.gather(out, bwd_idx, scatter=ad.scatter_matrix(
        bwd_idx, out.data.shape[0], dtype=out.data.dtype))
    d2 = ad.sub(matched, target)
    term2 = ad.sum_all(ad.mul(d2, d2))
    return ad.mul(ad.add(term1, term2), 1.0 / batch.n_samples)


# ---------------------------------------------------------------------------
# Public forward operations


def encode_nodes(coords: np.ndarray, params: ModelParams) -> np.ndarray:
    """Per-node feature embedding of raw coordinates."""
    return _mlp2(Tensor(np.asarray(coords)), _as_param_tensors(params, False), "enc").data


def generate_messages(graph: TemporalGraph, h: np.ndarray, params: ModelParams) -> np.ndarray:
    """One message per directed edge, in edge order."""
    pt = _as_param_tensors(params, False)
    src, dst = graph.edges[:, 0], graph.edges[:, 1]
    h_src, h_dst = h[src], h[dst]
    m_in = Tensor(np.concatenate([h_dst, h_src - h_dst], axis=1))
    return _mlp2(m_in, pt, "msg").data


def aggregate_attention(graph: TemporalGraph, h: np.ndarray, m: np.ndarray,
                        params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Multi-head attention pooling of incoming messages per node.

    Nodes with no incoming edge receive a zero vector.
    """
    pt = _as_param_tensors(params, False)
    plans = EdgePlans.from_edges(graph.edges, graph.n_nodes, np.asarray(h).dtype)
    return _attention(Tensor(np.asarray(h)), Tensor(np.asarray(m)), plans, pt, cfg).data


def update_nodes(h: np.ndarray, z: np.ndarray, params: ModelParams) -> np.ndarray:
    pt = _as_param_tensors(params, False)
    return _mlp2(Tensor(np.concatenate([h, z], axis=1)), pt, "upd").data


def global_max_pool(h_upd: np.ndarray) -> np.ndarray:
    h_upd = np.asarray(h_upd)
    if h_upd.shape[0] < 1:
        raise ValueError("max pool needs at least one node")
    return h_upd.max(axis=0)


def decode(coords: np.ndarray, h_max: np.ndarray, params: ModelParams) -> np.ndarray:
    """Per-point decoding of (coordinate, global feature) pairs."""
    coords = np.asarray(coords)
    pt = _as_param_tensors(params, False)
    tiled = np.broadcast_to(h_max, (coords.shape[0], h_max.shape[0]))
    x = Tensor(np.concatenate([coords, tiled], axis=1))
    return _mlp2(x, pt, "dec", final_relu=False).data


def autoencoder_forward(grid: FrameGrid, params: ModelParams, cfg: ModelConfig) -> FrameGrid:
    """Full reconstruction pass; labels and frame structure carry through."""
    out = autoencode_batch([grid], params, cfg)
    return out[0]


def autoencode_batch(grids: list[FrameGrid], params: ModelParams, cfg: ModelConfig,
                     edge_cache: list[np.ndarray] | None = None) -> list[FrameGrid]:
    check_params_match(params, cfg, None)
    batch = make_graph_batch(grids, cfg, dtype=params.dtype, edge_cache=edge_cache)
    pt = _as_param_tensors(params, False)
    out = _autoencoder_output(batch, pt, cfg).data
    cube = out.reshape(len(grids), grids[0].frames, grids[0].points_per_frame, 3)
    return [FrameGrid(cube[i].astype(np.float32), g.subject, g.gesture, seq_id=g.seq_id)
            for i, g in enumerate(grids)]


def classify(grid: FrameGrid, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Class probability vector for one grid."""
    return classify_batch([grid], params, cfg)[0]


def classify_batch(grids: list[FrameGrid], params: ModelParams, cfg: ModelConfig,
                   edge_cache: list[np.ndarray] | None = None) -> np.ndarray:
    if not params.has_head:
        raise ConfigurationError("parameters carry no classifier head")
    check_params_match(params, cfg, params.num_classes)
    batch = make_graph_batch(grids, cfg, dtype=params.dtype, edge_cache=edge_cache)
    pt = _as_param_tensors(params, False)
    logits = _classifier_logits(batch, Tensor(batch.coords), pt, cfg)
    return _softmax_rows(logits.data)


# ---------------------------------------------------------------------------
# Gradients


def _grads_from_tape(pt: dict, params: ModelParams) -> ModelParams:
    grads = {}
    for name, _ in params:
        t = pt[name]
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return ModelParams(grads)


def classifier_gradients(grids: list[FrameGrid], labels: np.ndarray, params: ModelParams,
                         cfg: ModelConfig, edge_cache: list[np.ndarray] | None = None
                         ) -> tuple[float, ModelParams]:
    """Mean NLL of the head on the given grids plus its parameter gradients."""
    batch = make_graph_batch(grids, cfg, dtype=params.dtype, edge_cache=edge_cache)
    pt = _as_param_tensors(params, True)
    logits = _classifier_logits(batch, Tensor(batch.coords), pt, cfg)
    loss = _nll_from_logits(logits, labels)
    loss.backward()
    return float(loss.data), _grads_from_tape(pt, params)


def gradients(grids: list[FrameGrid], params: ModelParams, cfg: ModelConfig,
              loss_selector: str, *,
              weights=None, gate_accuracy: float | None = None,
              g_params: ModelParams | None = None, g_cfg: ModelConfig | None = None,
              u_params: ModelParams | None = None, u_cfg: ModelConfig | None = None,
              edge_cache: list[np.ndarray] | None = None,
              frozen_output_batches: dict | None = None,
              compute_grads: bool = True,
              ) -> tuple[float, ModelParams | None, dict]:
    """Loss value and exact autoencoder-parameter gradients for one batch.

    `frozen_output_batches` optionally pins the graph topology that the
    frozen classifiers see (keys "g"/"u"); when absent the topology is
    rebuilt from the current reconstruction, matching training behavior.
    Returns (loss, grads, components) where components holds the scalar
    pieces that were actually evaluated.
    """
    if loss_selector not in LOSS_SELECTORS:
        raise ConfigurationError(f"unknown loss selector {loss_selector!r}")
    if loss_selector == LOSS_COMBINED and (weights is None or gate_accuracy is None):
        raise ConfigurationError("combined loss needs weights and gate accuracy")
    batch = make_graph_batch(grids, cfg, dtype=params.dtype, edge_cache=edge_cache)
    pt = _as_param_tensors(params, True)
    out = _autoencoder_output(batch, pt, cfg)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite autoencoder output in forward pass")
    components: dict[str, float] = {}
    frozen = frozen_output_batches or {}
    rebuilt: dict[tuple, GraphBatch] = {}

    def classifier_nll(cls_params, cls_cfg, labels, key):
        cls_batch = frozen.get(key)
        if cls_batch is None:
            topo_key = (cls_cfg.k, cls_cfg.graph_mode)
            cls_batch = rebuilt.get(topo_key)
            if cls_batch is None:
                cls_batch = batch_from_coords(out.data, batch, cls_cfg, dtype=params.dtype)
                rebuilt[topo_key] = cls_batch
        ct = _as_param_tensors(cls_params, False)
        logits = _classifier_logits(cls_batch, out, ct, cls_cfg)
        return _nll_from_logits(logits, labels)

    gate = _gate_value(weights, gate_accuracy)
    loss_t = None
    l_point = l_ges = l_id_stab = None
    if loss_selector in (LOSS_CHAMFER, LOSS_COMBINED):
        l_point = _chamfer_loss(out, batch.coords, batch)
        components["l_point"] = float(l_point.data)
        loss_t = l_point
    if loss_selector in (LOSS_GESTURE, LOSS_COMBINED):
        if g_params is None:
            raise ConfigurationError("gesture loss needs frozen gesture classifier params")
        l_ges = classifier_nll(g_params, g_cfg or cfg, batch.gestures, "g")
        components["l_ges"] = float(l_ges.data)
        if loss_t is None:
            loss_t = l_ges
    if loss_selector == LOSS_DEID or (
            loss_selector == LOSS_COMBINED and gate > 0 and weights.gamma != 0):
        if u_params is None:
            raise ConfigurationError("de-id loss needs frozen identity classifier params")
        nll_u = classifier_nll(u_params, u_cfg or cfg, batch.subjects, "u")
        delta = weights.delta if weights is not None else 2.0
        l_id_stab = ad.add(ad.mul(ad.log1p(nll_u), -1.0), delta)
        components["l_id_nll"] = float(nll_u.data)
        components["l_id_stab"] = float(l_id_stab.data)
        if loss_selector == LOSS_DEID:
            loss_t = l_id_stab

    if loss_selector == LOSS_COMBINED:
        components["gate"] = gate
        loss_t = ad.add(ad.mul(l_point, weights.alpha), ad.mul(l_ges, weights.beta))
        if gate > 0 and weights.gamma != 0:
            loss_t = ad.add(loss_t, ad.mul(l_id_stab, weights.gamma))

    if not np.isfinite(loss_t.data):
        raise FloatingPointError(f"non-finite {loss_selector} loss value")
    if not compute_grads:
        return float(loss_t.data), None, components
    loss_t.backward()
    return float(loss_t.data), _grads_from_tape(pt, params), components


def _gate_value(weights, gate_accuracy) -> float:
    if weights is None or gate_accuracy is None:
        return 1.0
    if weights.tau is None:
        raise ConfigurationError("tau is unresolved; call weights.resolve_tau first")
    return 1.0 if gate_accuracy - weights.tau >= 0 else 0.0
