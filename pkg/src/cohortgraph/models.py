"""Model zoo over the subject-similarity graph: logistic regression, MLP,
GCN, GAT, and the diffusion transformer in its plain (difformer-s) and
graph-attention-augmented (difformer-attn) variants.

All models map the N x F feature matrix (plus, for graph kinds, the
similarity graph) to N x 2 class logits. Multi-head layers project each head
to hidden/heads dimensions and concatenate head outputs back to the hidden
width, so layer width is depth-invariant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Parameter
from .graph import SimilarityGraph

KINDS = ("lr", "mlp", "gcn", "gat", "difformer-s", "difformer-attn")
GRAPH_KINDS = ("gcn", "gat", "difformer-attn")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str = "difformer-attn"
    depth: int = 2
    hidden: int = 64
    heads: int = 4
    residual_alpha: float = 0.8
    dropout: float = 0.5
    binary_degree: bool = False  # use binary instead of weighted degrees in the
                                 # attn sparse term's D^{-1/2}

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        if self.depth < 1:
            raise ModelError("depth must be >= 1")
        if self.hidden % self.heads != 0:
            raise ModelError(f"hidden ({self.hidden}) must be divisible by "
                             f"heads ({self.heads})")
        if not 0.0 <= self.residual_alpha <= 1.0:
            raise ModelError("residual_alpha must be in [0, 1]")

    @property
    def uses_graph(self) -> bool:
        return self.kind in GRAPH_KINDS


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
           shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# -- layer primitives (exposed for direct testing) ---------------------------

def edge_attention(z: Tensor, rows: np.ndarray, cols: np.ndarray,
                   w_z: Tensor, a: Tensor, slope: float = 0.2) -> Tensor:
    """Per-edge coefficients e = LeakyReLU(a . [Wz z_row || Wz z_col]).

    Uses the split a = [a_src, a_dst] so the concat never materializes.
    """
    proj = z @ w_z
    d = proj.shape[1]
    s_src = proj @ a.gather_rows(np.arange(d))
    s_dst = proj @ a.gather_rows(np.arange(d, 2 * d))
    return (s_src.gather_rows(rows) + s_dst.gather_rows(cols)).leaky_relu(slope)


def attention_softmax(e: Tensor, groups: np.ndarray, n_groups: int) -> Tensor:
    """Softmax of per-edge coefficients within each source-vertex group,
    stabilized by subtracting the per-group max."""
    shift = ad.segment_max(e.data, groups, n_groups)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    ex = (e - Tensor(shift[groups])).exp()
    denom = ad.segment_sum(ex, groups, n_groups)
    return ex * denom.gather_rows(groups) ** -1.0


def difformer_s_propagate(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """All-pair propagation with diffusivity s_ij = 1 + q_i . k_j on
    row-normalized q, k: P_i = sum_j s_ij v_j / sum_j s_ij.

    Computed without the N x N matrix: (sum_j v_j + q (K^T V)) / (N + q (K^T 1)),
    which is O(N d^2).
    """
    n = q.shape[0]
    qh = q.l2_normalize_rows()
    kh = k.l2_normalize_rows()
    numer = v.sum(axis=0) + qh @ (kh.T @ v)
    denom = float(n) + (qh @ kh.sum(axis=0).reshape(-1, 1)).reshape(n)
    return numer * denom.reshape(n, 1) ** -1.0


def difformer_s_propagate_dense(q: np.ndarray, k: np.ndarray,
                                v: np.ndarray) -> np.ndarray:
    """Quadratic O(N^2 d) reference that materializes the s matrix; used as
    the independent oracle for the linear form."""
    def rownorm(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.where(n < 1e-12, 0.0, x / np.where(n < 1e-12, 1.0, n))

    s = 1.0 + rownorm(q) @ rownorm(k).T
    return (s @ v) / s.sum(axis=1, keepdims=True)


def multi_head_attention(z: Tensor, rows: np.ndarray, cols: np.ndarray, n: int,
                         w_z: Tensor, a_src: Tensor, a_dst: Tensor,
                         slope: float = 0.2) -> Tensor:
    """Per-edge softmax attention for all heads at once: returns (E, heads).

    Equivalent to edge_attention + attention_softmax applied head by head
    with a = [a_src[h], a_dst[h]], but computed on fused arrays.
    """
    heads = a_src.shape[0]
    head_dim = a_src.shape[1]
    proj = (z @ w_z).reshape(-1, heads, head_dim)
    s_src = (proj * a_src).sum(axis=2)   # (N, heads)
    s_dst = (proj * a_dst).sum(axis=2)
    e = (s_src.gather_rows(rows) + s_dst.gather_rows(cols)).leaky_relu(slope)
    shift = ad.segment_max(e.data, rows, n)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    ex = (e - Tensor(shift[rows])).exp()
    denom = ad.segment_sum(ex, rows, n)
    return ex * denom.gather_rows(rows) ** -1.0


def gcn_layer(h: Tensor, norm_rows: np.ndarray, norm_cols: np.ndarray,
              norm_vals: np.ndarray, w: Tensor, activate: bool = True) -> Tensor:
    """H' = relu(A_hat H W) with A_hat given as a precomputed sparse triple."""
    hw = h @ w
    out = ad.weighted_gather_sum(Tensor(norm_vals), hw, norm_rows, norm_cols,
                                 h.shape[0])
    return out.relu() if activate else out


# -- full models --------------------------------------------------------------

class Model:
    """A configured model with its parameters and batch-norm state.

    forward() builds a fresh tape on every call; parameters persist across
    calls so an optimizer can update them in place.
    """

    def __init__(self, config: ModelConfig, n_features: int,
                 rng: np.random.Generator):
        self.config = config
        self.n_features = n_features
        self.params: dict[str, Parameter] = {}
        self.bn_state: dict[str, dict] = {}
        self._graph_cache = None
        self._init_params(rng)

    # parameter construction order is fixed so a seed fully determines init
    def _add(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(name, value)
        self.params[name] = p
        return p

    def _add_bn(self, name: str, width: int):
        self._add(f"{name}.gamma", np.ones(width))
        self._add(f"{name}.beta", np.zeros(width))
        self.bn_state[name] = {"mean": np.zeros(width), "var": np.ones(width)}

    def _init_params(self, rng):
        cfg = self.config
        f, h = self.n_features, cfg.hidden
        hd = h // cfg.heads
        if cfg.kind == "lr":
            self._add("out.W", glorot(rng, f, 2))
            self._add("out.b", np.zeros(2))
            return
        if cfg.kind == "mlp":
            for k in range(cfg.depth):
                fan_in = f if k == 0 else h
                self._add(f"l{k}.W", glorot(rng, fan_in, h))
                self._add(f"l{k}.b", np.zeros(h))
                self._add_bn(f"l{k}.bn", h)
        else:
            self._add("in.W", glorot(rng, f, h))
            self._add("in.b", np.zeros(h))
            for k in range(cfg.depth):
                if cfg.kind == "gcn":
                    self._add(f"l{k}.W", glorot(rng, h, h))
                elif cfg.kind == "gat":
                    self._add(f"l{k}.Wz", glorot(rng, h, h))
                    self._add(f"l{k}.a_src", glorot(rng, 2 * hd, 1, (cfg.heads, hd)))
                    self._add(f"l{k}.a_dst", glorot(rng, 2 * hd, 1, (cfg.heads, hd)))
                else:  # difformer-s / difformer-attn
                    self._add(f"l{k}.Wq", glorot(rng, h, h))
                    self._add(f"l{k}.Wk", glorot(rng, h, h))
                    self._add(f"l{k}.Wv", glorot(rng, h, h))
                    if cfg.kind == "difformer-attn":
                        self._add(f"l{k}.Wz", glorot(rng, h, h))
                        self._add(f"l{k}.a_src", glorot(rng, 2 * hd, 1, (cfg.heads, hd)))
                        self._add(f"l{k}.a_dst", glorot(rng, 2 * hd, 1, (cfg.heads, hd)))
                    self._add_bn(f"l{k}.bn", h)
        self._add("out.W", glorot(rng, h, 2))
        self._add("out.b", np.zeros(2))

    def parameters(self):
        return list(self.params.values())

    # -- graph-derived constants, cached per graph object ----------------------

    def _graph_arrays(self, graph: SimilarityGraph):
        if self._graph_cache is not None and self._graph_cache[0] is graph:
            return self._graph_cache[1]
        cfg = self.config
        arrays = {}
        if graph is not None:
            rows, cols, w = graph.directed()
            arrays["rows"], arrays["cols"] = rows, cols
            if cfg.kind == "gcn":
                # self-loops added before symmetric normalization
                deg = graph.degree + 1.0
                sl = np.arange(graph.n)
                r = np.concatenate([rows, sl])
                c = np.concatenate([cols, sl])
                v = np.concatenate([w, np.ones(graph.n)])
                inv = 1.0 / np.sqrt(deg)
                arrays["gcn"] = (r, c, v * inv[r] * inv[c])
            elif cfg.kind == "gat":
                sl = np.arange(graph.n)
                arrays["att_rows"] = np.concatenate([rows, sl])
                arrays["att_cols"] = np.concatenate([cols, sl])
            elif cfg.kind == "difformer-attn":
                if cfg.binary_degree:
                    deg = np.zeros(graph.n)
                    np.add.at(deg, rows, 1.0)
                else:
                    deg = graph.degree
                inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
                arrays["anorm"] = w * inv[rows] * inv[cols]
        self._graph_cache = (graph, arrays)
        return arrays

    # -- forward ----------------------------------------------------------------

    def forward(self, x: np.ndarray, graph: SimilarityGraph | None,
                training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        if cfg.uses_graph:
            if graph is None:
                raise ModelError(f"model kind {cfg.kind!r} requires a graph")
            if graph.n != x.shape[0]:
                raise ModelError(f"graph has {graph.n} vertices but features "
                                 f"have {x.shape[0]} rows")
        if training and rng is None:
            raise ModelError("training-mode forward needs an rng for dropout")
        p = self.params
        n = x.shape[0]
        h = x if isinstance(x, Tensor) else Tensor(x)

        if cfg.kind == "lr":
            return h @ p["out.W"] + p["out.b"]

        if cfg.kind == "mlp":
            for k in range(cfg.depth):
                h = h @ p[f"l{k}.W"] + p[f"l{k}.b"]
                h = ad.batch_norm(h, p[f"l{k}.bn.gamma"], p[f"l{k}.bn.beta"],
                                  self.bn_state[f"l{k}.bn"], training)
                h = h.relu().dropout(cfg.dropout, rng, training)
            return h @ p["out.W"] + p["out.b"]

        arrays = self._graph_arrays(graph)
        h = h @ p["in.W"] + p["in.b"]

        if cfg.kind == "gcn":
            r, c, v = arrays["gcn"]
            for k in range(cfg.depth):
                h = h.dropout(cfg.dropout, rng, training)
                h = gcn_layer(h, r, c, v, p[f"l{k}.W"],
                              activate=k < cfg.depth - 1)
        elif cfg.kind == "gat":
            rows, cols = arrays["att_rows"], arrays["att_cols"]
            hd = cfg.hidden // cfg.heads
            for k in range(cfg.depth):
                h = h.dropout(cfg.dropout, rng, training)
                alpha = multi_head_attention(h, rows, cols, n, p[f"l{k}.Wz"],
                                             p[f"l{k}.a_src"], p[f"l{k}.a_dst"])
                proj = h @ p[f"l{k}.Wz"]
                heads = [ad.weighted_gather_sum(
                            alpha.slice_cols(hh, hh + 1).reshape(-1),
                            proj.slice_cols(hh * hd, (hh + 1) * hd),
                            rows, cols, n)
                         for hh in range(cfg.heads)]
                h = ad.concat(heads, axis=1).relu()
        else:  # difformer-s / difformer-attn
            hd = cfg.hidden // cfg.heads
            for k in range(cfg.depth):
                z = h
                q_all = z @ p[f"l{k}.Wq"]
                k_all = z @ p[f"l{k}.Wk"]
                v_all = z @ p[f"l{k}.Wv"]
                use_attn = (cfg.kind == "difformer-attn" and graph is not None
                            and graph.n_edges > 0)
                if use_attn:
                    rows, cols = arrays["rows"], arrays["cols"]
                    alpha = multi_head_attention(z, rows, cols, n, p[f"l{k}.Wz"],
                                                 p[f"l{k}.a_src"], p[f"l{k}.a_dst"])
                    coeff = alpha * Tensor(arrays["anorm"][:, None])
                heads = []
                for hh in range(cfg.heads):
                    lo, hi = hh * hd, (hh + 1) * hd
                    v = v_all.slice_cols(lo, hi)
                    prop = difformer_s_propagate(q_all.slice_cols(lo, hi),
                                                 k_all.slice_cols(lo, hi), v)
                    if use_attn:
                        prop = prop + ad.weighted_gather_sum(
                            coeff.slice_cols(hh, hh + 1).reshape(-1),
                            v, rows, cols, n)
                    heads.append(prop)
                mixed = ad.concat(heads, axis=1)
                h = cfg.residual_alpha * z + (1.0 - cfg.residual_alpha) * mixed
                h = ad.batch_norm(h, p[f"l{k}.bn.gamma"], p[f"l{k}.bn.beta"],
                                  self.bn_state[f"l{k}.bn"], training)
                h = h.dropout(cfg.dropout, rng, training)
        return h @ p["out.W"] + p["out.b"]


def save_checkpoint(model: Model, path) -> None:
    """JSON checkpoint of config, parameters, and batch-norm running stats;
    float round trip is exact (shortest-repr JSON floats)."""
    doc = {
        "config": asdict(model.config),
        "n_features": model.n_features,
        "params": {name: {"shape": list(p.data.shape),
                          "values": p.data.reshape(-1).tolist()}
                   for name, p in model.params.items()},
        "bn_state": {name: {"mean": st["mean"].tolist(), "var": st["var"].tolist()}
                     for name, st in model.bn_state.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> Model:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    config = ModelConfig(**doc["config"])
    model = Model(config, doc["n_features"], np.random.default_rng(0))
    for name, entry in doc["params"].items():
        if name not in model.params:
            raise ModelError(f"checkpoint parameter {name!r} not in model")
        model.params[name].data = np.array(entry["values"]).reshape(entry["shape"])
    for name, st in doc["bn_state"].items():
        model.bn_state[name] = {"mean": np.array(st["mean"]),
                                "var": np.array(st["var"])}
    return model
