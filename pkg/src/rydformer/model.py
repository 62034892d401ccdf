"""Hamiltonian-conditioned encoder-decoder network.

Pipeline: interaction graph -> graph convolutions -> transformer encoder
-> context rows (one per site, snake order) -> masked transformer decoder
-> per-site conditional occupation probabilities.

Decoder token ids: 0 and 1 are occupations, 2 is the learned start token.
All blocks are pre-norm residual; the decoder adds sinusoidal position
encodings, the encoder gets its geometry from the graph stage instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ArtifactMismatchError, InvalidArgumentError
from .lattice import InteractionGraph

BOS_TOKEN = 2
VOCAB_SIZE = 3

# Test hook: when set to a list, attention weight arrays are appended to it.
_ATTN_PROBE: list | None = None


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    d_ff: int = 128
    d_graph: int = 64
    num_heads: int = 8
    encoder_blocks: int = 1
    decoder_blocks: int = 3
    graph_layers: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise InvalidArgumentError(
                f"d_model={self.d_model} not divisible by num_heads={self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "d_ff": self.d_ff, "d_graph": self.d_graph,
            "num_heads": self.num_heads, "encoder_blocks": self.encoder_blocks,
            "decoder_blocks": self.decoder_blocks, "graph_layers": self.graph_layers,
            "dropout": self.dropout,
        }


def _attention_names(prefix):
    for proj in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.{proj}.weight"
        yield f"{prefix}.{proj}.bias"


def _ln_names(prefix):
    yield f"{prefix}.gain"
    yield f"{prefix}.bias"


def _ff_names(prefix):
    yield f"{prefix}.w1.weight"
    yield f"{prefix}.w1.bias"
    yield f"{prefix}.w2.weight"
    yield f"{prefix}.w2.bias"


def param_manifest(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the order fixes init and file layout."""
    dm, dff, dg = cfg.d_model, cfg.d_ff, cfg.d_graph
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["graph.in_proj.weight"] = (4, dg)
    shapes["graph.in_proj.bias"] = (dg,)
    for i in range(cfg.graph_layers):
        shapes[f"graph.conv{i}.weight"] = (dg, dg)
    shapes["enc.in_proj.weight"] = (dg, dm)
    shapes["enc.in_proj.bias"] = (dm,)
    for b in range(cfg.encoder_blocks):
        p = f"enc.b{b}"
        for n in _ln_names(f"{p}.ln1"):
            shapes[n] = (dm,)
        for n in _attention_names(f"{p}.attn"):
            shapes[n] = (dm, dm) if n.endswith("weight") else (dm,)
        for n in _ln_names(f"{p}.ln2"):
            shapes[n] = (dm,)
        shapes[f"{p}.ff.w1.weight"] = (dm, dff)
        shapes[f"{p}.ff.w1.bias"] = (dff,)
        shapes[f"{p}.ff.w2.weight"] = (dff, dm)
        shapes[f"{p}.ff.w2.bias"] = (dm,)
    for n in _ln_names("enc.final_ln"):
        shapes[n] = (dm,)
    shapes["dec.token_embedding.weight"] = (VOCAB_SIZE, dm)
    for b in range(cfg.decoder_blocks):
        p = f"dec.b{b}"
        for n in _ln_names(f"{p}.ln1"):
            shapes[n] = (dm,)
        for n in _attention_names(f"{p}.self"):
            shapes[n] = (dm, dm) if n.endswith("weight") else (dm,)
        for n in _ln_names(f"{p}.ln2"):
            shapes[n] = (dm,)
        for n in _attention_names(f"{p}.cross"):
            shapes[n] = (dm, dm) if n.endswith("weight") else (dm,)
        for n in _ln_names(f"{p}.ln3"):
            shapes[n] = (dm,)
        shapes[f"{p}.ff.w1.weight"] = (dm, dff)
        shapes[f"{p}.ff.w1.bias"] = (dff,)
        shapes[f"{p}.ff.w2.weight"] = (dff, dm)
        shapes[f"{p}.ff.w2.bias"] = (dm,)
    for n in _ln_names("dec.final_ln"):
        shapes[n] = (dm,)
    shapes["head.weight"] = (dm, 2)
    shapes["head.bias"] = (2,)
    return shapes


@dataclass
class Model:
    """Config plus named parameter tensors; doubles as the checkpoint unit."""

    config: ModelConfig
    params: dict[str, T.Tensor]
    step: int = 0
    seed: int = 0
    dataset_digest: str = ""
    _pe_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        manifest = param_manifest(self.config)
        bad = [n for n in manifest if n not in self.params
               or self.params[n].values.shape != manifest[n]]
        bad += [n for n in self.params if n not in manifest]
        if bad:
            raise ArtifactMismatchError(
                "parameter tensors do not match the architecture: " + ", ".join(sorted(bad))
            )

    def parameter_count(self) -> int:
        return sum(p.values.size for p in self.params.values())

    # -- building blocks ----------------------------------------------------

    def _ln(self, x, prefix):
        return T.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def _linear(self, x, prefix):
        return T.add(T.matmul(x, self.params[f"{prefix}.weight"]),
                     self.params[f"{prefix}.bias"])

    def _split_heads(self, x):
        # (..., T, d_model) -> (..., heads, T, head_dim)
        h, dh = self.config.num_heads, self.config.head_dim
        lead = x.values.shape[:-2]
        t = x.values.shape[-2]
        x = T.reshape(x, lead + (t, h, dh))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return T.transpose(x, axes)

    def _join_heads(self, x):
        lead = x.values.shape[:-3]
        h, t, dh = x.values.shape[-3:]
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return T.reshape(T.transpose(x, axes), lead + (t, h * dh))

    def _attention(self, query_in, key_in, value_in, prefix, mask, drop):
        q = self._split_heads(self._linear(query_in, f"{prefix}.wq"))
        k = self._split_heads(self._linear(key_in, f"{prefix}.wk"))
        v = self._split_heads(self._linear(value_in, f"{prefix}.wv"))
        if k.values.ndim < q.values.ndim:  # shared context keys across the batch
            batch = q.values.shape[0]
            k = T.broadcast_to(k, (batch,) + k.values.shape)
            v = T.broadcast_to(v, (batch,) + v.values.shape)
        ndim = k.values.ndim
        kt = T.transpose(k, tuple(range(ndim - 2)) + (ndim - 1, ndim - 2))
        scores = T.scale(T.matmul(q, kt), 1.0 / math.sqrt(self.config.head_dim))
        if mask is not None:
            scores = T.mask_fill(scores, mask, -np.inf)
        weights = T.softmax(scores)
        if _ATTN_PROBE is not None:
            _ATTN_PROBE.append(weights.values)
        weights = drop(weights)
        return self._linear(self._join_heads(T.matmul(weights, v)), f"{prefix}.wo")

    def _ffn(self, x, prefix):
        return self._linear(T.relu(self._linear(x, f"{prefix}.w1")), f"{prefix}.w2")

    # -- encoder ------------------------------------------------------------

    def encode_graph(self, graph: InteractionGraph, drop=None) -> T.Tensor:
        """Graph convolutions over the normalized weighted adjacency."""
        drop = drop or _eval_dropout
        adj = graph.edge_weights + np.eye(graph.num_sites)
        inv_sqrt_deg = 1.0 / np.sqrt(adj.sum(axis=1))
        norm_adj = adj * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]
        hidden = self._linear(T.Tensor(graph.node_features), "graph.in_proj")
        for i in range(self.config.graph_layers):
            propagated = T.matmul(norm_adj, hidden)
            hidden = T.relu(T.matmul(propagated, self.params[f"graph.conv{i}.weight"]))
        return hidden

    def encode(self, graph_embeddings: T.Tensor, drop=None) -> T.Tensor:
        """Transformer encoder: (N, d_graph) embeddings -> (N, d_model) context."""
        drop = drop or _eval_dropout
        x = self._linear(graph_embeddings, "enc.in_proj")
        for b in range(self.config.encoder_blocks):
            p = f"enc.b{b}"
            u = self._ln(x, f"{p}.ln1")
            x = T.add(x, drop(self._attention(u, u, u, f"{p}.attn", None, drop)))
            u = self._ln(x, f"{p}.ln2")
            x = T.add(x, drop(self._ffn(u, f"{p}.ff")))
        return self._ln(x, "enc.final_ln")

    def context(self, graph: InteractionGraph, drop=None) -> T.Tensor:
        return self.encode(self.encode_graph(graph, drop), drop)

    # -- decoder ------------------------------------------------------------

    def _positional(self, length: int) -> np.ndarray:
        key = length
        if key not in self._pe_cache:
            dm = self.config.d_model
            pos = np.arange(length)[:, None]
            idx = np.arange(0, dm, 2)[None, :]
            angle = pos / np.power(10000.0, idx / dm)
            pe = np.zeros((length, dm))
            pe[:, 0::2] = np.sin(angle)
            pe[:, 1::2] = np.cos(angle)
            self._pe_cache[key] = pe
        return self._pe_cache[key]

    def decoder_logits(self, context: T.Tensor, tokens: np.ndarray, drop=None) -> T.Tensor:
        """Causal decoder over (B, T) token ids -> (B, T, 2) output logits."""
        drop = drop or _eval_dropout
        seq_len = tokens.shape[-1]
        emb = T.embedding_lookup(self.params["dec.token_embedding.weight"], tokens)
        x = T.add(T.scale(emb, math.sqrt(self.config.d_model)), self._positional(seq_len))
        x = drop(x)
        causal = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
        for b in range(self.config.decoder_blocks):
            p = f"dec.b{b}"
            u = self._ln(x, f"{p}.ln1")
            x = T.add(x, drop(self._attention(u, u, u, f"{p}.self", causal, drop)))
            u = self._ln(x, f"{p}.ln2")
            x = T.add(x, drop(self._attention(u, context, context, f"{p}.cross", None, drop)))
            u = self._ln(x, f"{p}.ln3")
            x = T.add(x, drop(self._ffn(u, f"{p}.ff")))
        return self._linear(self._ln(x, "dec.final_ln"), "head")

    def log_prob_traced(self, context: T.Tensor, bits: np.ndarray, drop=None) -> T.Tensor:
        """(B,) log p(sigma) via one teacher-forced pass (training path)."""
        bits = np.asarray(bits, dtype=np.int64)
        tokens = np.concatenate(
            [np.full((bits.shape[0], 1), BOS_TOKEN, dtype=np.int64), bits[:, :-1]], axis=1
        )
        logits = self.decoder_logits(context, tokens, drop)
        logp = T.gather_last(T.log_softmax(logits), bits)
        return T.reduce_sum(logp, axis=-1)

    def log_prob(self, graph: InteractionGraph, bits: np.ndarray) -> np.ndarray:
        bits = np.atleast_2d(np.asarray(bits, dtype=np.int64))
        if bits.shape[1] != graph.num_sites:
            raise InvalidArgumentError(
                f"configuration length {bits.shape[1]} != lattice sites {graph.num_sites}"
            )
        with T.no_grad():
            return self.log_prob_traced(self.context(graph), bits).values

    def conditionals(self, context: T.Tensor, bits: np.ndarray) -> np.ndarray:
        """(B, N, 2) conditional probabilities for every site, teacher-forced."""
        bits = np.atleast_2d(np.asarray(bits, dtype=np.int64))
        tokens = np.concatenate(
            [np.full((bits.shape[0], 1), BOS_TOKEN, dtype=np.int64), bits[:, :-1]], axis=1
        )
        with T.no_grad():
            return T.softmax(self.decoder_logits(context, tokens)).values

    def decode_conditionals(self, context: T.Tensor, prefix) -> tuple[float, float]:
        """(p0, p1) for the site following ``prefix`` (possibly empty)."""
        prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
        num_sites = context.values.shape[0]
        if prefix.size > num_sites - 1:
            raise InvalidArgumentError(
                f"prefix of length {prefix.size} leaves no site to predict (N={num_sites})"
            )
        tokens = np.concatenate([[BOS_TOKEN], prefix])[None, :]
        with T.no_grad():
            probs = T.softmax(self.decoder_logits(context, tokens)).values
        return float(probs[0, -1, 0]), float(probs[0, -1, 1])


def _eval_dropout(x):
    return x


class DropoutState:
    """Training-mode dropout: one Philox stream per (seed, step, site)."""

    def __init__(self, rate: float, seed: int, step: int):
        self.rate = rate
        self.seed = seed
        self.step = step
        self._site = 0

    def __call__(self, x):
        rng = np.random.Generator(
            np.random.Philox(key=[self.seed % (1 << 64), self.step * 1024 + self._site])
        )
        self._site += 1
        return T.dropout(x, self.rate, rng)


def init_params(cfg: ModelConfig, seed: int) -> Model:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, T.Tensor] = {}
    for name, shape in param_manifest(cfg).items():
        if name.endswith(".gain"):
            values = np.ones(shape)
        elif name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            fan_in, fan_out = shape[0], shape[1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-bound, bound, size=shape)
        params[name] = T.Tensor(values, requires_grad=True)
    return Model(config=cfg, params=params, step=0, seed=seed)


# ---------------------------------------------------------------------------
# Incremental decoding kernel (raw numpy, inference only).
#
# Both samplers in rydformer.sampling run token steps through this one
# kernel so their arithmetic is identical call for call; the cached sampler
# keeps the per-layer key/value arrays, the naive one rebuilds them by
# replaying the prefix.


class DecodeStepKernel:
    """Single-token decoder steps for a batch of sequences.

    Key/value caches are kept position-major, (T, B, heads, head_dim), so
    the attention softmax reduces over the leading axis of contiguous
    arrays. Q/K/V projection weights are fused into one matrix per
    attention site.
    """

    def __init__(self, model: Model, context_values: np.ndarray, batch: int,
                 counter: dict | None = None):
        self.model = model
        self.cfg = model.config
        self.batch = batch
        self.num_sites = context_values.shape[0]
        self.counter = counter
        w = {n: p.values for n, p in model.params.items()}
        self._weights = w
        self._qkv = {}
        for b in range(self.cfg.decoder_blocks):
            for kind in ("self", "cross"):
                p = f"dec.b{b}.{kind}"
                self._qkv[p] = (
                    np.concatenate([w[f"{p}.wq.weight"], w[f"{p}.wk.weight"],
                                    w[f"{p}.wv.weight"]], axis=1),
                    np.concatenate([w[f"{p}.wq.bias"], w[f"{p}.wk.bias"],
                                    w[f"{p}.wv.bias"]]),
                )
        self.enc_kv = []
        for b in range(self.cfg.decoder_blocks):
            k = self._project(context_values, f"dec.b{b}.cross.wk")
            v = self._project(context_values, f"dec.b{b}.cross.wv")
            # (N, d_model) -> (N, heads, head_dim)
            self.enc_kv.append((self._heads(k), self._heads(v)))
        self.pe = model._positional(self.num_sites + 1)
        self.reset()

    def reset(self):
        self.t = 0
        shape = (self.num_sites + 1, self.batch, self.cfg.num_heads, self.cfg.head_dim)
        self.self_kv = [
            (np.empty(shape), np.empty(shape)) for _ in range(self.cfg.decoder_blocks)
        ]

    def _project(self, x, prefix):
        return x @ self._weights[f"{prefix}.weight"] + self._weights[f"{prefix}.bias"]

    def _heads(self, x):
        # (..., d_model) -> (..., heads, head_dim)
        return x.reshape(x.shape[:-1] + (self.cfg.num_heads, self.cfg.head_dim))

    def _ln(self, x, prefix):
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return (centered / np.sqrt(var + 1e-5)) * self._weights[f"{prefix}.gain"] \
            + self._weights[f"{prefix}.bias"]

    def _attend(self, scores, values):
        """Softmax over the leading axis, then contract with values."""
        np.multiply(scores, 1.0 / math.sqrt(self.cfg.head_dim), out=scores)
        peak = scores.max(axis=0)
        np.subtract(scores, peak, out=scores)
        np.exp(scores, out=scores)
        norm = scores.sum(axis=0)
        np.divide(scores, norm, out=scores)
        return np.einsum("tbh,tbhd->bhd" if values.ndim == 4 else "nbh,nhd->bhd",
                         scores, values)

    def step(self, token_ids: np.ndarray) -> np.ndarray:
        """Feed one token per sequence; returns (B, 2) conditional probabilities."""
        cfg, w = self.cfg, self._weights
        pos = self.t
        x = w["dec.token_embedding.weight"][token_ids] * math.sqrt(cfg.d_model) + self.pe[pos]
        dm = cfg.d_model
        for b in range(cfg.decoder_blocks):
            p = f"dec.b{b}"
            u = self._ln(x, f"{p}.ln1")
            wm, wb = self._qkv[f"{p}.self"]
            qkv = u @ wm + wb
            q = self._heads(qkv[:, :dm])                             # (B, h, dh)
            k_cache, v_cache = self.self_kv[b]
            k_cache[pos] = self._heads(qkv[:, dm:2 * dm])
            v_cache[pos] = self._heads(qkv[:, 2 * dm:])
            scores = np.einsum("tbhd,bhd->tbh", k_cache[: pos + 1], q)
            if self.counter is not None:
                self.counter["self_scores"] += self.batch * cfg.num_heads * (pos + 1)
            attended = self._attend(scores, v_cache[: pos + 1])
            x = x + self._project(attended.reshape(self.batch, dm), f"{p}.self.wo")
            u = self._ln(x, f"{p}.ln2")
            wm, wb = self._qkv[f"{p}.cross"]
            q = self._heads((u @ wm[:, :dm]) + wb[:dm])
            enc_k, enc_v = self.enc_kv[b]
            scores = np.einsum("nhd,bhd->nbh", enc_k, q)
            if self.counter is not None:
                self.counter["cross_scores"] += self.batch * cfg.num_heads * self.num_sites
            attended = self._attend(scores, enc_v)
            x = x + self._project(attended.reshape(self.batch, dm), f"{p}.cross.wo")
            u = self._ln(x, f"{p}.ln3")
            hidden = np.maximum(self._project(u, f"{p}.ff.w1"), 0.0)
            x = x + self._project(hidden, f"{p}.ff.w2")
        logits = self._project(self._ln(x, "dec.final_ln"), "head")
        self.t += 1
        return _softmax_last(logits)


def _softmax_last(x):
    shifted = x - np.max(x, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)
