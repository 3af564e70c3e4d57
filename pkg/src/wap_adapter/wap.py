"""Weighted-average-pooling transformer used as the adapter backbone.

Input frames are projected (patch embedding), masked positions are swapped for
a learned mask vector, learnable positions are added, and the result runs
through ``n_layers`` pre-LN transformer blocks. The block outputs are combined
with softmax-normalised layer weights and a residual 3-layer MLP aggregates
the pooled sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from .nn import Param


class NonFiniteActivationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class WapConfig:
    d_in: int = 1024
    d_model: int = 384
    n_layers: int = 3
    n_heads: int = 6
    d_ff: int = 1536
    t_max: int = 1024
    weight_mode: str = "softmax"  # "softmax" or "raw"
    aggregation: str = "post"  # "post": MLP after pooling; "pooled": MLP output joins the pool
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.weight_mode not in ("softmax", "raw"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.aggregation not in ("post", "pooled"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    @property
    def n_pooled(self):
        return self.n_layers + (1 if self.aggregation == "pooled" else 0)


_BLOCK_SHAPES = (
    ("ln1.g", "d"), ("ln1.b", "d"),
    ("attn.Wq", "dd"), ("attn.bq", "d"), ("attn.Wk", "dd"), ("attn.bk", "d"),
    ("attn.Wv", "dd"), ("attn.bv", "d"), ("attn.Wo", "dd"), ("attn.bo", "d"),
    ("ln2.g", "d"), ("ln2.b", "d"),
    ("ff.W1", "df"), ("ff.b1", "f"), ("ff.W2", "fd"), ("ff.b2", "d"),
)


class WapParams:
    """Parameter set of one branch, keyed by dotted names."""

    def __init__(self, config: WapConfig, params: dict):
        self.config = config
        self.params = params

    def __getitem__(self, name):
        return self.params[name].value

    def __iter__(self):
        return iter(self.params)

    def names(self):
        return list(self.params)

    def values(self):
        return {k: p.value for k, p in self.params.items()}

    def copy(self) -> "WapParams":
        return WapParams(self.config, {k: p.copy() for k, p in self.params.items()})

    def tensors(self):
        return {k: p.value.copy() for k, p in self.params.items()}

    @classmethod
    def from_tensors(cls, config: WapConfig, tensors):
        ref = init_wap(config, np.random.default_rng(0))
        missing = set(ref.params) - set(tensors)
        extra = set(tensors) - set(ref.params)
        if missing or extra:
            raise KeyError(f"tensor mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        params = {}
        for k in ref.params:
            arr = np.asarray(tensors[k], dtype=np.float64)
            if arr.shape != ref.params[k].shape:
                raise ValueError(f"{k}: shape {arr.shape} != expected {ref.params[k].shape}")
            params[k] = Param(arr.copy())
        return cls(config, params)


def init_wap(config: WapConfig, rng) -> WapParams:
    d, f, std = config.d_model, config.d_ff, config.init_std
    dims = {"d": d, "f": f}
    params = {}

    def normal(*shape):
        return Param(rng.normal(0.0, std, size=shape))

    params["patch.W"] = normal(config.d_in, d)
    params["patch.b"] = Param(np.zeros(d))
    params["pos"] = normal(config.t_max, d)
    params["mask_embed"] = normal(d)
    for l in range(config.n_layers):
        for name, code in _BLOCK_SHAPES:
            shape = tuple(dims[c] for c in code)
            key = f"blocks.{l}.{name}"
            if name.endswith(".g"):
                params[key] = Param(np.ones(shape))
            elif len(shape) == 2:
                params[key] = normal(*shape)
            else:
                params[key] = Param(np.zeros(shape))
    params["agg.ln.g"] = Param(np.ones(d))
    params["agg.ln.b"] = Param(np.zeros(d))
    for i in (1, 2, 3):
        params[f"agg.W{i}"] = normal(d, d)
        params[f"agg.b{i}"] = Param(np.zeros(d))
    n = config.n_pooled
    if config.weight_mode == "softmax":
        params["layer_weights"] = Param(np.zeros(n))
    else:
        params["layer_weights"] = Param(np.full(n, 1.0 / n))
    return WapParams(config, params)


def wap_config_from_tensors(tensors, n_heads, weight_mode="softmax", aggregation="post"):
    """Recover a WapConfig from checkpoint tensor shapes (heads are not inferable)."""
    d_in, d_model = tensors["patch.W"].shape
    n_layers = len({k.split(".")[1] for k in tensors if k.startswith("blocks.")})
    return WapConfig(
        d_in=d_in,
        d_model=d_model,
        n_layers=n_layers,
        n_heads=n_heads,
        d_ff=tensors["blocks.0.ff.W1"].shape[1],
        t_max=tensors["pos"].shape[0],
        weight_mode=weight_mode,
        aggregation=aggregation,
    )


_MODES = ("softmax", "raw")
_AGGS = ("post", "pooled")


def to_checkpoint(params: WapParams, prefix=""):
    """Tensors under ``{prefix}wap/``; head count and modes go in ``wap/meta``."""
    cfg = params.config
    out = {f"{prefix}wap/{k}": v for k, v in params.tensors().items()}
    out[f"{prefix}wap/meta"] = np.array(
        [cfg.n_heads, _MODES.index(cfg.weight_mode), _AGGS.index(cfg.aggregation)], dtype=np.float64
    )
    return out


def from_checkpoint(tensors, prefix="") -> WapParams:
    key = f"{prefix}wap/"
    own = {k[len(key):]: v for k, v in tensors.items() if k.startswith(key)}
    if "meta" not in own:
        raise KeyError(f"no {key}meta tensor in checkpoint")
    heads, mode, agg = (int(round(x)) for x in own.pop("meta"))
    cfg = wap_config_from_tensors(own, heads, _MODES[mode], _AGGS[agg])
    return WapParams.from_tensors(cfg, own)


# ---------------------------------------------------------------------------
# input embedding
# ---------------------------------------------------------------------------


def _mask_index(mask):
    if mask is None:
        return np.zeros(0, dtype=np.int64)
    return np.asarray(sorted(mask), dtype=np.int64)


def embed_input(params: WapParams, x, mask=None):
    """Project frames, swap masked rows for the mask vector, add positions."""
    out, _ = _embed_forward(params, x, mask)
    return out


def _embed_forward(params, x, mask):
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0]
    if T > params.config.t_max:
        raise ValueError(f"sequence length {T} exceeds t_max {params.config.t_max}")
    h, c = nn.affine_forward(x, params["patch.W"], params["patch.b"])
    idx = _mask_index(mask)
    if idx.size:
        h[idx] = params["mask_embed"]
    return h + params["pos"][:T], (c, idx, T)


def _embed_backward(params, dx0, cache, grads):
    c, idx, T = cache
    dh = dx0.copy()
    if idx.size:
        grads["mask_embed"] = dh[idx].sum(axis=0)
        dh[idx] = 0.0
    else:
        grads["mask_embed"] = np.zeros_like(params["mask_embed"])
    _, grads["patch.W"], grads["patch.b"] = nn.affine_backward(dh, c)
    dpos = np.zeros_like(params["pos"])
    dpos[:T] = dx0
    grads["pos"] = dpos


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def _block_forward(v, pre, x, n_heads, eps):
    a, c_ln1 = nn.layer_norm_forward(x, v[pre + "ln1.g"], v[pre + "ln1.b"], eps)
    attn_p = {k: v[pre + "attn." + k] for k in nn.ATTENTION_KEYS}
    att, c_att = nn.multi_head_attention(a, attn_p, n_heads)
    x1 = x + att
    b, c_ln2 = nn.layer_norm_forward(x1, v[pre + "ln2.g"], v[pre + "ln2.b"], eps)
    h, c_f1 = nn.affine_forward(b, v[pre + "ff.W1"], v[pre + "ff.b1"])
    g, c_g = nn.gelu_forward(h)
    f, c_f2 = nn.affine_forward(g, v[pre + "ff.W2"], v[pre + "ff.b2"])
    return x1 + f, (c_ln1, c_att, c_ln2, c_f1, c_g, c_f2)


def _block_backward(pre, dy, cache, grads):
    c_ln1, c_att, c_ln2, c_f1, c_g, c_f2 = cache
    dg, grads[pre + "ff.W2"], grads[pre + "ff.b2"] = nn.affine_backward(dy, c_f2)
    dh = nn.gelu_backward(dg, c_g)
    db, grads[pre + "ff.W1"], grads[pre + "ff.b1"] = nn.affine_backward(dh, c_f1)
    dx1_ln, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = nn.layer_norm_backward(db, c_ln2)
    dx1 = dy + dx1_ln
    da, g_att = nn.multi_head_attention_backward(dx1, c_att)
    for k, g in g_att.items():
        grads[pre + "attn." + k] = g
    dx_ln, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = nn.layer_norm_backward(da, c_ln1)
    return dx1 + dx_ln


def _agg_forward(v, x, eps):
    u, c_ln = nn.layer_norm_forward(x, v["agg.ln.g"], v["agg.ln.b"], eps)
    h1, c1 = nn.affine_forward(u, v["agg.W1"], v["agg.b1"])
    g1, cg1 = nn.gelu_forward(h1)
    h2, c2 = nn.affine_forward(g1, v["agg.W2"], v["agg.b2"])
    g2, cg2 = nn.gelu_forward(h2)
    out, c3 = nn.affine_forward(g2, v["agg.W3"], v["agg.b3"])
    return x + out, (c_ln, c1, cg1, c2, cg2, c3)


def _agg_backward(dy, cache, grads):
    c_ln, c1, cg1, c2, cg2, c3 = cache
    dg2, grads["agg.W3"], grads["agg.b3"] = nn.affine_backward(dy, c3)
    dh2 = nn.gelu_backward(dg2, cg2)
    dg1, grads["agg.W2"], grads["agg.b2"] = nn.affine_backward(dh2, c2)
    dh1 = nn.gelu_backward(dg1, cg1)
    du, grads["agg.W1"], grads["agg.b1"] = nn.affine_backward(dh1, c1)
    dx, grads["agg.ln.g"], grads["agg.ln.b"] = nn.layer_norm_backward(du, c_ln)
    return dy + dx


def layer_mix(params: WapParams):
    """Normalised layer weights actually used for pooling."""
    w = params["layer_weights"]
    if params.config.weight_mode == "softmax":
        return nn.softmax_rows(w)
    return w.copy()


# ---------------------------------------------------------------------------
# full pass
# ---------------------------------------------------------------------------


class WapOutput(NamedTuple):
    z: np.ndarray
    pooled: np.ndarray
    layers: list
    cache: tuple


def forward(params: WapParams, x0) -> WapOutput:
    """Run the blocks on an embedded sequence ``x0`` (T x d_model)."""
    cfg = params.config
    v = params.values()
    layers, caches = [], []
    h = x0
    for l in range(cfg.n_layers):
        h, c = _block_forward(v, f"blocks.{l}.", h, cfg.n_heads, cfg.ln_eps)
        if not np.all(np.isfinite(h)):
            raise NonFiniteActivationError(f"non-finite activation in layer {l + 1}")
        layers.append(h)
        caches.append(c)
    agg_cache = None
    if cfg.aggregation == "pooled":
        top, agg_cache = _agg_forward(v, h, cfg.ln_eps)
        layers.append(top)
    mix = layer_mix(params)
    pooled = sum(w * X for w, X in zip(mix, layers))
    if cfg.aggregation == "post":
        z, agg_cache = _agg_forward(v, pooled, cfg.ln_eps)
    else:
        z = pooled
    if not np.all(np.isfinite(z)):
        raise NonFiniteActivationError("non-finite activation in aggregation block")
    return WapOutput(z, pooled, layers, (caches, agg_cache, mix))


def backward(params: WapParams, dz, out: WapOutput, grads=None):
    """Backpropagate ``dz`` through the blocks; returns (grads, dx0)."""
    cfg = params.config
    caches, agg_cache, mix = out.cache
    grads = {} if grads is None else grads
    if cfg.aggregation == "post":
        dpooled = _agg_backward(dz, agg_cache, grads)
    else:
        dpooled = dz
    dmix = np.array([np.sum(dpooled * X) for X in out.layers])
    if cfg.weight_mode == "softmax":
        grads["layer_weights"] = nn.softmax_rows_backward(dmix, mix)
    else:
        grads["layer_weights"] = dmix
    dlayers = [w * dpooled for w in mix]
    if cfg.aggregation == "pooled":
        dtop = dlayers.pop()
        dlayers[-1] = dlayers[-1] + _agg_backward(dtop, agg_cache, grads)
    dh = np.zeros_like(dpooled)
    for l in reversed(range(cfg.n_layers)):
        dh = _block_backward(f"blocks.{l}.", dh + dlayers[l], caches[l], grads)
    return grads, dh


class UtteranceOutput(NamedTuple):
    z: np.ndarray
    wap: WapOutput
    embed_cache: tuple


def forward_utterance(params: WapParams, x, mask=None) -> UtteranceOutput:
    x0, ec = _embed_forward(params, x, mask)
    out = forward(params, x0)
    return UtteranceOutput(out.z, out, ec)


def backward_utterance(params: WapParams, dz, out: UtteranceOutput):
    """Gradients of every parameter given the upstream gradient on Z."""
    grads, dx0 = backward(params, dz, out.wap)
    _embed_backward(params, dx0, out.embed_cache, grads)
    return grads


def encode(params: WapParams, x, mask=None):
    """Z for one utterance, no caches kept for the caller."""
    return forward_utterance(params, x, mask).z


def accumulate(params: WapParams, grads, scale=1.0):
    for k, g in grads.items():
        params.params[k].grad += scale * g


def trainable(params: WapParams):
    return list(params.params.values())
