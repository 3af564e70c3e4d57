"""Finite-difference checks for every hand-written backward pass.

Each check builds a small double-precision problem, computes the analytic
gradient and compares it with central differences through ``nn.grad_check``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import codebook as cb
from . import nn, sap, ssl, wap

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
# Deep composites have curvature large enough that the O(h^2) truncation term of
# a 1e-3 step shows up on small-gradient coordinates; 1e-4 keeps both that and
# float64 round-off well under tolerance.
COMPOSITE_STEP = 1e-4


class CheckResult(NamedTuple):
    name: str
    error: float
    tol: float

    @property
    def passed(self):
        return self.error < self.tol


def _run(name, loss_fn, tensors, grads, tol, sabotage, step=1e-3):
    if sabotage:
        grads = {k: -g for k, g in grads.items()}
    return CheckResult(name, nn.grad_check(loss_fn, tensors, grads, step=step), tol)


def check_affine(rng, sabotage=False):
    x, W, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
    R = rng.normal(size=(4, 3))

    def loss():
        return float((nn.affine_forward(x, W, b)[0] * R).sum())

    _, c = nn.affine_forward(x, W, b)
    dx, dW, db = nn.affine_backward(R, c)
    return _run("affine", loss, {"x": x, "W": W, "b": b}, {"x": dx, "W": dW, "b": db},
                PRIMITIVE_TOL, sabotage)


def check_layer_norm(rng, sabotage=False):
    x = rng.normal(size=(4, 6))
    g, b = 1.0 + 0.2 * rng.normal(size=6), 0.1 * rng.normal(size=6)
    R = rng.normal(size=(4, 6))

    def loss():
        return float((nn.layer_norm_forward(x, g, b)[0] * R).sum())

    _, c = nn.layer_norm_forward(x, g, b)
    dx, dg, db = nn.layer_norm_backward(R, c)
    return _run("layer_norm", loss, {"x": x, "g": g, "b": b}, {"x": dx, "g": dg, "b": db},
                PRIMITIVE_TOL, sabotage)


def check_softmax(rng, sabotage=False):
    x = rng.normal(size=(3, 5))
    R = rng.normal(size=(3, 5))

    def loss():
        return float((nn.softmax_rows(x) * R).sum())

    dx = nn.softmax_rows_backward(R, nn.softmax_rows(x))
    return _run("softmax", loss, {"x": x}, {"x": dx}, PRIMITIVE_TOL, sabotage)


def check_gelu(rng, sabotage=False):
    x = rng.normal(size=(3, 5)) * 2.0
    R = rng.normal(size=(3, 5))

    def loss():
        return float((nn.gelu_forward(x)[0] * R).sum())

    dx = nn.gelu_backward(R, nn.gelu_forward(x)[1])
    return _run("gelu", loss, {"x": x}, {"x": dx}, PRIMITIVE_TOL, sabotage)


def check_attention(rng, sabotage=False, T=3, D=8, H=2):
    x = rng.normal(size=(T, D))
    p = {k: rng.normal(0.0, 0.5, size=(D, D) if k.startswith("W") else D) for k in nn.ATTENTION_KEYS}
    R = rng.normal(size=(T, D))

    def loss():
        return float((nn.multi_head_attention(x, p, H)[0] * R).sum())

    _, c = nn.multi_head_attention(x, p, H)
    dx, grads = nn.multi_head_attention_backward(R, c)
    grads["x"] = dx
    return _run("attention", loss, {"x": x, **p}, grads, PRIMITIVE_TOL, sabotage)


def toy_wap(rng, T=6, D=16, d_in=5, **overrides):
    cfg = wap.WapConfig(d_in=d_in, d_model=D, n_layers=3, n_heads=2, d_ff=2 * D, t_max=T + 2,
                        init_std=0.3, **overrides)
    params = wap.init_wap(cfg, rng)
    # move gains, biases and layer weights off their symmetric init values
    for p in params.params.values():
        p.value += rng.normal(0.0, 0.1, size=p.shape)
    return params


def check_backbone_rec(rng, sabotage=False, T=6, D=16):
    """Full backbone forward plus masked reconstruction loss."""
    params = toy_wap(rng, T, D)
    x = rng.normal(size=(T, params.config.d_in))
    zt = rng.normal(size=(T, D))
    mask = np.array([1, 3, 4])

    def loss():
        return ssl.rec_loss(wap.encode(params, x, mask), zt, mask)[0]

    out = wap.forward_utterance(params, x, mask)
    _, dz = ssl.rec_loss(out.z, zt, mask)
    grads = wap.backward_utterance(params, dz, out)
    return _run("backbone+rec", loss, params.values(), grads, COMPOSITE_TOL, sabotage,
                step=COMPOSITE_STEP)


def check_pce(rng, sabotage=False):
    Z = rng.normal(size=(4, 6))
    book = cb.Codebook(rng.normal(size=(5, 6)), np.zeros(5, np.int64), np.zeros(5, np.int64))
    labels = rng.integers(0, 5, size=4)

    def loss():
        return cb.pce_loss(Z, labels, book, 0.5)[0]

    _, dZ = cb.pce_loss(Z, labels, book, 0.5)
    return _run("pseudo_ce", loss, {"Z": Z}, {"Z": dZ}, PRIMITIVE_TOL, sabotage)


def check_sap_head(rng, sabotage=False, mode="corrected", T=5, D=6, H=2, C=3):
    head = {k: p.value for k, p in sap.init_head(D, H, C, rng, std=0.5).items()}
    Z = rng.normal(size=(T, D))
    label = 1

    def loss():
        e = sap.utterance_embed(Z, head, mode)
        return sap.cross_entropy(sap.classify(e, head["clf/W"], head["clf/b"]), label)[0]

    e, cache = sap._head_embed_forward(Z, head, mode)
    _, dl = sap.cross_entropy(e @ head["clf/W"] + head["clf/b"], label)
    grads = {"clf/W": np.outer(e, dl), "clf/b": dl}
    grads["Z"] = sap._head_embed_backward(dl @ head["clf/W"].T, cache, mode, grads)
    return _run(f"sap_head[{mode}]", loss, {"Z": Z, **head}, grads, COMPOSITE_TOL, sabotage,
                step=COMPOSITE_STEP)


def run_all(seed=0, sabotage=False):
    rng = np.random.default_rng(seed)
    checks = [check_affine, check_layer_norm, check_softmax, check_gelu, check_attention,
              check_pce, check_backbone_rec]
    results = [fn(rng, sabotage) for fn in checks]
    results.append(check_sap_head(rng, sabotage, "corrected"))
    results.append(check_sap_head(rng, sabotage, "literal"))
    return results
