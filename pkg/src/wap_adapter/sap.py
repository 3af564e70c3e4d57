"""Statistical attentive pooling head and emotion fine-tuning.

The adapter output Z (T x D) is scored per frame by a 1x1 convolution into H
attention heads, softmaxed over time, and reduced to attention-weighted means
and variances. Both statistics are flattened, L2-normalised and concatenated
(mean first) before a linear classifier.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import metrics, nn, wap
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import Param
from .ssl import mask_count
from .wap import WapConfig, WapParams

log = logging.getLogger(__name__)

NORM_EPS = 1e-8
VARIANCE_MODES = ("corrected", "literal")


# ---------------------------------------------------------------------------
# pooling primitives
# ---------------------------------------------------------------------------


def sap_attention(Z, W, b):
    """T x H attention map; every column sums to one over time."""
    scores, _ = nn.affine_forward(Z, W, b)
    return nn.softmax_rows(scores.T).T


def stat_pool(Z, A, mode="corrected"):
    """Attention-weighted first and second order statistics, each D x H.

    ``corrected``: var = sum_t A_t z_t^2 - mu^2, a proper weighted variance.
    ``literal``:  var = sum_t A_t^2 z_t^2 - mu^2, squaring the weights as the
    compact matrix form does; with softmax weights this can go negative.
    Negative values are clamped to zero here.
    """
    mu = Z.T @ A
    second = (Z * Z).T @ (A if mode == "corrected" else A * A)
    return mu, np.maximum(second - mu * mu, 0.0)


def _l2_normalise(v):
    r = np.sqrt(v @ v + NORM_EPS * NORM_EPS)
    return v / r, r


def _l2_normalise_backward(du, v, r):
    return du / r - v * (v @ du) / r ** 3


def utterance_embed(Z, head, mode="corrected"):
    e, _ = _head_embed_forward(Z, head, mode)
    return e


def classify(embed, W, b):
    embed = np.asarray(embed, dtype=np.float64)
    if embed.shape[-1] != W.shape[0]:
        raise ValueError(f"embedding dim {embed.shape[-1]} != classifier input {W.shape[0]}")
    return embed @ W + b


def _head_embed_forward(Z, head, mode):
    scores, c_att = nn.affine_forward(Z, head["sap/W"], head["sap/b"])
    A = nn.softmax_rows(scores.T).T
    mu = Z.T @ A
    Aw = A if mode == "corrected" else A * A
    Z2 = Z * Z
    raw = Z2.T @ Aw - mu * mu
    var = np.maximum(raw, 0.0)
    vm, vv = mu.reshape(-1), var.reshape(-1)
    um, rm = _l2_normalise(vm)
    uv, rv = _l2_normalise(vv)
    e = np.concatenate([um, uv])
    return e, (Z, Z2, A, Aw, mu, raw, vm, rm, vv, rv, c_att)


def _head_embed_backward(de, cache, mode, grads):
    Z, Z2, A, Aw, mu, raw, vm, rm, vv, rv, c_att = cache
    D, H = mu.shape
    n = D * H
    dmu = _l2_normalise_backward(de[:n], vm, rm).reshape(D, H)
    dvar = _l2_normalise_backward(de[n:], vv, rv).reshape(D, H)
    dvar = dvar * (raw > 0)
    # var = Z2^T Aw - mu*mu ; mu = Z^T A
    dmu = dmu - 2.0 * mu * dvar
    dAw = Z2 @ dvar
    dZ = 2.0 * Z * (Aw @ dvar.T) + A @ dmu.T
    dA = Z @ dmu + (dAw if mode == "corrected" else 2.0 * A * dAw)
    dscores = nn.softmax_rows_backward(dA.T, A.T).T
    dZ_att, grads["sap/W"], grads["sap/b"] = nn.affine_backward(dscores, c_att)
    return dZ + dZ_att


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def init_head(d_model, heads, num_classes, rng, std=0.02):
    return {
        "sap/W": Param(rng.normal(0.0, std, size=(d_model, heads))),
        "sap/b": Param(np.zeros(heads)),
        "clf/W": Param(rng.normal(0.0, std, size=(2 * d_model * heads, num_classes))),
        "clf/b": Param(np.zeros(num_classes)),
    }


@dataclass
class SerModel:
    adapter: WapParams
    head: dict
    variance_mode: str = "corrected"

    def __post_init__(self):
        if self.variance_mode not in VARIANCE_MODES:
            raise ValueError(f"unknown variance_mode {self.variance_mode!r}")

    @property
    def num_classes(self):
        return self.head["clf/b"].shape[0]

    def values(self):
        return {k: p.value for k, p in self.head.items()}

    def embed(self, frames, mask=None):
        z = wap.encode(self.adapter, frames, mask)
        return utterance_embed(z, self.values(), self.variance_mode)

    def logits(self, frames, mask=None):
        h = self.values()
        return classify(self.embed(frames, mask), h["clf/W"], h["clf/b"])

    def predict(self, seqs):
        return np.array([int(self.logits(_frames(s)).argmax()) for s in seqs], dtype=np.int64)

    def copy(self):
        return SerModel(self.adapter.copy(), {k: p.copy() for k, p in self.head.items()},
                        self.variance_mode)

    def tensors(self):
        out = wap.to_checkpoint(self.adapter)
        out.update({k: p.value.copy() for k, p in self.head.items()})
        out["sap/meta"] = np.array([VARIANCE_MODES.index(self.variance_mode)], dtype=np.float64)
        return out

    @classmethod
    def from_tensors(cls, tensors):
        adapter = wap.from_checkpoint(tensors)
        head = {k: Param(np.asarray(tensors[k], dtype=np.float64).copy())
                for k in ("sap/W", "sap/b", "clf/W", "clf/b")}
        mode = VARIANCE_MODES[int(round(tensors["sap/meta"][0]))] if "sap/meta" in tensors else "corrected"
        return cls(adapter, head, mode)

    def save(self, path):
        save_checkpoint(path, self.tensors())

    @classmethod
    def load(cls, path):
        return cls.from_tensors(load_checkpoint(path))


def _frames(s):
    return np.asarray(getattr(s, "frames", s), dtype=np.float64)


def cross_entropy(logits, label):
    """Loss and gradient w.r.t. logits for one example."""
    shifted = logits - logits.max()
    logz = np.log(np.exp(shifted).sum())
    grad = np.exp(shifted - logz)
    grad[label] -= 1.0
    return float(logz - shifted[label]), grad


def utterance_loss_and_grads(model: SerModel, frames, label, mask=None, train_adapter=True):
    """Cross-entropy for one utterance with gradients for head and (optionally) adapter."""
    h = model.values()
    out = wap.forward_utterance(model.adapter, frames, mask)
    e, cache = _head_embed_forward(out.z, h, model.variance_mode)
    logits = e @ h["clf/W"] + h["clf/b"]
    loss, dlogits = cross_entropy(logits, label)
    grads = {"clf/W": np.outer(e, dlogits), "clf/b": dlogits}
    dz = _head_embed_backward(dlogits @ h["clf/W"].T, cache, model.variance_mode, grads)
    adapter_grads = wap.backward_utterance(model.adapter, dz, out) if train_adapter else {}
    return loss, grads, adapter_grads


# ---------------------------------------------------------------------------
# minority-class augmentation
# ---------------------------------------------------------------------------


class TrainItem(NamedTuple):
    frames: np.ndarray
    label: int
    mask: Optional[np.ndarray] = None
    source: int = -1


def augment_minority(items, ratio, rng, target=None):
    """Oversample minority classes with masked copies until counts are equal.

    Originals are returned unchanged, followed by the masked copies. Copies
    keep the source frames and carry ``round(ratio * T)`` mask positions that
    are filled with the mask embedding inside the adapter.
    """
    labels = np.array([it.label for it in items], dtype=np.int64)
    if labels.size == 0:
        return list(items)
    counts = np.bincount(labels)
    goal = counts.max() if target is None else max(int(target), counts.max())
    out = list(items)
    for c in range(len(counts)):
        members = np.flatnonzero(labels == c)
        need = goal - counts[c]
        if need <= 0 or members.size == 0:
            continue
        order = rng.permutation(members)
        for j in range(need):
            src = int(order[j % members.size])
            T = len(items[src].frames)
            n = mask_count(T, ratio) if T >= 2 else 0
            mask = np.sort(rng.choice(T, size=n, replace=False))
            out.append(TrainItem(items[src].frames, int(c), mask, src))
    return out


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    num_classes: int = 4
    heads: int = 4
    batch_size: int = 96
    epochs: int = 100
    lr: float = 1e-4
    min_lr: float = 0.0
    clip_norm: Optional[float] = 5.0
    augment: bool = True
    aug_ratio: float = 0.15
    freeze: str = "none"  # "none": adapter + head train; "head": only SAP + classifier train
    variance_mode: str = "corrected"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 < self.aug_ratio < 1.0:
            raise ValueError("aug_ratio must lie in (0, 1)")
        if self.freeze not in ("none", "head"):
            raise ValueError(f"unknown freeze policy {self.freeze!r}")
        if self.variance_mode not in VARIANCE_MODES:
            raise ValueError(f"unknown variance_mode {self.variance_mode!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.heads < 1:
            raise ValueError("batch_size, epochs and heads must be >= 1")

    @property
    def schedule(self):
        return nn.LrSchedule(self.lr, self.epochs, self.min_lr)


class FinetuneEpoch(NamedTuple):
    epoch: int
    train_ce: float
    val_ua: float
    val_wa: float
    val_f1: float

    def line(self):
        return (f"{self.epoch}\t{self.train_ce:.10g}\t{self.val_ua:.10g}"
                f"\t{self.val_wa:.10g}\t{self.val_f1:.10g}")


@dataclass
class FinetuneResult:
    model: SerModel
    history: list = field(default_factory=list)
    best_epoch: int = -1

    def log_text(self):
        return "epoch\ttrain_ce\tval_UA\tval_WA\tval_F1\n" + "".join(
            h.line() + "\n" for h in self.history) + f"# best_epoch\t{self.best_epoch}\n"


def evaluate(model: SerModel, seqs, num_classes=None):
    true = np.array([s.label for s in seqs], dtype=np.int64)
    pred = model.predict(seqs)
    cm = metrics.confusion(true, pred, num_classes or model.num_classes)
    return cm, metrics.scores(cm)


def finetune(adapter: Optional[WapParams], train, val, config: FinetuneConfig = FinetuneConfig(),
             wap_config: Optional[WapConfig] = None, on_epoch=None) -> FinetuneResult:
    """Train adapter + SAP + classifier with cross-entropy; keep the best-UA epoch.

    ``adapter=None`` starts from a randomly initialised adapter built from
    ``wap_config`` (the no-pretraining baseline). The adapter passed in is not
    modified.
    """
    init_rng, data_rng, aug_rng = (np.random.default_rng(s)
                                   for s in np.random.SeedSequence(config.seed).spawn(3))
    if adapter is None:
        if wap_config is None:
            raise ValueError("wap_config is required when no adapter is given")
        adapter = wap.init_wap(wap_config, init_rng)
    else:
        adapter = adapter.copy()
    model = SerModel(adapter, init_head(adapter.config.d_model, config.heads, config.num_classes,
                                        init_rng), config.variance_mode)
    train_adapter = config.freeze == "none"
    params = list(model.head.values()) + (wap.trainable(model.adapter) if train_adapter else [])

    items = [TrainItem(_frames(s), int(s.label), None, i) for i, s in enumerate(train)]
    if config.augment:
        items = augment_minority(items, config.aug_ratio, aug_rng)

    executor = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    result = FinetuneResult(model.copy())
    best_ua = -1.0
    try:
        for epoch in range(config.epochs):
            lr = nn.cosine_lr(config.schedule, epoch)
            order = data_rng.permutation(len(items))
            total_ce = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = [items[i] for i in order[start:start + config.batch_size]]
                scale = 1.0 / len(batch)

                def work(it):
                    return utterance_loss_and_grads(model, it.frames, it.label, it.mask, train_adapter)

                outs = list(executor.map(work, batch)) if executor else [work(it) for it in batch]
                for loss, hg, ag in outs:
                    total_ce += loss
                    for k, g in hg.items():
                        model.head[k].grad += scale * g
                    wap.accumulate(model.adapter, ag, scale)
                nn.clip_grad_norm(params, config.clip_norm)
                for p in params:
                    nn.adam_step(p, lr)
            _, sc = evaluate(model, val, config.num_classes)
            row = FinetuneEpoch(epoch, total_ce / len(items), sc["UA"], sc["WA"], sc["F1"])
            result.history.append(row)
            log.info("finetune %s", row.line().replace("\t", " "))
            if on_epoch is not None:
                on_epoch(row)
            if sc["UA"] > best_ua:
                best_ua = sc["UA"]
                result.model = model.copy()
                result.best_epoch = epoch
    finally:
        if executor is not None:
            executor.shutdown()
    return result
