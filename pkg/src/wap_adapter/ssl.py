"""Teacher-student adapter pretraining.

Each step masks ~40% of every utterance's frames, runs the student on the
masked sequence and the teacher on the clean one, and trains the student on a
blend of masked-frame reconstruction and pseudo-label cross-entropy against
the codebook. The teacher then follows the student by EMA and the codebook is
refreshed from the teacher embeddings.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import codebook as cb
from . import nn, wap
from .checkpoint import load_checkpoint, save_checkpoint, strip_prefix, with_prefix
from .codebook import Codebook, DistillConfig
from .wap import WapConfig, WapParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SslConfig:
    mask_ratio: float = 0.4
    ema: float = 0.999
    lambda_start: float = 1.0
    lambda_end: float = 0.5
    lambda_shape: str = "linear"  # or "cosine"
    batch_size: int = 96
    epochs: int = 100
    lr: float = 1e-4
    min_lr: float = 0.0
    clip_norm: Optional[float] = 5.0
    codebook_size: int = 1024
    warmup_batches: int = 2
    distill: DistillConfig = field(default_factory=DistillConfig)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema must lie in [0, 1)")
        if not (0.0 <= self.lambda_end <= self.lambda_start <= 1.0):
            raise ValueError("need 0 <= lambda_end <= lambda_start <= 1")
        if self.lambda_shape not in ("linear", "cosine"):
            raise ValueError(f"unknown lambda_shape {self.lambda_shape!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.warmup_batches < 1:
            raise ValueError("warmup_batches must be >= 1")

    @property
    def schedule(self):
        return nn.LrSchedule(self.lr, self.epochs, self.min_lr)


@dataclass
class BranchPair:
    student: WapParams
    teacher: WapParams

    @classmethod
    def from_student(cls, student: WapParams):
        return cls(student, student.copy())


# ---------------------------------------------------------------------------
# pieces of the objective
# ---------------------------------------------------------------------------


def mask_count(T, ratio):
    n = int(math.floor(ratio * T + 0.5))
    return min(max(n, 1), T - 1)


def sample_mask(T, ratio, rng):
    """Sorted positions to mask: round(ratio*T) clamped to [1, T-1]."""
    if T < 2:
        raise ValueError("sequence too short to mask")
    return np.sort(rng.choice(T, size=mask_count(T, ratio), replace=False))


def rec_loss(Zs, Zt, mask):
    """Mean squared L2 error on the masked rows; returns (loss, dZs)."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("empty mask")
    if Zs.shape != Zt.shape:
        raise ValueError("student and teacher outputs differ in shape")
    diff = Zs[mask] - Zt[mask]
    loss = float((diff * diff).sum() / mask.size)
    grad = np.zeros_like(Zs)
    grad[mask] = 2.0 * diff / mask.size
    return loss, grad


def ema_update(pair: BranchPair, alpha):
    """teacher <- alpha * teacher + (1 - alpha) * student, coordinate-wise."""
    for name, t in pair.teacher.params.items():
        s = pair.student.params[name].value
        t.value *= alpha
        t.value += (1.0 - alpha) * s


def lambda_schedule(epoch, total_epochs, start=1.0, end=0.5, shape="linear"):
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    frac = epoch / total_epochs
    if shape == "cosine":
        frac = 0.5 * (1.0 - math.cos(math.pi * frac))
    return start - (start - end) * frac


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------


class StepStats(NamedTuple):
    total: float
    rec: float
    pce: float
    assignments: np.ndarray


def _utterance_terms(x, mask, pair, codebook, distill, lam, scale):
    out = wap.forward_utterance(pair.student, x, mask)
    zt = wap.encode(pair.teacher, x)
    rec, drec = rec_loss(out.z, zt, mask)
    labels = cb.assign_batch(zt[mask], codebook)
    pce, dpce = cb.pce_loss(out.z[mask], labels, codebook, distill.temperature)
    dz = lam * drec
    dz[mask] += (1.0 - lam) * dpce
    grads = wap.backward_utterance(pair.student, dz * scale, out)
    return rec, pce, grads, zt


def ssl_step(batch, pair: BranchPair, codebook: Codebook, config: SslConfig, epoch, lr, rng,
             executor=None) -> StepStats:
    """One optimisation step on a list of T x D frame arrays."""
    if not batch:
        raise ValueError("empty batch")
    lam = lambda_schedule(epoch, config.epochs, config.lambda_start, config.lambda_end,
                          config.lambda_shape)
    masks = [sample_mask(len(x), config.mask_ratio, rng) for x in batch]
    scale = 1.0 / len(batch)

    def work(i):
        return _utterance_terms(batch[i], masks[i], pair, codebook, config.distill, lam, scale)

    if executor is None:
        results = [work(i) for i in range(len(batch))]
    else:
        results = list(executor.map(work, range(len(batch))))

    rec = pce = 0.0
    for r, p, grads, _ in results:
        rec += r * scale
        pce += p * scale
        wap.accumulate(pair.student, grads)
    params = wap.trainable(pair.student)
    nn.clip_grad_norm(params, config.clip_norm)
    for p in params:
        nn.adam_step(p, lr)
    ema_update(pair, config.ema)

    teacher_frames = np.concatenate([zt for *_, zt in results])
    labels = cb.update_batch(codebook, teacher_frames, config.distill)
    cb.reseed_dead(codebook, teacher_frames, config.distill.dead_threshold, rng)
    total = lam * rec + (1.0 - lam) * pce
    return StepStats(total, rec, pce, labels)


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------


class EpochStats(NamedTuple):
    epoch: int
    rec: float
    pce: float
    lam: float
    lr: float
    entropy: float

    def line(self):
        return (f"{self.epoch}\t{self.rec:.10g}\t{self.pce:.10g}\t{self.lam:.10g}"
                f"\t{self.lr:.10g}\t{self.entropy:.10g}")


@dataclass
class PretrainResult:
    pair: BranchPair
    codebook: Codebook
    history: list

    def log_text(self):
        return "epoch\trec\tpce\tlambda\tlr\tentropy\n" + "".join(
            s.line() + "\n" for s in self.history)


def _batches(order, size):
    return [order[i:i + size] for i in range(0, len(order), size)]


def _rngs(seed):
    init, data, mask, book = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4))
    return init, data, mask, book


def warmup_codebook(pair, frames, batches, config: SslConfig, rng) -> Codebook:
    pool = [wap.encode(pair.teacher, frames[i]) for b in batches[:config.warmup_batches] for i in b]
    return cb.init_codebook(config.codebook_size, np.concatenate(pool), rng)


def pretrain(frames, wap_config: WapConfig, config: SslConfig = SslConfig(), on_epoch=None
             ) -> PretrainResult:
    """Pretrain a student/teacher pair plus codebook on unlabelled sequences."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        raise ValueError("no sequences to pretrain on")
    init_rng, data_rng, mask_rng, book_rng = _rngs(config.seed)
    pair = BranchPair.from_student(wap.init_wap(wap_config, init_rng))
    executor = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    history = []
    codebook = None
    try:
        for epoch in range(config.epochs):
            batches = _batches(data_rng.permutation(len(frames)), config.batch_size)
            if codebook is None:
                codebook = warmup_codebook(pair, frames, batches, config, book_rng)
            lr = nn.cosine_lr(config.schedule, epoch)
            rec = pce = 0.0
            labels = []
            for b in batches:
                stats = ssl_step([frames[i] for i in b], pair, codebook, config, epoch, lr,
                                 mask_rng, executor)
                rec += stats.rec * len(b)
                pce += stats.pce * len(b)
                labels.append(stats.assignments)
            lam = lambda_schedule(epoch, config.epochs, config.lambda_start, config.lambda_end,
                                  config.lambda_shape)
            ent = cb.usage_entropy(np.concatenate(labels), codebook.size)
            es = EpochStats(epoch, rec / len(frames), pce / len(frames), lam, lr, ent)
            history.append(es)
            log.info("pretrain %s", es.line().replace("\t", " "))
            if on_epoch is not None:
                on_epoch(es)
    finally:
        if executor is not None:
            executor.shutdown()
    return PretrainResult(pair, codebook, history)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def pretrain_tensors(pair: BranchPair, codebook: Codebook):
    out = {}
    out.update(wap.to_checkpoint(pair.student, "student/"))
    out.update(wap.to_checkpoint(pair.teacher, "teacher/"))
    out.update(with_prefix("codebook/", codebook.tensors()))
    return out


def save_pretrain(path, result: PretrainResult):
    save_checkpoint(path, pretrain_tensors(result.pair, result.codebook))


def load_pretrain(path):
    """Return ``(BranchPair, Codebook)`` from a pretraining checkpoint."""
    tensors = load_checkpoint(path)
    pair = BranchPair(wap.from_checkpoint(tensors, "student/"), wap.from_checkpoint(tensors, "teacher/"))
    return pair, Codebook.from_tensors(strip_prefix("codebook/", tensors))
