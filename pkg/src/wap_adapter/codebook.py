"""Online local-attribute codebook.

Teacher frame embeddings are assigned to their nearest prototype (squared
Euclidean distance, lowest index wins ties) and the winning prototype moves
toward the embedding. The assignment index is the pseudo-label that the
student has to predict from cosine-similarity logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import softmax_rows

COS_EPS = 1e-8


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 0.1
    eta_mode: str = "count"  # "count": eta = 1 / (n + 1); "fixed": eta = fixed_eta
    fixed_eta: float = 0.05
    dead_threshold: int = 50

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.eta_mode not in ("count", "fixed"):
            raise ValueError(f"unknown eta_mode {self.eta_mode!r}")
        if not 0.0 < self.fixed_eta <= 1.0:
            raise ValueError("fixed_eta must lie in (0, 1]")
        if self.dead_threshold < 1:
            raise ValueError("dead_threshold must be >= 1")


@dataclass
class Codebook:
    prototypes: np.ndarray  # K x D
    counts: np.ndarray  # lifetime assignment counts since (re)seeding
    idle: np.ndarray  # consecutive batches without an assignment

    @property
    def size(self):
        return self.prototypes.shape[0]

    def copy(self):
        return Codebook(self.prototypes.copy(), self.counts.copy(), self.idle.copy())

    def tensors(self):
        return {"prototypes": self.prototypes.copy(), "counts": self.counts.astype(np.float64)}

    @classmethod
    def from_tensors(cls, tensors):
        protos = np.asarray(tensors["prototypes"], dtype=np.float64).copy()
        counts = np.asarray(tensors["counts"]).astype(np.int64)
        return cls(protos, counts, np.zeros(len(counts), dtype=np.int64))


class InsufficientWarmupError(ValueError):
    pass


def init_codebook(K, samples, rng) -> Codebook:
    """K distinct rows of ``samples`` drawn at random become the prototypes."""
    samples = np.asarray(samples, dtype=np.float64)
    if K < 2:
        raise ValueError("codebook needs K >= 2")
    if samples.shape[0] < K:
        raise InsufficientWarmupError(
            f"insufficient warm-up: {samples.shape[0]} samples for K={K}"
        )
    idx = rng.choice(samples.shape[0], size=K, replace=False)
    return Codebook(samples[idx].copy(), np.zeros(K, dtype=np.int64), np.zeros(K, dtype=np.int64))


def squared_distances(Z, P, chunk=4096):
    """Exact ||z - p||^2 for all pairs (no expansion, so exact ties stay ties)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    out = np.empty((Z.shape[0], P.shape[0]))
    for start in range(0, Z.shape[0], chunk):
        diff = Z[start:start + chunk, None, :] - P[None, :, :]
        out[start:start + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def assign(z, codebook: Codebook) -> int:
    return int(squared_distances(z, codebook.prototypes)[0].argmin())


def assign_batch(Z, codebook: Codebook):
    # argmin returns the first minimum, i.e. the lowest index on ties
    return squared_distances(Z, codebook.prototypes).argmin(axis=1)


def learning_rate(codebook: Codebook, index, config: DistillConfig):
    if config.eta_mode == "count":
        return 1.0 / (codebook.counts[index] + 1)
    return config.fixed_eta


def update_prototype(codebook: Codebook, z, index, config: DistillConfig = DistillConfig()):
    eta = learning_rate(codebook, index, config)
    p = codebook.prototypes[index]
    p += eta * (np.asarray(z, dtype=np.float64) - p)
    codebook.counts[index] += 1


def update_batch(codebook: Codebook, Z, config: DistillConfig = DistillConfig()):
    """Assign a batch against the current prototypes, then apply updates in order.

    Returns the assignments. Idle counters advance for prototypes that won nothing.
    """
    labels = assign_batch(Z, codebook)
    for z, k in zip(np.asarray(Z, dtype=np.float64), labels):
        update_prototype(codebook, z, k, config)
    used = np.zeros(codebook.size, dtype=bool)
    used[labels] = True
    codebook.idle[used] = 0
    codebook.idle[~used] += 1
    return labels


def reseed_dead(codebook: Codebook, recent, threshold, rng) -> int:
    """Replace prototypes idle for ``threshold`` batches with recent embeddings."""
    dead = np.flatnonzero(codebook.idle >= threshold)
    if dead.size == 0:
        return 0
    recent = np.asarray(recent, dtype=np.float64)
    pick = rng.choice(recent.shape[0], size=dead.size, replace=dead.size > recent.shape[0])
    codebook.prototypes[dead] = recent[pick]
    codebook.counts[dead] = 0
    codebook.idle[dead] = 0
    return int(dead.size)


def vq_loss(Z, codebook: Codebook) -> float:
    """Total squared quantisation error of ``Z`` under nearest assignment."""
    if len(Z) == 0:
        return 0.0
    return float(squared_distances(Z, codebook.prototypes).min(axis=1).sum())


def usage_entropy(labels, K) -> float:
    """Shannon entropy (nats) of the empirical assignment distribution."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=K).astype(np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# self-distillation
# ---------------------------------------------------------------------------


def _unit_rows(X):
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    safe = np.maximum(norms, COS_EPS)
    return X / safe, safe


def cosine_logits(Zs, codebook: Codebook, temperature):
    """cos(z, p_k) / temperature for each row of ``Zs`` (or a single vector)."""
    Zs = np.asarray(Zs, dtype=np.float64)
    single = Zs.ndim == 1
    u, _ = _unit_rows(np.atleast_2d(Zs))
    phat, _ = _unit_rows(codebook.prototypes)
    logits = u @ phat.T / temperature
    return logits[0] if single else logits


def pce_loss(Zs, labels, codebook: Codebook, temperature):
    """Mean cross-entropy of cosine logits against pseudo-labels.

    Returns ``(loss, dZs)``; prototypes are treated as constants.
    """
    Zs = np.asarray(Zs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m = Zs.shape[0]
    if m == 0:
        raise ValueError("empty mask: no positions to distil")
    u, norms = _unit_rows(Zs)
    phat, _ = _unit_rows(codebook.prototypes)
    cos = u @ phat.T
    logits = cos / temperature
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(m)
    loss = float((logsum - shifted[rows, labels]).mean())

    dlogits = softmax_rows(logits)
    dlogits[rows, labels] -= 1.0
    dcos = dlogits / (m * temperature)
    du = dcos @ phat
    # d(z/|z|) = (I - u u^T) / |z|; rows with |z| below eps were not normalised
    radial = (du * u).sum(axis=1, keepdims=True)
    dZ = (du - radial * u) / norms
    small = (np.linalg.norm(Zs, axis=1) < COS_EPS)
    if small.any():
        dZ[small] = du[small] / COS_EPS
    return loss, dZ

