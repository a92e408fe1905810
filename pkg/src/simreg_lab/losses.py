"""Cross-entropy, the similarity regularizer, and their softplus combination.

Graph builders (``*_expr``) take ``Expr`` embeddings/logits so the trainer can
differentiate through them; the plain functions take arrays and return
numbers.  Embeddings are ``[n, d]`` or batched ``[B, n, d]``; each sequence
in a batch is regularized on its own.

For token ``k`` with next-token label ``y_k`` the regularizer is::

    sr_k = LSE_{j in N_k}(s_kj / tau) - LSE_{j in P_k}(s_kj / tau)

where ``P_k`` holds positions sharing ``k``'s label (``k`` included), ``N_k``
the rest, and ``s`` is cosine similarity.  Tokens with an empty ``N_k`` get
``sr_k = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Expr


@dataclass
class SimRegConfig:
    tau: float = 0.01
    lam: float = 1.0
    chunks: int = 1
    capture_layer: int | None = None
    similarity: str = "cosine"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and >= 0")
        if self.chunks < 1:
            raise ValueError("chunk count must be >= 1")
        if self.similarity not in ("cosine", "inner"):
            raise ValueError("similarity must be 'cosine' or 'inner'")


@dataclass
class GroupIndex:
    positives: list[np.ndarray]
    negatives: list[np.ndarray]

    @property
    def pos_mask(self) -> np.ndarray:
        n = len(self.positives)
        m = np.zeros((n, n), dtype=bool)
        for k, p in enumerate(self.positives):
            m[k, p] = True
        return m


@dataclass
class LossBreakdown:
    ce: np.ndarray
    sr: np.ndarray
    softplus_sr: np.ndarray
    combined: np.ndarray
    lam: float
    means: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.means:
            self.means = {
                "ce": float(np.mean(self.ce)),
                "sr": float(np.mean(self.sr)),
                "softplus_sr": float(np.mean(self.softplus_sr)),
                "combined": float(np.mean(self.combined)),
            }


def softplus(x):
    """``log(1 + e^x)`` as ``max(x, 0) + log1p(exp(-|x|))``; safe for any finite x."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def combined_loss(ce_mean: float, sr_value: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return float(ce_mean) + lam * softplus(float(sr_value))


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------

def _check_labels(labels: np.ndarray, n_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")


def cross_entropy_expr(logits: Expr, labels) -> Expr:
    """Per-token ``-z_y + LSE(z)``; output has the label array's shape."""
    labels = np.asarray(labels, dtype=np.intp)
    _check_labels(labels, logits.shape[-1])
    picked = tc.take_along(logits, labels[..., None], axis=-1)[..., 0]
    return tc.logsumexp(logits, axis=-1) - picked


def cross_entropy(logits, labels) -> tuple[np.ndarray, float]:
    """Per-token losses and their mean."""
    logits = np.asarray(logits, dtype=np.float64)
    per = tc.evaluate(cross_entropy_expr(tc.constant(logits), labels))
    # rounding in the shifted form can leave -1e-16 for a dominant logit
    per = np.maximum(per, 0.0)
    return per, float(np.mean(per))


# ---------------------------------------------------------------------------
# groups and the regularizer
# ---------------------------------------------------------------------------

def build_groups(labels) -> GroupIndex:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("build_groups needs a nonempty 1-D label window")
    same = labels[:, None] == labels[None, :]
    idx = np.arange(labels.size)
    return GroupIndex([idx[row] for row in same], [idx[~row] for row in same])


def pair_masks(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positive and negative masks ``[..., n, n]`` for (batched) label windows."""
    pos = labels[..., :, None] == labels[..., None, :]
    return pos, ~pos


def _as_batch(E: Expr, labels: np.ndarray) -> tuple[Expr, np.ndarray, bool]:
    labels = np.asarray(labels)
    single = labels.ndim == 1
    if single:
        labels = labels[None, :]
        E = tc.reshape(E, (1,) + E.shape)
    if E.shape[:2] != labels.shape:
        raise ValueError(f"embeddings {E.shape} do not match labels {labels.shape}")
    return E, labels, single


def _simreg_masked(E: Expr, pos: np.ndarray, neg: np.ndarray, tau: float,
                   similarity: str, self_nonzero: np.ndarray | None) -> Expr:
    B, n, _ = E.shape
    if similarity == "inner":
        S = (E @ tc.transpose(E, (0, 2, 1))) / tau
    else:
        A = tc.normalize(E, axis=-1)
        S = (A @ tc.transpose(A, (0, 2, 1))) / tau
        # exact self-similarity, no gradient through the self entry
        eye = np.broadcast_to(np.eye(n, dtype=bool), (B, n, n))
        if self_nonzero is None:
            self_nonzero = np.ones((B, n), dtype=bool)
        S = tc.masked_fill(S, eye, np.where(eye & self_nonzero[..., :, None], 1.0 / tau, 0.0))
    has_neg = neg.any(axis=-1)
    lse_p = tc.logsumexp(S, axis=-1, mask=pos)
    lse_n = tc.logsumexp(S, axis=-1, mask=neg)
    return tc.masked_fill(lse_n - lse_p, ~has_neg, 0.0)


def simreg_tokens_expr(E: Expr, labels, tau: float, similarity: str = "cosine",
                       self_nonzero: np.ndarray | None = None) -> Expr:
    """Per-token regularizer values, shape ``[B, n]`` (``[n]`` for 2-D input).

    ``self_nonzero`` (bool ``[B, n]``) marks rows with nonzero norm; when
    omitted every row is assumed nonzero, which holds for RMS-normed model
    outputs.
    """
    E, labels, single = _as_batch(E, labels)
    pos, neg = pair_masks(labels)
    sr = _simreg_masked(E, pos, neg, tau, similarity, self_nonzero)
    return sr[0] if single else sr


def _nonzero_rows(E: np.ndarray) -> np.ndarray:
    return np.linalg.norm(E, axis=-1) > 0


def simreg_token(E, k: int, groups: GroupIndex, tau: float) -> float:
    """Regularizer value of token ``k`` for a single window ``[n, d]``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    E = np.asarray(E, dtype=np.float64)
    pos = groups.pos_mask
    neg = ~pos
    sr = _simreg_masked(tc.constant(E[None]), pos[None], neg[None], tau, "cosine", _nonzero_rows(E)[None])
    return float(tc.evaluate(sr)[0, k])


def simreg_sequence(E, labels, tau: float, similarity: str = "cosine") -> tuple[float, np.ndarray]:
    """Mean regularizer over the window and the per-token values."""
    E = np.asarray(E, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("need at least one token")
    nz = _nonzero_rows(E)
    per = tc.evaluate(simreg_tokens_expr(tc.constant(E), labels, tau, similarity,
                                         self_nonzero=nz if nz.ndim == 2 else nz[None]))
    return float(np.mean(per)), per


# ---------------------------------------------------------------------------
# chunk-wise form
# ---------------------------------------------------------------------------

def chunk_bounds(n: int, b: int) -> list[tuple[int, int]]:
    """Contiguous windows of about ``n/b`` tokens (earlier chunks take the remainder)."""
    if b < 1:
        raise ValueError("chunk count must be >= 1")
    if b > n:
        raise ValueError(f"cannot split {n} tokens into {b} chunks")
    sizes = [n // b + (1 if c < n % b else 0) for c in range(b)]
    edges = np.concatenate([[0], np.cumsum(sizes)])
    return [(int(edges[c]), int(edges[c + 1])) for c in range(b)]


def chunk_ratio(labels: np.ndarray) -> np.ndarray:
    """Share of negative pairs among all pairs in a window, per sequence."""
    pos, neg = pair_masks(labels)
    return neg.sum(axis=(-1, -2)) / float(labels.shape[-1] ** 2)


def pair_evaluations(n: int, b: int) -> int:
    """Pairwise similarity evaluations for one sequence split into ``b`` chunks."""
    return sum((hi - lo) ** 2 for lo, hi in chunk_bounds(n, b))


@dataclass
class SimRegTerms:
    """Graph pieces of the regularizer for one batch.

    ``per_token`` is ``[B, n]`` raw values; ``value`` is the chunk-weighted
    mean of raw values (the reported SR loss); ``penalty`` is the same
    weighting applied to per-token ``softplus(sr)`` (the trained term).
    """

    per_token: Expr
    value: Expr
    penalty: Expr
    pair_evals: int


def _weighted(per_chunk: list[Expr], weights: np.ndarray) -> Expr:
    total = weights.sum(axis=0)
    w = np.where(total > 0, weights / np.where(total > 0, total, 1.0), 0.0)
    out = per_chunk[0] * w[0]
    for c in range(1, len(per_chunk)):
        out = out + per_chunk[c] * w[c]
    return out


def simreg_terms(E: Expr, labels, cfg: SimRegConfig) -> SimRegTerms:
    """Build the regularizer graph for ``E`` ``[B, n, d]`` and labels ``[B, n]``."""
    E, labels, _ = _as_batch(E, labels)
    B, n, _ = E.shape
    bounds = chunk_bounds(n, cfg.chunks)
    pieces, raw_means, sp_means, ratios = [], [], [], []
    for lo, hi in bounds:
        sr = simreg_tokens_expr(E[:, lo:hi, :], labels[:, lo:hi], cfg.tau, cfg.similarity)
        pieces.append(sr)
        raw_means.append(tc.mean(sr, axis=-1))
        sp_means.append(tc.mean(tc.softplus(sr), axis=-1))
        ratios.append(chunk_ratio(labels[:, lo:hi]))
    if len(bounds) == 1:
        per_token = pieces[0]
        value = tc.mean(raw_means[0])
        penalty = tc.mean(sp_means[0])
    else:
        per_token = tc.concatenate(pieces, axis=-1)
        weights = np.stack(ratios)
        value = tc.mean(_weighted(raw_means, weights))
        penalty = tc.mean(_weighted(sp_means, weights))
    return SimRegTerms(per_token, value, penalty, B * pair_evaluations(n, cfg.chunks))


def simreg_chunked(E, labels, tau: float, b: int) -> float:
    """Chunk-weighted regularizer for one window ``[n, d]``.

    Chunk ``c`` gets weight ``r_c`` = share of negative pairs inside it; the
    result is ``sum_c r_c mean_c(sr) / sum_c r_c`` (0 if every ``r_c`` is 0).
    A single chunk returns :func:`simreg_sequence` unchanged.
    """
    E = np.asarray(E, dtype=np.float64)
    labels = np.asarray(labels)
    n = labels.shape[-1]
    bounds = chunk_bounds(n, b)
    if len(bounds) == 1:
        return simreg_sequence(E, labels, tau)[0]
    means, ratios = [], []
    for lo, hi in bounds:
        means.append(simreg_sequence(E[lo:hi], labels[lo:hi], tau)[0])
        ratios.append(float(chunk_ratio(labels[lo:hi])))
    total = sum(ratios)
    if total == 0:
        return 0.0
    return sum(r * m for r, m in zip(ratios, means)) / total


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

def loss_breakdown(logits, E, labels, cfg: SimRegConfig) -> LossBreakdown:
    """Per-token CE, regularizer, softplus and ``ce + lam * softplus(sr)``."""
    ce, _ = cross_entropy(logits, labels)
    E = np.asarray(E, dtype=np.float64)
    labels = np.asarray(labels)
    batched = labels.ndim == 2
    Eb = E if batched else E[None]
    lb = labels if batched else labels[None]
    per = []
    for lo, hi in chunk_bounds(lb.shape[-1], cfg.chunks):
        per.append(tc.evaluate(simreg_tokens_expr(tc.constant(Eb[:, lo:hi]), lb[:, lo:hi], cfg.tau,
                                                  cfg.similarity, self_nonzero=_nonzero_rows(Eb[:, lo:hi]))))
    sr = np.concatenate(per, axis=-1)
    if not batched:
        sr = sr[0]
    sp = softplus(sr)
    return LossBreakdown(ce=ce, sr=sr, softplus_sr=sp, combined=ce + cfg.lam * sp, lam=cfg.lam)
