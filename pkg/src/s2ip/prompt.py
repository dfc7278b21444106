"""Semantic anchors and prefix prompting.

A trainable linear map compresses a (large) reference embedding matrix into
a small bank of anchor vectors. Window embeddings are scored against every
anchor by cosine similarity; the top-K anchors are prepended to the patch
sequence, and the sum of the selected cosines doubles as a differentiable
alignment bonus in the training objective. The discrete selection itself
carries no gradient (straight-through): indices are fixed, scores stay
differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEGENERATE_NORM = 1e-12

_degenerate_events = 0


def degenerate_score_events() -> int:
    """How many cosine scores were forced to 0 because a pooled embedding or
    anchor had (numerically) zero norm."""
    return _degenerate_events


def reset_degenerate_score_events() -> None:
    global _degenerate_events
    _degenerate_events = 0


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Reference vocabulary embeddings, one row per entry."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1:
            raise PromptError(f"embedding matrix must be (V, D) with V >= 1, "
                              f"got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise PromptError("embedding matrix contains non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def vocab_size(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


class AnchorBank:
    """Trainable compression of an embedding matrix into a few anchors.

    ``map_weights`` is a (V', V) tensor; the anchors are map_weights @ E and
    are re-derived whenever needed so they track the trained map.
    """

    def __init__(self, embedding: EmbeddingMatrix, n_anchors: int,
                 rng: np.random.Generator | None = None,
                 map_weights: np.ndarray | None = None):
        if n_anchors < 1:
            raise PromptError("need at least one anchor")
        if n_anchors > embedding.vocab_size // 2:
            raise PromptError(f"n_anchors must be << vocab size (at most "
                              f"{embedding.vocab_size // 2}), got {n_anchors}")
        self.embedding = embedding
        self.n_anchors = n_anchors
        if map_weights is None:
            rng = rng or np.random.default_rng(0)
            map_weights = rng.normal(0.0, 0.02,
                                     size=(n_anchors, embedding.vocab_size))
        map_weights = np.asarray(map_weights, dtype=np.float64)
        if map_weights.shape != (n_anchors, embedding.vocab_size):
            raise PromptError(f"map_weights must be ({n_anchors}, "
                              f"{embedding.vocab_size}), got {map_weights.shape}")
        self.map_weights = Tensor(map_weights, requires_grad=True)

    def anchors_tensor(self) -> Tensor:
        return derive_anchors(self.embedding, self.map_weights)

    def anchors(self) -> np.ndarray:
        return self.map_weights.data @ self.embedding.values


def derive_anchors(embedding: EmbeddingMatrix, map_weights: Tensor) -> Tensor:
    """Anchors = map_weights @ E, on the tape so the map can train."""
    if map_weights.shape[1] != embedding.vocab_size:
        raise ad.ShapeError(f"map_weights width {map_weights.shape[1]} != vocab "
                            f"size {embedding.vocab_size}")
    return ad.matmul(map_weights, Tensor(embedding.values))


@dataclass(frozen=True)
class PromptSelection:
    """Top-K anchor indices in descending score order (ties broken by lower
    index), with the matching cosine scores."""

    indices: tuple[int, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.scores):
            raise PromptError("indices and scores length mismatch")
        if len(set(self.indices)) != len(self.indices):
            raise PromptError("selection contains duplicate indices")
        for a, b in zip(self.scores, self.scores[1:]):
            if b > a + 1e-12:
                raise PromptError("scores must be non-increasing")

    @property
    def k(self) -> int:
        return len(self.indices)


def _pooled(ts_embed: np.ndarray) -> np.ndarray:
    ts_embed = np.asarray(ts_embed, dtype=np.float64)
    if ts_embed.ndim != 2:
        raise PromptError(f"expected an (N_P, D) embedding, got {ts_embed.shape}")
    return ts_embed.mean(axis=0)


def pool_and_score(ts_embed: np.ndarray, anchor: np.ndarray) -> float:
    """Cosine similarity between the mean-pooled window embedding and one
    anchor; 0 (flagged) when either side is numerically zero."""
    global _degenerate_events
    pooled = _pooled(ts_embed)
    anchor = np.asarray(anchor, dtype=np.float64)
    np_norm = float(np.linalg.norm(pooled))
    a_norm = float(np.linalg.norm(anchor))
    if np_norm < DEGENERATE_NORM or a_norm < DEGENERATE_NORM:
        _degenerate_events += 1
        return 0.0
    return float(pooled @ anchor / (np_norm * a_norm))


def score_all(ts_embed: np.ndarray, anchors: np.ndarray,
              pooling: str = "mean") -> np.ndarray:
    """Cosine score of the window embedding against every anchor row."""
    global _degenerate_events
    anchors = np.asarray(anchors, dtype=np.float64)
    anchor_norms = np.linalg.norm(anchors, axis=1)
    safe_anchor = np.where(anchor_norms < DEGENERATE_NORM, 1.0, anchor_norms)
    if pooling == "mean":
        pooled = _pooled(ts_embed)
        p_norm = np.linalg.norm(pooled)
        if p_norm < DEGENERATE_NORM:
            _degenerate_events += 1
            return np.zeros(anchors.shape[0])
        scores = anchors @ pooled / (safe_anchor * p_norm)
    elif pooling == "per_patch":
        rows = np.asarray(ts_embed, dtype=np.float64)
        row_norms = np.linalg.norm(rows, axis=1, keepdims=True)
        safe_rows = np.where(row_norms < DEGENERATE_NORM, 1.0, row_norms)
        cosines = (rows / safe_rows) @ (anchors / safe_anchor[:, None]).T
        cosines = np.where(row_norms < DEGENERATE_NORM, 0.0, cosines)
        scores = cosines.mean(axis=0)
    else:
        raise PromptError(f"unknown pooling mode {pooling!r}")
    degenerate = anchor_norms < DEGENERATE_NORM
    if degenerate.any():
        _degenerate_events += int(degenerate.sum())
        scores = np.where(degenerate, 0.0, scores)
    return scores


def retrieve_topk(ts_embed: np.ndarray, bank: AnchorBank, k: int,
                  pooling: str = "mean") -> PromptSelection:
    """Score every anchor and keep the k best, lower index first on ties."""
    if not 1 <= k <= bank.n_anchors:
        raise PromptError(f"k must lie in [1, {bank.n_anchors}], got {k}")
    scores = score_all(ts_embed, bank.anchors(), pooling=pooling)
    # stable sort on negated scores: equal scores keep ascending index order
    order = np.argsort(-scores, kind="stable")[:k]
    return PromptSelection(indices=tuple(int(i) for i in order),
                           scores=tuple(float(scores[i]) for i in order))


def prefix_concat(selected_anchors: Tensor, ts_embed: Tensor) -> Tensor:
    """Prepend the selected anchor rows (score order) to the patch rows."""
    if selected_anchors.ndim == 2 and selected_anchors.shape[0] == 0:
        return ts_embed
    if selected_anchors.shape[-1] != ts_embed.shape[-1]:
        raise ad.ShapeError(f"anchor width {selected_anchors.shape[-1]} != "
                            f"embedding width {ts_embed.shape[-1]}")
    return ad.concat([selected_anchors, ts_embed], axis=0)


def _cosine_rows(rows: Tensor, pooled: Tensor) -> Tensor:
    """Differentiable cosine of each row of ``rows`` against ``pooled``."""
    d = pooled.shape[0]
    num = ad.matmul(rows, ad.reshape(pooled, (d, 1)))        # (K, 1)
    row_sq = ad.tsum(ad.mul(rows, rows), axis=1, keepdims=True)
    pooled_sq = ad.tsum(ad.mul(pooled, pooled))
    denom = ad.mul(ad.sqrt(row_sq), ad.sqrt(pooled_sq))
    return ad.div(num, denom)


def alignment_term(ts_embed: Tensor, selection: PromptSelection,
                   bank: AnchorBank, pooling: str = "mean",
                   anchors: Tensor | None = None) -> Tensor:
    """Sum of the selected anchors' scores, as a differentiable scalar.

    Gradients flow into the window embedding and the anchor map, never into
    the discrete index choice. Bounded in [-K, K]. A pre-derived ``anchors``
    tensor may be passed to share one derivation across a batch.
    """
    if selection.k == 0:
        return Tensor(0.0)
    if max(selection.indices) >= bank.n_anchors:
        raise PromptError("selection indices exceed the anchor bank")
    if anchors is None:
        anchors = bank.anchors_tensor()
    selected = ad.gather_rows(anchors, list(selection.indices))
    if pooling == "mean":
        pooled = ad.tmean(ts_embed, axis=0)
        return ad.tsum(_cosine_rows(selected, pooled))
    if pooling == "per_patch":
        n_patches = ts_embed.shape[0]
        num = ad.matmul(ts_embed, ad.transpose(selected))     # (N_P, K)
        row_norm = ad.sqrt(ad.tsum(ad.mul(ts_embed, ts_embed), axis=1,
                                   keepdims=True))            # (N_P, 1)
        ones_row = Tensor(np.ones((1, selection.k)))
        row_norms = ad.matmul(row_norm, ones_row)             # (N_P, K)
        anchor_norm = ad.sqrt(ad.tsum(ad.mul(selected, selected), axis=1))
        cosines = ad.div(ad.div(num, row_norms), anchor_norm)
        return ad.tsum(ad.tmean(cosines, axis=0))
    raise PromptError(f"unknown pooling mode {pooling!r}")


def clustered_vocabulary(vocab_size: int, dim: int, n_clusters: int = 8,
                         seed: int = 0, spread: float = 0.1) -> EmbeddingMatrix:
    """Synthetic vocabulary: a Gaussian mixture with ``n_clusters`` centers,
    for tests and the self-contained harness."""
    if vocab_size < 1 or dim < 1 or n_clusters < 1:
        raise PromptError("vocab_size, dim, and n_clusters must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(n_clusters, dim))
    assignments = rng.integers(0, n_clusters, size=vocab_size)
    points = centers[assignments] + rng.normal(0.0, spread, size=(vocab_size, dim))
    return EmbeddingMatrix(points)
