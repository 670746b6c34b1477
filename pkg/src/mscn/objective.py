"""Training objectives.

The triplet loss ranks each true pair above its hardest in-batch
negatives under a margin that adapts to the pair's own match score: pairs
the correction network trusts get the full margin, distrusted pairs get a
vanishing one.  The meta loss is plain binary cross-entropy on trusted
positive / constructed negative pairs and is what trains the correction
network.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ShapeMismatchError,
    Tensor,
    add,
    clamp,
    log,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    relu,
    row_max,
    scalar_mul,
    sigmoid,
    sub,
    transpose,
)
from .model import MainNetParams, MetaNetParams, all_pairs_scores, embed_image, embed_text, mscn_score, similarity_feature
from .purifier import SCORE_CLAMP_HI, SCORE_CLAMP_LO


def _check_margin_params(gamma: float, tau: float):
    if not gamma > 0:
        raise ValueError(f"margin base must be positive, got {gamma}")
    if not tau > 0:
        raise ValueError(f"margin sharpness must be positive, got {tau}")


def adaptive_margin(score, gamma: float, tau: float):
    """Per-pair margin gamma / (1 + (s/(1-s))^-tau).

    Computed as gamma * sigmoid(tau * (log s - log(1-s))), which is the
    same function on (0, 1) and stays on existing primitives.  Accepts a
    Tensor (elementwise) or a plain float; scores must be strictly inside
    (0, 1).
    """
    _check_margin_params(gamma, tau)
    s = score if isinstance(score, Tensor) else Tensor(float(score))
    if np.any(s.data <= 0.0) or np.any(s.data >= 1.0):
        raise ValueError("adaptive_margin: scores must lie strictly in (0, 1)")
    out = scalar_mul(gamma, sigmoid(scalar_mul(tau, sub(log(s), log(sub(1.0, s))))))
    return out if isinstance(score, Tensor) else out.item()


def hardest_negative_indices(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row and per-column argmax over the off-diagonal score matrix.

    Ties resolve to the lowest index.  Returns (hardest text per image,
    hardest image per text)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 2:
        raise ShapeMismatchError("hardest_negative_indices", s.shape)
    masked = s + np.where(np.eye(s.shape[0], dtype=bool), -2.0 - np.abs(s).max(), 0.0)
    return np.argmax(masked, axis=1), np.argmax(masked, axis=0)


def per_pair_hinges(scores: Tensor, gamma: float, tau: float,
                    adaptive: bool = True, clamp_scores: bool = True) -> Tensor:
    """Two-sided hinge loss per true pair, given the full score matrix.

    scores: (n, n) with true pairs on the diagonal.  Scores are clamped to
    the shared rails first (probability scorers only; disable for scorers
    with other ranges, e.g. cosine)."""
    _check_margin_params(gamma, tau)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeMismatchError("per_pair_hinges", scores.shape)
    n = scores.shape[0]
    if n < 2:
        raise ValueError("per_pair_hinges: need at least 2 pairs for negatives")
    s = clamp(scores, SCORE_CLAMP_LO, SCORE_CLAMP_HI) if clamp_scores else scores
    eye = np.eye(n)
    diag = reduce_sum(mul(s, Tensor(eye)), axis=1)
    if adaptive:
        margin = adaptive_margin(diag, gamma, tau)
    else:
        margin = Tensor(np.full(n, gamma))
    # push the diagonal far below any real score so argmax never picks it
    off = add(s, Tensor(eye * (-2.0 - float(np.abs(s.data).max()))))
    text_neg, _ = row_max(off)
    img_neg, _ = row_max(transpose(off))
    gap = sub(margin, diag)
    return add(relu(add(gap, text_neg)), relu(add(gap, img_neg)))


def triplet_loss_from_scores(scores: Tensor, gamma: float, tau: float,
                             adaptive: bool = True,
                             clamp_scores: bool = True) -> Tensor:
    """Sum of the per-pair hinges over the batch."""
    return reduce_sum(per_pair_hinges(scores, gamma, tau, adaptive=adaptive,
                                      clamp_scores=clamp_scores))


def triplet_loss(images, texts, main: MainNetParams, meta: MetaNetParams,
                 gamma: float, tau: float, adaptive: bool = True) -> Tensor:
    """Ranking loss of a batch of aligned pairs under one network pair."""
    imgs = images if isinstance(images, Tensor) else Tensor(images)
    txts = texts if isinstance(texts, Tensor) else Tensor(texts)
    if imgs.ndim != 2 or txts.ndim != 2 or imgs.shape[0] != txts.shape[0]:
        raise ShapeMismatchError("triplet_loss", imgs.shape, txts.shape)
    scores, _ = all_pairs_scores(imgs, txts, main, meta)
    return triplet_loss_from_scores(scores, gamma, tau, adaptive=adaptive)


def meta_loss(images, texts, labels, main: MainNetParams, meta: MetaNetParams,
              negative_term: bool = True) -> Tensor:
    """Mean binary cross-entropy of correction scores on labeled pairs.

    labels: 1 for trusted positives, 0 for constructed negatives.  With
    negative_term=False only the positive half -y*log(s) is kept (the
    ablated form); default is the full BCE.
    """
    imgs = images if isinstance(images, Tensor) else Tensor(images)
    txts = texts if isinstance(texts, Tensor) else Tensor(texts)
    y = np.asarray(labels, dtype=np.float64)
    if imgs.ndim != 2 or txts.ndim != 2 or imgs.shape[0] != txts.shape[0]:
        raise ShapeMismatchError("meta_loss", imgs.shape, txts.shape)
    if y.shape != (imgs.shape[0],):
        raise ShapeMismatchError("meta_loss", y.shape, (imgs.shape[0],))
    if y.size == 0:
        raise ValueError("meta_loss: empty batch")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("meta_loss: labels must be 0 or 1")
    u = embed_image(imgs, main)
    v = embed_text(txts, main)
    s = mscn_score(similarity_feature(u, v, main.sim_w), meta)
    s = clamp(s, SCORE_CLAMP_LO, SCORE_CLAMP_HI)
    ll = mul(Tensor(y), log(s))
    if negative_term:
        ll = add(ll, mul(Tensor(1.0 - y), log(sub(1.0, s))))
    return neg(reduce_mean(ll))
