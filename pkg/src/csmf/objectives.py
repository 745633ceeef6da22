"""Negative assembly, sampled softmax loss and the cross-stage adaptive
margin loss.

Loss functions operate on scores, not on parameters: they return the loss
and its gradient with respect to every score, and the caller chains that
into the towers.  All of them accept a single example (``s_pos`` scalar,
``s_negs`` 1-d) or a batch (``s_pos`` shape (B,), ``s_negs`` shape (B, K))
with an optional boolean ``mask`` marking real negatives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, SamplingError, ShapeError
from .numerics import RngStream
from .stagenet import Stage

REQUIRED_SEPARATION = "required_separation"
PAPER_LITERAL = "paper_literal"


@dataclass(frozen=True)
class MarginConfig:
    sigma: float = 0.1
    eta: float = 1.8
    application: str = REQUIRED_SEPARATION

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.eta < 1:
            raise ConfigError("eta must be >= 1")
        if self.application not in (REQUIRED_SEPARATION, PAPER_LITERAL):
            raise ConfigError(f"unknown margin application {self.application!r}")


def _prep(s_pos, s_negs, mask):
    s_pos = np.asarray(s_pos, dtype=np.float64)
    s_negs = np.asarray(s_negs, dtype=np.float64)
    if s_negs.shape[:-1] != s_pos.shape:
        raise ShapeError(f"s_pos shape {s_pos.shape} does not match s_negs {s_negs.shape}")
    if mask is None:
        mask = np.ones(s_negs.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != s_negs.shape:
            raise ShapeError("mask must match s_negs")
    if not (np.all(np.isfinite(s_pos)) and np.all(np.isfinite(s_negs[mask]))):
        raise NumericError("non-finite score")
    return s_pos, s_negs, mask


def _softmax_ce(pos_logit, neg_logits, mask):
    """-log(e^p / (e^p + sum e^n)) with max subtraction; grads w.r.t. logits."""
    neg = np.where(mask, neg_logits, -np.inf)
    top = np.maximum(pos_logit, neg.max(axis=-1, initial=-np.inf))
    e_pos = np.exp(pos_logit - top)
    e_neg = np.where(mask, np.exp(neg - top[..., None]), 0.0)
    z = e_pos + e_neg.sum(axis=-1)
    loss = np.log(z) - (pos_logit - top)
    g_pos = e_pos / z - 1.0
    g_neg = e_neg / z[..., None]
    return loss, g_pos, g_neg


def softmax_loss(s_pos, s_negs, mask=None, log_q=None):
    """Sampled softmax over one positive and its negatives.

    ``log_q`` (optional, same shape as ``s_negs``) subtracts the log
    sampling probability from each negative logit.
    Returns ``(loss, grad_pos, grad_negs)``.
    """
    s_pos, s_negs, mask = _prep(s_pos, s_negs, mask)
    logits = s_negs if log_q is None else s_negs - np.asarray(log_q, dtype=np.float64)
    loss, g_pos, g_neg = _softmax_ce(s_pos, logits, mask)
    if loss.ndim == 0:
        return float(loss), float(g_pos), g_neg
    return loss, g_pos, g_neg


def aml_margin(stage, upstream_pos, upstream_neg, cfg: MarginConfig):
    """Adaptive margin between a positive and a negative.

    For the click stage the upstream scores are exposure scores; for the
    conversion stage the caller passes exposure * click products.
    """
    stage = Stage.parse(stage)
    if stage == Stage.D:
        raise ConfigError("the exposure stage has no upstream scores")
    up_pos = np.asarray(upstream_pos, dtype=np.float64)
    up_neg = np.asarray(upstream_neg, dtype=np.float64)
    gap = up_pos - up_neg if up_neg.ndim == up_pos.ndim else up_pos[..., None] - up_neg
    m = np.where(gap >= 0, gap, -gap * cfg.eta) + cfg.sigma
    return float(m) if m.ndim == 0 else m


def aml_loss(s_pos, s_negs, margins, application: str = REQUIRED_SEPARATION, mask=None):
    """Softmax loss with a per-negative margin.

    ``required_separation`` shifts each negative logit up by its margin;
    ``paper_literal`` shifts it down.  Margins are constants (no gradient).
    Returns ``(loss, grad_pos, grad_negs)``.
    """
    s_pos, s_negs, mask = _prep(s_pos, s_negs, mask)
    margins = np.asarray(margins, dtype=np.float64)
    if margins.shape != s_negs.shape:
        raise ShapeError(f"{margins.shape} margins for {s_negs.shape} negatives")
    if application == REQUIRED_SEPARATION:
        logits = s_negs + margins
    elif application == PAPER_LITERAL:
        logits = s_negs - margins
    else:
        raise ConfigError(f"unknown margin application {application!r}")
    loss, g_pos, g_neg = _softmax_ce(s_pos, logits, mask)
    if loss.ndim == 0:
        return float(loss), float(g_pos), g_neg
    return loss, g_pos, g_neg


@dataclass
class ContrastiveBatch:
    """One training batch in index form.

    ``users[b]`` and ``pos[b]`` index the batch's user and item sets;
    ``negs[b, k]`` indexes ``item_ids`` and is valid where ``neg_mask``.
    """

    stage: Stage
    user_ids: np.ndarray
    item_ids: np.ndarray
    users: np.ndarray
    pos: np.ndarray
    negs: np.ndarray
    neg_mask: np.ndarray

    @property
    def size(self) -> int:
        return len(self.pos)


def assemble_negatives(
    user_ids,
    pos_item_ids,
    stage,
    rng: RngStream,
    max_negatives: int = 63,
    unexposed=None,
) -> ContrastiveBatch:
    """Build negatives for a batch of positives.

    Every stage uses the other examples' positives (in-batch); the exposure
    stage adds each example's request-local unexposed items.  Lists longer
    than ``max_negatives`` are cut to a uniform random subset.  An item
    equal to the example's own positive is never used as its negative.
    """
    stage = Stage.parse(stage)
    user_ids = np.asarray(user_ids, dtype=np.int64)
    pos_item_ids = np.asarray(pos_item_ids, dtype=np.int64)
    b = len(pos_item_ids)
    if max_negatives < 1:
        raise ConfigError("max_negatives must be >= 1")
    use_unexposed = stage == Stage.D and unexposed is not None
    if use_unexposed:
        if len(unexposed) != b:
            raise ShapeError("one unexposed list per example is required")
        width = max((len(u) for u in unexposed), default=0)
        unexp = np.full((b, width), -1, dtype=np.int64)
        for k, u in enumerate(unexposed):
            unexp[k, :len(u)] = u
    else:
        unexp = np.zeros((b, 0), dtype=np.int64)
    cand = np.concatenate([np.broadcast_to(pos_item_ids, (b, b)), unexp], axis=1)
    valid = cand != pos_item_ids[:, None]
    valid[:, :b] &= ~np.eye(b, dtype=bool)
    valid &= cand >= 0
    if b < 2 and not valid.any():
        raise SamplingError("a batch of one needs unexposed items to draw negatives from")
    if not valid.any(axis=1).all():
        raise SamplingError("an example has no usable negative")
    keys = rng.uniform(cand.size).reshape(cand.shape)
    keys[~valid] = np.inf
    k = min(max_negatives, cand.shape[1])
    order = np.argsort(keys, axis=1, kind="stable")[:, :k]
    chosen = np.take_along_axis(cand, order, axis=1)
    mask = np.take_along_axis(valid, order, axis=1)
    item_ids, inverse = np.unique(np.concatenate([pos_item_ids, chosen[mask]]), return_inverse=True)
    pos_idx = inverse[:b]
    negs = np.zeros(chosen.shape, dtype=np.int64)
    negs[mask] = inverse[b:]
    uniq_users, user_idx = np.unique(user_ids, return_inverse=True)
    return ContrastiveBatch(stage, uniq_users, item_ids, user_idx, pos_idx, negs, mask)
