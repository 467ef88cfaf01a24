"""Dynamic token aggregation: select template tokens, merge them into the
language stream, and purify search tokens for temporal propagation.

Runs between the attention and MLP sub-layers of each transformer block.
Selection is hard top-k (no gradient through the ranking); gradients flow
through the gathered token values and the renormalized weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import GraphError, ShapeMismatchError
from .tokens import PROMPT, SequenceLayout, TokenSet, uniform_roles

log = logging.getLogger(__name__)


@dataclass
class AttentionScores:
    """Post-softmax per-head attention over one block's full sequence.

    ``attn_ls`` (fused-language -> search scores, pooled over heads and
    non-pad rows) is filled in after the merge step of the same block,
    since its queries are the fused language tokens.
    """

    weights: T.Tensor  # (heads, N, N)
    layout: SequenceLayout
    attn_ls: T.Tensor | None = field(default=None, repr=False)


@dataclass
class Selection:
    """Indices into a source token set plus renormalized weights."""

    indices: np.ndarray
    weights: T.Tensor
    source_role: str


def anchor_scores(attn):
    """Anchor query row restricted to template keys, averaged over heads."""
    a_start, a_count = attn.layout.anchor
    if a_count != 1:
        raise GraphError("anchor token missing from the sequence")
    t_start, t_count = attn.layout.template
    row = T.narrow(attn.weights, 1, a_start, 1)
    row = T.narrow(row, 2, t_start, t_count)
    return T.reshape(T.tmean(row, axis=0), (t_count,))


def _renormalized_weights(scores, idx):
    picked = T.gather(scores, idx, axis=0)
    total = float(picked.data.sum())
    if total <= 0.0:
        log.warning("selection scores sum to %g; falling back to uniform weights", total)
        return T.Tensor(np.full(len(idx), 1.0 / len(idx), dtype=scores.dtype))
    return T.div(picked, picked.sum())


def select_target_tokens(f_z, scores, k):
    """Top-k template tokens by anchor score, weights renormalized to sum 1."""
    if k < 1:
        raise ShapeMismatchError(f"select_target_tokens: k must be >= 1, got {k}")
    n = f_z.n
    if scores.shape != (n,):
        raise ShapeMismatchError(f"select_target_tokens: {scores.shape} scores for {n} tokens")
    if k > n:
        log.warning("select_target_tokens: k=%d clamped to %d template tokens", k, n)
        k = n
    idx = T.topk_indices(scores, k)
    picked = TokenSet(
        tokens=T.gather(f_z.tokens, idx, axis=0),
        roles=f_z.roles[idx],
        origins=f_z.origins[idx],
    )
    return picked, Selection(idx, _renormalized_weights(scores, idx), "template")


def merge_aggregate(t_z, sel, f_l, mode="pooled"):
    """Fold selected template tokens into the (non-pad) language tokens.

    ``pooled`` (default): convex-combine the selection under its weights
    into one summary vector, added to every non-pad language token.
    ``paired``: the i-th selected token is added to the i-th non-pad
    language token directly.
    """
    k = len(sel.indices)
    if k == 0:
        raise ShapeMismatchError("merge_aggregate: empty selection")
    valid = f_l.valid_mask if f_l.valid_mask is not None else np.ones(f_l.n, dtype=bool)
    gate = valid.astype(f_l.tokens.dtype.type)[:, None]

    if mode == "pooled":
        w = T.reshape(sel.weights, (k, 1))
        summary = T.tsum(T.mul(w, t_z.tokens), axis=0, keepdims=True)
        fused = T.add(f_l.tokens, T.mul(gate, summary))
    elif mode == "paired":
        n_valid = int(valid.sum())
        take = min(k, n_valid)
        rows = t_z.tokens if take == k else T.narrow(t_z.tokens, 0, 0, take)
        if take < f_l.n:
            pad = T.Tensor(np.zeros((f_l.n - take, f_l.dim), dtype=f_l.tokens.dtype))
            rows = T.concat([rows, pad], axis=0)
        fused = T.add(f_l.tokens, T.mul(gate, rows))
    else:
        raise ShapeMismatchError(f"merge_aggregate: unknown mode {mode!r}")
    return f_l.with_tokens(fused)


def purify_search(f_s, attn, k_s):
    """Top-k_s search tokens under the fused-language attention scores."""
    if k_s < 1:
        raise ShapeMismatchError(f"purify_search: k_s must be >= 1, got {k_s}")
    if attn.attn_ls is None:
        raise GraphError("purify_search: language-to-search scores not computed")
    n = f_s.n
    if attn.attn_ls.shape != (n,):
        raise ShapeMismatchError(f"purify_search: {attn.attn_ls.shape} scores for {n} tokens")
    if k_s > n:
        log.warning("purify_search: k_s=%d clamped to %d search tokens", k_s, n)
        k_s = n
    idx = T.topk_indices(attn.attn_ls, k_s)
    picked = TokenSet(
        tokens=T.gather(f_s.tokens, idx, axis=0),
        roles=f_s.roles[idx],
        origins=f_s.origins[idx],
    )
    return picked, Selection(idx, _renormalized_weights(attn.attn_ls, idx), "search")


def propagate_prompts(t_s):
    """Retag purified search tokens as next-frame prompts, detached.

    Detaching stops gradients from crossing frame boundaries through the
    prompt stream, which keeps each frame's tape bounded.
    """
    return TokenSet(
        tokens=t_s.tokens.detach(),
        roles=uniform_roles(t_s.n, PROMPT),
        origins=t_s.origins.copy(),
    )


def empty_prompts(dim, dtype=np.float64):
    """The prompt stream of a frame with no predecessor."""
    return TokenSet(
        tokens=T.Tensor(np.zeros((0, dim), dtype=dtype)),
        roles=uniform_roles(0, PROMPT),
        origins=np.zeros((0, 2), dtype=np.int32),
    )
