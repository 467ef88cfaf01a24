"""Token producers and the joint transformer.

Language goes through a closed-vocabulary tokenizer and an embedding
table; frames are split into non-overlapping patches and linearly
projected; a learnable anchor token (zero-initialized) rides along.  The
joint encoder runs pre-norm transformer blocks over the concatenation
[anchor | language | template | search | prompts], invoking the token
aggregation step between each block's attention and MLP sub-layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dta import (
    AttentionScores,
    Selection,
    anchor_scores,
    empty_prompts,
    merge_aggregate,
    purify_search,
    select_target_tokens,
)
from .errors import DataError, ShapeMismatchError
from .tokens import (
    ANCHOR,
    LANGUAGE,
    SEARCH,
    TEMPLATE,
    SequenceLayout,
    TokenSet,
    grid_origins,
    uniform_roles,
)

PAD_ID = 0
UNK_ID = 1

COLORS = ("red", "green", "blue", "yellow", "orange", "purple", "cyan", "magenta")
SHAPES = ("square", "circle", "triangle")

VOCAB_WORDS = (
    "<pad>", "<unk>",
    *COLORS,
    *SHAPES,
    "the", "moving", "staying", "still", "left", "right", "up", "down",
    "a", "an", "object", "small", "large", "bright", "dark", "slowly",
    "quickly", "toward", "across", "near", "far", "top", "bottom",
    "center", "background", "scene", "frame",
)
VOCAB = {w: i for i, w in enumerate(VOCAB_WORDS)}
VOCAB_SIZE = len(VOCAB_WORDS)

MASK_BIAS = -1e9


@dataclass
class LanguageQuery:
    """Tokenized description: ids over the closed vocabulary plus pad mask."""

    text: str
    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if (self.ids >= VOCAB_SIZE).any() or (self.ids < 0).any():
            raise ShapeMismatchError("language ids outside the vocabulary")
        if not self.mask.any():
            raise DataError("language query has no content tokens")

    @property
    def n_valid(self):
        return int(self.mask.sum())


def tokenize_language(text, max_tokens=8):
    """Lowercase, whitespace-split, vocabulary lookup; pad/truncate to length."""
    if not text or not text.strip():
        raise DataError("empty language description")
    words = text.lower().split()[:max_tokens]
    ids = np.full(max_tokens, PAD_ID, dtype=np.int64)
    mask = np.zeros(max_tokens, dtype=bool)
    for i, w in enumerate(words):
        ids[i] = VOCAB.get(w, UNK_ID)
        mask[i] = True
    return LanguageQuery(text=text, ids=ids, mask=mask)


def embed_language(query, params):
    """Embedding-table rows plus learned positional embeddings."""
    rows = T.gather(params["embed.word"], query.ids, axis=0)
    tokens = T.add(rows, params["embed.lang_pos"])
    n = len(query.ids)
    origins = np.stack(
        [np.arange(n, dtype=np.int32), np.full(n, -1, np.int32)], axis=1
    )
    return TokenSet(tokens, uniform_roles(n, LANGUAGE), origins, valid_mask=query.mask.copy())


def patch_embed(frame, kind, params, cfg):
    """Non-overlapping patch flattening, linear projection, 2-D positions."""
    size = cfg.template_size if kind == "template" else cfg.search_size
    if frame.shape != (size, size, 3):
        raise ShapeMismatchError(
            f"{kind} frame must be {(size, size, 3)}, got {frame.shape}"
        )
    p = cfg.patch_size
    g = size // p
    patches = (
        frame.astype(cfg.np_dtype) / 255.0
    ).reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)
    projected = T.linear(T.Tensor(patches), params["patch.w"], params["patch.b"])
    pos = params["embed.tmpl_pos" if kind == "template" else "embed.search_pos"]
    tokens = T.add(projected, pos)
    role = TEMPLATE if kind == "template" else SEARCH
    return TokenSet(tokens, uniform_roles(g * g, role), grid_origins(g))


def make_anchor(params):
    """The learnable appearance token (a 1 x D parameter, zero at init)."""
    return TokenSet(
        params["anchor"],
        uniform_roles(1, ANCHOR),
        np.full((1, 2), -1, dtype=np.int32),
    )


@dataclass
class LayerSelections:
    layer: int
    sel_z: Selection
    t_z: TokenSet
    sel_s: Selection
    t_s: TokenSet


@dataclass
class EncodeResult:
    tokens: TokenSet
    layout: SequenceLayout
    f_vl: TokenSet
    search_tokens: TokenSet
    attn_layers: list = field(default_factory=list)
    selections: list = field(default_factory=list)
    t_s: TokenSet | None = None
    sel_s: Selection | None = None


def _heads_view(x, n, heads, head_dim):
    return T.swapaxes(T.reshape(x, (n, heads, head_dim)), 0, 1)


def _language_to_search_scores(fused_lang, valid_rows, keys, layout, params, layer, cfg):
    """Fresh attention: fused language queries against this block's search keys."""
    heads = cfg.num_heads
    dh = cfg.embed_dim // heads
    dim = cfg.embed_dim
    wq = T.narrow(params[f"blocks.{layer}.qkv.w"], 1, 0, dim)
    bq = T.narrow(params[f"blocks.{layer}.qkv.b"], 0, 0, dim)
    q = T.add(T.matmul(T.gather(fused_lang, valid_rows, axis=0), wq), bq)
    qh = _heads_view(q, len(valid_rows), heads, dh)
    s_start, s_count = layout.search
    k_search = T.narrow(keys, 1, s_start, s_count)
    logits = T.mul(T.matmul(qh, T.swapaxes(k_search, -1, -2)), 1.0 / math.sqrt(dh))
    attn = T.softmax(logits, axis=-1)
    return T.reshape(T.tmean(T.tmean(attn, axis=0), axis=0), (s_count,))


def encode_joint(params, cfg, anchor_ts, lang_ts, tmpl_ts, search_ts, prompts=None):
    """Run the joint transformer; token roles and origins pass through unchanged."""
    if prompts is None or prompts.n == 0:
        prompts = empty_prompts(cfg.embed_dim, cfg.np_dtype)
    streams = [anchor_ts, lang_ts, tmpl_ts, search_ts, prompts]
    dims = {s.dim for s in streams if s.n}
    if len(dims) != 1:
        raise ShapeMismatchError(f"inconsistent stream widths: {sorted(dims)}")

    layout = SequenceLayout.from_counts(
        lang_ts.n, tmpl_ts.n, search_ts.n, prompts.n, lang_ts.valid_mask.sum()
    )
    roles = np.concatenate([s.roles for s in streams])
    origins = np.concatenate([s.origins for s in streams])
    n = layout.total
    heads = cfg.num_heads
    dim = cfg.embed_dim
    dh = dim // heads
    scale = 1.0 / math.sqrt(dh)

    l_start, l_count = layout.language
    key_bias = np.zeros(n, dtype=cfg.np_dtype)
    key_bias[l_start : l_start + l_count][~lang_ts.valid_mask] = MASK_BIAS
    valid_rows = np.flatnonzero(lang_ts.valid_mask)

    x = T.concat([s.tokens for s in streams if s.n], axis=0)
    lang_mask = lang_ts.valid_mask.copy()

    result = EncodeResult(
        tokens=TokenSet(x, roles, origins),
        layout=layout,
        f_vl=TokenSet(
            T.narrow(x, 0, l_start, l_count),
            roles[l_start : l_start + l_count],
            origins[l_start : l_start + l_count],
            valid_mask=lang_mask,
        ),
        search_tokens=search_ts,
    )

    t_start, t_count = layout.template
    s_start, s_count = layout.search

    for layer in range(cfg.num_layers):
        p = lambda leaf: params[f"blocks.{layer}.{leaf}"]
        normed = T.layer_norm(x, p("ln1.g"), p("ln1.b"))
        qkv = T.linear(normed, p("qkv.w"), p("qkv.b"))
        qh = _heads_view(T.narrow(qkv, 1, 0, dim), n, heads, dh)
        kh = _heads_view(T.narrow(qkv, 1, dim, dim), n, heads, dh)
        vh = _heads_view(T.narrow(qkv, 1, 2 * dim, dim), n, heads, dh)
        logits = T.add(T.mul(T.matmul(qh, T.swapaxes(kh, -1, -2)), scale), key_bias)
        weights = T.softmax(logits, axis=-1)
        attn_out = T.reshape(T.swapaxes(T.matmul(weights, vh), 0, 1), (n, dim))
        x = T.add(x, T.linear(attn_out, p("out.w"), p("out.b")))

        attn = AttentionScores(weights=weights, layout=layout)
        result.attn_layers.append(attn)

        dta_here = cfg.dta_enabled and (
            cfg.dta_layers == "all" or layer == cfg.num_layers - 1
        )
        if dta_here:
            f_z = TokenSet(
                T.narrow(x, 0, t_start, t_count),
                roles[t_start : t_start + t_count],
                origins[t_start : t_start + t_count],
            )
            f_l = TokenSet(
                T.narrow(x, 0, l_start, l_count),
                roles[l_start : l_start + l_count],
                origins[l_start : l_start + l_count],
                valid_mask=lang_mask,
            )
            t_z, sel_z = select_target_tokens(
                f_z, anchor_scores(attn), k=layout.n_lang_valid
            )
            f_vl = merge_aggregate(t_z, sel_z, f_l, mode=cfg.merge_mode)
            tail = T.narrow(x, 0, t_start, n - t_start)
            x = T.concat([T.narrow(x, 0, 0, 1), f_vl.tokens, tail], axis=0)

            attn.attn_ls = _language_to_search_scores(
                f_vl.tokens, valid_rows, kh, layout, params, layer, cfg
            )
            f_s = TokenSet(
                T.narrow(x, 0, s_start, s_count),
                roles[s_start : s_start + s_count],
                origins[s_start : s_start + s_count],
            )
            t_s, sel_s = purify_search(f_s, attn, cfg.search_prompt_count)
            result.selections.append(LayerSelections(layer, sel_z, t_z, sel_s, t_s))
            result.t_s, result.sel_s = t_s, sel_s

        normed2 = T.layer_norm(x, p("ln2.g"), p("ln2.b"))
        h = T.linear(T.gelu(T.linear(normed2, p("mlp.w1"), p("mlp.b1"))), p("mlp.w2"), p("mlp.b2"))
        x = T.add(x, h)

    if cfg.num_layers > 0:
        x = T.layer_norm(x, params["norm_f.g"], params["norm_f.b"])

    result.tokens = TokenSet(x, roles, origins)
    result.f_vl = TokenSet(
        T.narrow(x, 0, l_start, l_count),
        roles[l_start : l_start + l_count],
        origins[l_start : l_start + l_count],
        valid_mask=lang_mask,
    )
    result.search_tokens = TokenSet(
        T.narrow(x, 0, s_start, s_count),
        roles[s_start : s_start + s_count],
        origins[s_start : s_start + s_count],
    )
    return result
