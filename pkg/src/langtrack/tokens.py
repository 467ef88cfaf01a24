"""Token sequences with per-token role and source-coordinate bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .tensor import Tensor

ANCHOR, LANGUAGE, TEMPLATE, SEARCH, PROMPT = range(5)
ROLE_NAMES = ("anchor", "language", "template", "search", "prompt")


@dataclass
class TokenSet:
    """An ordered run of D-dimensional tokens from one stream.

    ``origins`` holds (row, col) grid cells for visual tokens, (position, -1)
    for language tokens, and (-1, -1) for the anchor.  ``valid_mask`` marks
    non-padding positions (None means all valid).
    """

    tokens: Tensor
    roles: np.ndarray
    origins: np.ndarray
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        n = self.tokens.shape[0]
        if len(self.roles) != n or len(self.origins) != n:
            raise ShapeMismatchError(
                f"token set: {n} tokens vs {len(self.roles)} roles / {len(self.origins)} origins"
            )
        if int((self.roles == ANCHOR).sum()) > 1:
            raise ShapeMismatchError("token set: more than one anchor token")
        if self.valid_mask is not None and len(self.valid_mask) != n:
            raise ShapeMismatchError("token set: valid_mask length mismatch")

    @property
    def n(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]

    def with_tokens(self, tokens):
        """Same bookkeeping, new embedding values."""
        return TokenSet(tokens, self.roles, self.origins, self.valid_mask)


@dataclass(frozen=True)
class SequenceLayout:
    """Stream offsets inside the concatenated [anchor|language|template|search|prompt] sequence."""

    anchor: tuple
    language: tuple
    template: tuple
    search: tuple
    prompt: tuple
    n_lang_valid: int

    @staticmethod
    def from_counts(n_lang, n_tmpl, n_search, n_prompt, n_lang_valid):
        pos = 0
        spans = []
        for count in (1, n_lang, n_tmpl, n_search, n_prompt):
            spans.append((pos, count))
            pos += count
        return SequenceLayout(*spans, n_lang_valid=n_lang_valid)

    @property
    def total(self):
        start, count = self.prompt
        return start + count


def uniform_roles(n, role):
    return np.full(n, role, dtype=np.int8)


def grid_origins(grid):
    """Row-major (row, col) origin table for a grid x grid patch layout."""
    rows, cols = np.divmod(np.arange(grid * grid, dtype=np.int32), grid)
    return np.stack([rows, cols], axis=1)
