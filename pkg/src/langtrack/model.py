"""Parameter container tying the encoders and prediction head together."""

from __future__ import annotations

import numpy as np

from . import encoders, heads_losses
from .tensor import Tensor


class TrackerModel:
    """All named parameters plus the single-frame forward pass.

    Parameters are created in one fixed order from a seeded generator, so
    two models built from the same config are bit-identical.  Names under
    ``head.`` form the head learning-rate group; everything else is
    backbone.
    """

    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        self.params = {}
        self._init_params(np.random.default_rng(cfg.seed))

    def _add(self, name, value):
        self.params[name] = Tensor(value.astype(self.cfg.np_dtype), requires_grad=True)

    def _init_params(self, rng):
        cfg = self.cfg
        d = cfg.embed_dim

        def normal(*shape, scale):
            return rng.standard_normal(shape) * scale

        self._add("anchor", np.zeros((1, d)))
        self._add("embed.word", normal(encoders.VOCAB_SIZE, d, scale=0.02))
        self._add("embed.lang_pos", normal(cfg.max_language_tokens, d, scale=0.02))
        self._add("embed.tmpl_pos", normal(cfg.n_template_tokens, d, scale=0.02))
        self._add("embed.search_pos", normal(cfg.n_search_tokens, d, scale=0.02))
        patch_in = cfg.patch_size * cfg.patch_size * 3
        self._add("patch.w", normal(patch_in, d, scale=1.0 / np.sqrt(patch_in)))
        self._add("patch.b", np.zeros(d))

        hidden = 4 * d
        for i in range(cfg.num_layers):
            pre = f"blocks.{i}."
            self._add(pre + "ln1.g", np.ones(d))
            self._add(pre + "ln1.b", np.zeros(d))
            self._add(pre + "qkv.w", normal(d, 3 * d, scale=1.0 / np.sqrt(d)))
            self._add(pre + "qkv.b", np.zeros(3 * d))
            self._add(pre + "out.w", normal(d, d, scale=1.0 / np.sqrt(d)))
            self._add(pre + "out.b", np.zeros(d))
            self._add(pre + "ln2.g", np.ones(d))
            self._add(pre + "ln2.b", np.zeros(d))
            self._add(pre + "mlp.w1", normal(d, hidden, scale=1.0 / np.sqrt(d)))
            self._add(pre + "mlp.b1", np.zeros(hidden))
            self._add(pre + "mlp.w2", normal(hidden, d, scale=1.0 / np.sqrt(hidden)))
            self._add(pre + "mlp.b2", np.zeros(d))
        self._add("norm_f.g", np.ones(d))
        self._add("norm_f.b", np.zeros(d))

        # class/size output biases start at low priors so early heatmaps
        # are sparse and sizes small
        for name, out, prior in (("cls", 1, 0.1), ("size", 2, 0.2), ("off", 2, 0.5)):
            self._add(f"head.{name}.w1", normal(d, d, scale=1.0 / np.sqrt(d)))
            self._add(f"head.{name}.b1", np.zeros(d))
            self._add(f"head.{name}.w2", normal(d, out, scale=0.01))
            self._add(f"head.{name}.b2", np.full(out, np.log(prior / (1.0 - prior))))

    def forward_frame(self, query, template_frame, search_frame, prompts=None):
        """One tracking pass: (maps, encode result) for a prepared view."""
        lang = encoders.embed_language(query, self.params)
        tmpl = encoders.patch_embed(template_frame, "template", self.params, self.cfg)
        search = encoders.patch_embed(search_frame, "search", self.params, self.cfg)
        anchor = encoders.make_anchor(self.params)
        enc = encoders.encode_joint(self.params, self.cfg, anchor, lang, tmpl, search, prompts)
        maps = heads_losses.predict_maps(enc.search_tokens, enc.f_vl, self.params)
        return maps, enc

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def lr_group(self, name):
        return "head" if name.startswith("head.") else "backbone"

    def param_count(self):
        return sum(p.size for p in self.params.values())
