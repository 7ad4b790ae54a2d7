"""Key/value token grid and attention-visibility mask for prompt instances.

Layout per demo block ``i``: coarse tokens, error tokens, then query tokens.
Blocks ``0..d-1`` are the demos and block ``d`` is the query trajectory.
Query tokens carry a time key and a zero value; their training targets are
the error labels of their own block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataset import PromptInstance


class TokenCategory(IntEnum):
    COARSE = 0
    ERROR = 1
    QUERY = 2


@dataclass
class Normalizer:
    """Per-system affine map for states and a per-component scale for labels."""

    state_mean: np.ndarray
    state_scale: np.ndarray
    err_scale: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim), np.ones(dim))

    @classmethod
    def fit(cls, records) -> "Normalizer":
        states = np.concatenate([r.coarse for r in records])
        errs = np.concatenate([r.errors for r in records])
        scale = states.std(axis=0)
        err_scale = np.sqrt(np.mean(errs ** 2, axis=0))
        scale[scale == 0] = 1.0
        err_scale[err_scale == 0] = 1.0
        return cls(states.mean(axis=0), scale, err_scale)

    @property
    def dim(self) -> int:
        return len(self.state_mean)

    def states(self, u):
        return (u - self.state_mean) / self.state_scale

    def errors(self, e):
        return e / self.err_scale

    def errors_inv(self, e):
        return e * self.err_scale

    def to_dict(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)] for k in ("state_mean", "state_scale", "err_scale")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(*(np.array(d[k], dtype=float) for k in ("state_mean", "state_scale", "err_scale")))


@dataclass(eq=False)
class TokenSequence:
    keys: np.ndarray          # (T,)
    values: np.ndarray        # (T, max_dim)
    category: np.ndarray      # (T,) TokenCategory
    demo: np.ndarray          # (T,) block index, d = query block
    node: np.ndarray          # (T,) node index inside the block
    targets: np.ndarray       # (T, max_dim), meaningful at query tokens
    target_mask: np.ndarray   # (T, max_dim) bool
    d: int
    dim: int
    n_nodes: int = 0
    query_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    err_factor: np.ndarray | None = None   # per-prompt label scale, (dim,)

    def __len__(self):
        return len(self.keys)

    @property
    def final_queries(self) -> np.ndarray:
        """Token indices of the query block's query tokens, in sequence order."""
        return np.flatnonzero((self.category == TokenCategory.QUERY) & (self.demo == self.d))

    def layout_key(self) -> tuple:
        return (self.category.tobytes(), self.demo.tobytes())


def _padded(x: np.ndarray, max_dim: int) -> np.ndarray:
    out = np.zeros((x.shape[0], max_dim))
    out[:, : x.shape[1]] = x
    return out


def tokenize(instance: PromptInstance, max_dim: int, normalizer: Normalizer | None = None, *,
             demo_queries: bool = True, query_errors: bool | None = None,
             query_nodes: Sequence[int] | None = None, prompt_scale: bool = False) -> TokenSequence:
    """Flatten ``instance`` into tokens.

    ``demo_queries`` adds query tokens (supervised by the demo's own labels)
    to every demo block.  ``query_errors`` adds the query block's error tokens;
    by default they are present iff the instance carries target labels.
    ``query_nodes`` restricts the query block's query tokens to those nodes.
    ``prompt_scale`` further divides every label by the per-component RMS of
    the demo labels, so targets are O(1) whatever the variation's error size.
    """
    dim = instance.query_coarse.states.shape[1]
    if dim > max_dim:
        raise ValueError(f"system dimension {dim} exceeds max_dim={max_dim}")
    norm = normalizer or Normalizer.identity(dim)
    if query_errors is None:
        query_errors = instance.query_errors is not None
    if query_errors and instance.query_errors is None:
        raise ValueError("query_errors requested but the instance has no target labels")

    blocks = [(p.coarse, p.errors) for p in instance.demos] + [(instance.query_coarse, instance.query_errors)]
    factor = np.ones(dim)
    if prompt_scale and instance.demos:
        factor = prompt_error_scale([p.errors for p in instance.demos], norm)
    t_max = max(tr.times[-1] for tr, _ in blocks)
    scale = 1.0 / t_max if t_max > 0 else 0.0

    keys, vals, cats, demos, nodes, tgts, tmask = [], [], [], [], [], [], []
    n_nodes = 0
    for b, (tr, err) in enumerate(blocks):
        final = b == len(blocks) - 1
        n1 = len(tr.states)
        n_nodes = max(n_nodes, n1)
        t = tr.times * scale
        err_pad = np.zeros((n1, dim))
        ok = np.zeros((n1, max_dim), dtype=bool)
        if err is not None:
            err_pad[:-1] = norm.errors(err) / factor
            ok[:-1, :dim] = True          # endpoint slot has no outgoing transition
        err_pad = _padded(err_pad, max_dim)

        segments = [(TokenCategory.COARSE, np.arange(n1), _padded(norm.states(tr.states), max_dim))]
        if not final or query_errors:
            segments.append((TokenCategory.ERROR, np.arange(n1), err_pad))
        if not final and demo_queries:
            segments.append((TokenCategory.QUERY, np.arange(n1), np.zeros((n1, max_dim))))
        if final:
            qn = np.arange(n1) if query_nodes is None else np.asarray(query_nodes, dtype=int)
            segments.append((TokenCategory.QUERY, qn, np.zeros((len(qn), max_dim))))
        for cat, idx, v in segments:
            keys.append(t[idx])
            vals.append(v)
            cats.append(np.full(len(idx), int(cat)))
            demos.append(np.full(len(idx), b))
            nodes.append(idx)
            if cat == TokenCategory.QUERY:
                tgts.append(err_pad[idx])
                tmask.append(ok[idx])
            else:
                tgts.append(np.zeros((len(idx), max_dim)))
                tmask.append(np.zeros((len(idx), max_dim), dtype=bool))
    qn = np.arange(n_nodes) if query_nodes is None else np.asarray(query_nodes, dtype=int)
    return TokenSequence(np.concatenate(keys), np.concatenate(vals), np.concatenate(cats), np.concatenate(demos),
                         np.concatenate(nodes), np.concatenate(tgts), np.concatenate(tmask), instance.d, dim,
                         n_nodes, qn, factor)


def prompt_error_scale(demo_errors, normalizer: Normalizer) -> np.ndarray:
    """Per-component RMS of normalised demo labels; zero components map to 1."""
    e = np.concatenate([normalizer.errors(np.asarray(x, dtype=float)) for x in demo_errors])
    out = np.sqrt(np.mean(e ** 2, axis=0))
    out[~(out > 0)] = 1.0
    return out


def build_mask(seq: TokenSequence) -> np.ndarray:
    """``M[q, k]`` is True iff token ``q`` may attend to token ``k``.

    Earlier blocks are fully visible.  Inside a block, everyone sees the
    coarse tokens, error tokens also see error tokens, and a query token sees
    nothing else of its own block but itself.
    """
    cat, demo = seq.category, seq.demo
    dq, dk = demo[:, None], demo[None, :]
    cq, ck = cat[:, None], cat[None, :]
    same = dq == dk
    m = dk < dq
    m |= same & (ck == TokenCategory.COARSE)
    m |= same & (ck == TokenCategory.ERROR) & (cq == TokenCategory.ERROR)
    np.fill_diagonal(m, True)
    return m


@dataclass(frozen=True)
class EmbeddingConfig:
    max_dim: int = 3
    d_model: int = 64
    positional: str = "category"     # or "category_position"
    max_nodes: int = 512


class TokenEmbedding(nn.Module):
    """Shared linear map of ``key ⊕ value`` plus a learned vector per category."""

    def __init__(self, config: EmbeddingConfig):
        super().__init__()
        self.config = config
        self.value_map = nn.Linear(1 + config.max_dim, config.d_model)
        if config.positional == "category":
            self.positional = nn.Parameter(torch.zeros(len(TokenCategory), config.d_model))
        elif config.positional == "category_position":
            self.positional = nn.Parameter(torch.zeros(len(TokenCategory), config.max_nodes, config.d_model))
        else:
            raise ValueError(f"unknown positional mode {config.positional!r}")
        nn.init.normal_(self.positional, std=0.02)

    def forward(self, keys: torch.Tensor, values: torch.Tensor, category: torch.Tensor,
                node: torch.Tensor | None = None) -> torch.Tensor:
        x = torch.cat([keys.unsqueeze(-1), values], dim=-1)
        if values.shape[-1] != self.config.max_dim:
            raise ValueError(f"values have width {values.shape[-1]}, expected {self.config.max_dim}")
        h = self.value_map(x)
        if self.positional.dim() == 2:
            return h + self.positional[category]
        return h + self.positional[category, node]


def embed(seq: TokenSequence, embedding: TokenEmbedding, dtype=torch.float64) -> torch.Tensor:
    """Embed a single sequence; returns ``(T, d_model)``."""
    t = lambda a: torch.as_tensor(a, dtype=dtype)
    cat = torch.as_tensor(seq.category, dtype=torch.long)
    node = torch.as_tensor(seq.node, dtype=torch.long)
    return embedding(t(seq.keys), t(seq.values), cat, node)
