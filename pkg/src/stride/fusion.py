"""Cross-modal bridge between the student LM and the forecaster.

Pools the student's prompt hidden states into a single vector, projects it
into the forecaster's embedding dimension, and injects the resulting
reasoning prior into the context embedding, either as an extra row per
variate block (Prefix) or by overwriting each block's first row
(Substitute).
"""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = ["FusionMode", "ProjectionMatrix", "FusionConfigError", "pool_and_project", "fuse"]


class FusionConfigError(ValueError):
    """Unknown or inconsistent fusion configuration."""


class FusionMode(enum.Enum):
    PREFIX = "prefix"
    SUBSTITUTE = "substitute"

    @classmethod
    def from_string(cls, name: str) -> "FusionMode":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise FusionConfigError(
                f"unknown fusion mode {name!r}; expected 'prefix' or 'substitute'") from None


class ProjectionMatrix:
    """Trainable linear map from the LM's hidden space to the forecaster's."""

    def __init__(self, d_llm: int, d_ts: int, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        bound = 1.0 / np.sqrt(d_llm)
        self.w = Tensor(rng.uniform(-bound, bound, size=(d_llm, d_ts)), requires_grad=True)

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape


def pool_and_project(h: Tensor, proj: ProjectionMatrix) -> Tensor:
    """Mean-pool hidden states over the sequence, then project: (L, d_llm) -> (d_ts,)."""
    if h.data.ndim != 2:
        raise ShapeError(f"hidden states must be a matrix, got shape {h.shape}")
    if h.shape[1] != proj.shape[0]:
        raise ShapeError(f"hidden width {h.shape[1]} does not match projection input {proj.shape[0]}")
    return T.vec_matmul(T.mean_over_rows(h), proj.w)


def fuse(e_r: Tensor, e_ts: Tensor, mode: FusionMode, n_variates: int = 1,
         variate_tags: Tensor | None = None, prior_pos: Tensor | None = None) -> Tensor:
    """Inject the reasoning prior into a variate-major embedding sequence.

    Prefix prepends one prior row per variate block (output gains exactly
    ``n_variates`` rows); Substitute overwrites each block's first row and
    preserves the sequence length. Each injected row is the prior plus that
    variate's tag embedding plus a dedicated prior-position embedding, when
    those are supplied.
    """
    if not isinstance(mode, FusionMode):
        raise FusionConfigError(f"unknown fusion mode {mode!r}")
    if e_r.data.ndim != 1:
        raise ShapeError(f"reasoning prior must be a vector, got shape {e_r.shape}")
    if e_ts.data.ndim != 2 or e_ts.shape[1] != e_r.shape[0]:
        raise ShapeError(f"prior width {e_r.shape} does not match embedding width {e_ts.shape}")
    rows = e_ts.shape[0]
    if n_variates < 1 or rows % n_variates != 0:
        raise ShapeError(f"{rows} rows do not split into {n_variates} variate blocks")
    if variate_tags is not None and variate_tags.shape != (n_variates, e_r.shape[0]):
        raise ShapeError(f"variate tags shape {variate_tags.shape} does not match "
                         f"({n_variates}, {e_r.shape[0]})")
    per_block = rows // n_variates

    prior_rows = []
    for v in range(n_variates):
        row = e_r
        if variate_tags is not None:
            row = T.add(row, T.take_row(variate_tags, v))
        if prior_pos is not None:
            row = T.add(row, prior_pos)
        prior_rows.append(row)

    if mode is FusionMode.PREFIX:
        parts = []
        for v in range(n_variates):
            parts.append(T.stack_rows([prior_rows[v]]))
            parts.append(T.slice_rows(e_ts, v * per_block, (v + 1) * per_block))
        return T.concat_rows(parts)

    starts = [v * per_block for v in range(n_variates)]
    return T.replace_rows(e_ts, starts, T.stack_rows(prior_rows))
