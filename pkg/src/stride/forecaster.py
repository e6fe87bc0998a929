"""Toy patch-based quantile forecaster.

The context window is instance-normalized per variate, cut into fixed-length
patches, linearly embedded, and tagged with patch-position and variate
embeddings. An encoder stack (same block design as the student, full
attention) processes the possibly-fused sequence; a linear head maps each
variate's pooled representation to horizon x levels quantile values, which
are de-normalized and monotone-rearranged. Every parameter here is
trainable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Block, LayerNorm
from .tensor import ShapeError, Tensor

__all__ = ["DEFAULT_QUANTILE_LEVELS", "QuantileLevels", "NormalizationRecord",
           "ForecastConfig", "QuantileForecast", "ForecastModel",
           "MissingNormalizationError", "pinball_value"]

DEFAULT_QUANTILE_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class MissingNormalizationError(RuntimeError):
    """decode was called before any context established normalization stats."""


@dataclass(frozen=True)
class QuantileLevels:
    levels: tuple[float, ...] = DEFAULT_QUANTILE_LEVELS

    def __post_init__(self):
        lv = tuple(float(q) for q in self.levels)
        if not lv:
            raise ValueError("need at least one quantile level")
        if any(not 0.0 < q < 1.0 for q in lv):
            raise ValueError(f"levels must lie strictly inside (0, 1): {lv}")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError(f"levels must be strictly increasing: {lv}")
        object.__setattr__(self, "levels", lv)

    def __len__(self) -> int:
        return len(self.levels)

    def median_index(self) -> int:
        for i, q in enumerate(self.levels):
            if abs(q - 0.5) < 1e-12:
                return i
        raise ValueError(f"no 0.5 level among {self.levels}")


@dataclass
class NormalizationRecord:
    """Per-variate instance statistics of one context window."""

    mean: np.ndarray  # (V,)
    std: np.ndarray   # (V,), floored at STD_FLOOR

    STD_FLOOR = 1e-6

    @classmethod
    def from_context(cls, x: np.ndarray) -> "NormalizationRecord":
        mean = x.mean(axis=0)
        std = np.maximum(x.std(axis=0), cls.STD_FLOOR)
        return cls(mean=mean, std=std)

    @property
    def n_variates(self) -> int:
        return self.mean.shape[0]

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass(frozen=True)
class ForecastConfig:
    d_model: int = 32
    patch_len: int = 8
    n_blocks: int = 2
    n_heads: int = 2
    horizon: int = 8
    n_variates: int = 1
    max_patches: int = 64
    levels: QuantileLevels = QuantileLevels()


@dataclass
class QuantileForecast:
    """Quantile trajectories in original units, non-decreasing across levels.

    ``normalized`` keeps the graph-connected post-rearrangement head output
    (V rows, horizon*levels columns) so the training loss can be computed in
    normalized space.
    """

    values: np.ndarray  # (H, V, |Q|), raw scale
    levels: QuantileLevels
    record: NormalizationRecord
    normalized: Tensor

    def point(self) -> np.ndarray:
        """Median slice used as the point forecast: (H, V)."""
        return self.values[:, :, self.levels.median_index()]


def pinball_value(y: float, yhat: float, q: float) -> float:
    """Scalar pinball loss: max(q*(y-yhat), (q-1)*(y-yhat))."""
    e = y - yhat
    return max(q * e, (q - 1.0) * e)


class ForecastModel:
    """Patch encoder plus quantile head; fully fine-tuned during training."""

    def __init__(self, config: ForecastConfig = ForecastConfig(),
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        d, p = config.d_model, config.patch_len
        n_out = config.horizon * len(config.levels)
        self.patch_w = Tensor(rng.uniform(-1 / np.sqrt(p), 1 / np.sqrt(p), size=(p, d)), requires_grad=True)
        self.patch_b = Tensor(np.zeros(d), requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.1, size=(config.max_patches, d)), requires_grad=True)
        self.variate = Tensor(rng.normal(0.0, 0.1, size=(config.n_variates, d)), requires_grad=True)
        # Dedicated position tag for a fused reasoning-prior row; historical
        # patch positions stay unshifted in Prefix mode.
        self.prior_pos = Tensor(rng.normal(0.0, 0.1, size=(d,)), requires_grad=True)
        self.blocks = [Block(rng, d, config.n_heads, trainable_base=True, lora_rank=None)
                       for _ in range(config.n_blocks)]
        self.ln_final = LayerNorm(d, trainable=True)
        self.head_w = Tensor(rng.normal(0.0, 0.01, size=(d, n_out)), requires_grad=True)
        self.head_b = Tensor(np.zeros(n_out), requires_grad=True)
        self._norm: NormalizationRecord | None = None

    # -- embedding ---------------------------------------------------------

    def embed_context(self, x: np.ndarray) -> tuple[Tensor, NormalizationRecord]:
        """Instance-normalize, patch, and embed a (T, V) context window.

        Returns the (L_TS, d) embedding with variate-major row blocks and the
        normalization record, which is also stored on the model for the next
        decode call.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ShapeError(f"context must be a non-empty (T, V) array, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("context contains non-finite values")
        t_len, n_var = x.shape
        if n_var != self.config.n_variates:
            raise ShapeError(f"model expects {self.config.n_variates} variates, context has {n_var}")

        record = NormalizationRecord.from_context(x)
        normed = record.normalize(x)

        p = self.config.patch_len
        n_patches = -(-t_len // p)  # ceil
        if n_patches > self.config.max_patches:
            raise ShapeError(f"context needs {n_patches} patches, model supports {self.config.max_patches}")
        pad = n_patches * p - t_len

        blocks = []
        pos_rows = T.slice_rows(self.pos, 0, n_patches)
        for v in range(n_var):
            series = normed[:, v]
            if pad:
                # Left-pad with the first observation so T divides patch_len.
                series = np.concatenate([np.full(pad, series[0]), series])
            patches = series.reshape(n_patches, p)
            e = T.add(T.matmul(Tensor(patches), self.patch_w), self.patch_b)
            e = T.add(e, pos_rows)
            e = T.add(e, T.take_row(self.variate, v))
            blocks.append(e)
        e_ts = blocks[0] if n_var == 1 else T.concat_rows(blocks)
        self._norm = record
        return e_ts, record

    # -- decoding -----------------------------------------------------------

    def decode_quantiles(self, fused: Tensor,
                         record: NormalizationRecord | None = None) -> QuantileForecast:
        """Run the encoder over a (possibly fused) sequence and emit quantiles.

        The head output is reshaped to (H, V, |Q|), de-normalized with the
        stored statistics, and monotone-rearranged by sorting along the
        level axis (crossing quantiles are repaired deterministically).
        """
        record = record if record is not None else self._norm
        if record is None:
            raise MissingNormalizationError("no normalization record: call embed_context first")
        n_var = record.n_variates
        rows = fused.shape[0]
        if rows % n_var != 0 or rows == 0:
            raise ShapeError(f"fused sequence of {rows} rows does not split into {n_var} variate blocks")
        per_block = rows // n_var

        h = fused
        for block in self.blocks:
            h = block.forward(h, causal=False)
        h = self.ln_final.forward(h)

        pooled = T.stack_rows([
            T.mean_over_rows(T.slice_rows(h, v * per_block, (v + 1) * per_block))
            for v in range(n_var)
        ])
        out = T.add(T.matmul(pooled, self.head_w), self.head_b)  # (V, H*|Q|)

        nq = len(self.config.levels)
        horizon = self.config.horizon
        # Sort each (variate, step) group of levels ascending; realized as a
        # differentiable fixed permutation of columns.
        grouped = out.data.reshape(n_var, horizon, nq)
        order = np.argsort(grouped, axis=-1, kind="stable")
        src_cols = (order + np.arange(horizon)[None, :, None] * nq).reshape(n_var, horizon * nq)
        sorted_out = T.permute_within_rows(out, src_cols)

        norm_vals = sorted_out.data.reshape(n_var, horizon, nq).transpose(1, 0, 2)  # (H, V, |Q|)
        raw = norm_vals * record.std[None, :, None] + record.mean[None, :, None]
        return QuantileForecast(values=raw, levels=self.config.levels,
                                record=record, normalized=sorted_out)

    # -- loss ------------------------------------------------------------------

    def quantile_loss(self, forecast: QuantileForecast, y: np.ndarray) -> Tensor:
        """Mean pinball loss over (step, variate, level), in normalized space."""
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        horizon, nq = self.config.horizon, len(self.config.levels)
        n_var = forecast.record.n_variates
        if y.shape != (horizon, n_var):
            raise ShapeError(f"future shape {y.shape} does not match (H={horizon}, V={n_var})")
        y_norm = forecast.record.normalize(y)  # (H, V)

        # Column j = h*nq + qi of row v targets y_norm[h, v] at level q_qi.
        target = np.repeat(y_norm.T, nq, axis=1)  # (V, H*nq)
        q_row = np.tile(np.asarray(self.config.levels.levels), horizon)  # (H*nq,)
        err = T.sub(target, forecast.normalized)
        return T.mean_all(T.maximum(T.mul(err, q_row), T.mul(err, q_row - 1.0)))

    # -- parameters ----------------------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"patch.w": self.patch_w, "patch.b": self.patch_b, "pos": self.pos,
               "variate": self.variate, "prior_pos": self.prior_pos,
               "head.w": self.head_w, "head.b": self.head_b}
        for i, block in enumerate(self.blocks):
            for name, t in block.tensors().items():
                out[f"block{i}.{name}"] = t
        for name, t in self.ln_final.tensors().items():
            out[f"ln_f.{name}"] = t
        return out

    def trainable_params(self) -> list[Tensor]:
        return [t for _, t in sorted(self.named_tensors().items())]
