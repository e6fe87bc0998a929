"""End-to-end model bundle: student LM, projection, and forecaster.

One Pipeline owns everything a forward pass needs. The joint forward used in
training runs the student once over prompt+target, reuses the prompt rows as
the pre-fill states for pooling, fuses the projected prior into the context
embedding, and decodes quantiles; inference does the same from a prompt
alone and additionally generates the reasoning narrative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import TimeSeriesWindow, baseline_reasoning, build_prompt
from .forecaster import ForecastConfig, ForecastModel, QuantileForecast
from .fusion import FusionMode, ProjectionMatrix, fuse, pool_and_project
from .student import ReasoningTrace, StudentConfig, StudentLM
from .tensor import Tensor
from .vocab import Vocabulary

__all__ = ["PipelineConfig", "Pipeline", "JointForward"]


@dataclass(frozen=True)
class PipelineConfig:
    student: StudentConfig = StudentConfig()
    forecaster: ForecastConfig = ForecastConfig()
    fusion_mode: FusionMode = FusionMode.PREFIX
    ce_reduction: str = "mean"
    # Baseline variant for the variance/forecasting comparisons: the
    # reasoning prior is replaced by a zero vector, so the forecaster sees
    # pure context.
    zero_prior: bool = False


@dataclass
class JointForward:
    """Outputs of one fused forward pass on a single example."""

    forecast: QuantileForecast
    quantile_loss: Tensor
    ce_loss: Tensor | None = None
    prior: Tensor | None = None


class Pipeline:
    def __init__(self, vocab: Vocabulary, config: PipelineConfig = PipelineConfig(),
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.config = config
        self.student = StudentLM(vocab, config.student, rng)
        self.projection = ProjectionMatrix(config.student.d_model,
                                           config.forecaster.d_model, rng)
        self.forecaster = ForecastModel(config.forecaster, rng)

    # -- forward passes -----------------------------------------------------

    def _prior_from_hidden(self, prompt_hidden: Tensor | None) -> Tensor:
        if self.config.zero_prior or prompt_hidden is None:
            return Tensor(np.zeros(self.config.forecaster.d_model))
        return pool_and_project(prompt_hidden, self.projection)

    def _fused_context(self, prior: Tensor, x: np.ndarray) -> Tensor:
        e_ts, _ = self.forecaster.embed_context(x)
        return fuse(prior, e_ts, self.config.fusion_mode,
                    n_variates=self.config.forecaster.n_variates,
                    variate_tags=self.forecaster.variate,
                    prior_pos=self.forecaster.prior_pos)

    def joint_forward(self, x: np.ndarray, y: np.ndarray,
                      trace: ReasoningTrace) -> JointForward:
        """Training-time pass: masked CE plus fused quantile loss on one example."""
        trace.validate()
        seq = list(trace.prompt_ids) + list(trace.target_ids)
        hidden = self.student.hidden_states(seq[:-1])
        ce = self.student.ce_from_hidden(hidden, trace, reduction=self.config.ce_reduction)
        # Pre-fill pooling: only the prompt rows feed the numerical path.
        prompt_hidden = T.slice_rows(hidden, 0, len(trace.prompt_ids))
        prior = self._prior_from_hidden(prompt_hidden)
        fused = self._fused_context(prior, x)
        forecast = self.forecaster.decode_quantiles(fused)
        qloss = self.forecaster.quantile_loss(forecast, y)
        return JointForward(forecast=forecast, quantile_loss=qloss, ce_loss=ce, prior=prior)

    def forecast_window(self, window: TimeSeriesWindow, max_new: int = 8,
                        gen_mode: str = "greedy", temperature: float = 1.0,
                        gen_seed: int | None = None) -> tuple[list[str], QuantileForecast]:
        """Dual-generation inference: reasoning narrative plus quantile forecast.

        The future is stripped before anything runs. The numerical forecast
        pools pre-fill states only, so it is independent of the generated
        tokens and of any sampling seed.
        """
        window = window.without_future()
        prompt_ids = build_prompt(window, baseline_reasoning(window), self.vocab,
                                  max_len=self.config.student.max_len)
        with T.no_grad():
            prompt_hidden = None
            if not self.config.zero_prior:
                prompt_hidden = self.student.encode_prompt(prompt_ids)
            prior = self._prior_from_hidden(prompt_hidden)
            fused = self._fused_context(prior, window.x)
            forecast = self.forecaster.decode_quantiles(fused)
        generated = self.student.generate(prompt_ids, max_new=max_new, mode=gen_mode,
                                          temperature=temperature, seed=gen_seed)
        return self.vocab.strings(generated), forecast

    # -- parameters -----------------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, t in self.student.named_tensors().items():
            out[f"student.{name}"] = t
        out["proj.w"] = self.projection.w
        for name, t in self.forecaster.named_tensors().items():
            out[f"tsfm.{name}"] = t
        return out

    def trainable_named(self) -> list[tuple[str, Tensor]]:
        """Adapters, the projection, and every forecaster parameter, in name order."""
        return [(name, t) for name, t in sorted(self.named_tensors().items())
                if t.requires_grad]

    def zero_grads(self) -> None:
        for _, t in self.trainable_named():
            t.zero_grad()
