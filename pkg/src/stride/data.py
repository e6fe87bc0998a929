"""Synthetic mixture-of-modes forecasting benchmark.

Windows share one ambiguous history generator; the future follows one of K
mode trajectories (linear trend plus sinusoid), offset to join the last
context value continuously, with Gaussian within-mode noise. An event label
reveals the true mode with probability ``cue_strength``. Because history is
identically distributed across modes, the mode is unidentifiable from the
context alone and only the event cue carries that information into the
prompt.

The module also hosts the two deterministic reasoners: the teacher template
(sees the true mode, always truthful) and the baseline heuristics (history
only, never emits a mode token), plus the closed-form mixture statistics the
evaluation suite checks against Monte-Carlo estimates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .vocab import Vocabulary

__all__ = [
    "ModeSpec", "HistorySpec", "MixtureSpec", "TimeSeriesWindow", "SpecValidationError",
    "sample_window", "make_dataset", "teacher_reasoning", "baseline_reasoning",
    "build_prompt", "detect_period", "analytic_mixture_stats", "misspecification_error",
    "write_windows", "read_windows", "default_two_mode_spec", "identical_modes_spec",
    "worked_example_spec", "PROMPT_VALUE_COUNT",
]

PROMPT_VALUE_COUNT = 32  # most recent context values serialized into the prompt
FLAT_SLOPE_FACTOR = 1e-3  # |slope| below this times context std reads as flat
SEASONALITY_THRESHOLD = 0.5  # autocorrelation peak needed to report seasonality


class SpecValidationError(ValueError):
    """Mixture specification violates its invariants."""


@dataclass(frozen=True)
class ModeSpec:
    """One future trajectory family: linear trend plus optional sinusoid."""

    slope: float
    amplitude: float = 0.0
    period: float = 12.0
    phase: float = 0.0

    def delta(self, h) -> float | np.ndarray:
        """Displacement from the last context value at horizon step h; delta(0) = 0."""
        h = np.asarray(h, dtype=np.float64)
        out = self.slope * h
        if self.amplitude != 0.0:
            out = out + self.amplitude * (np.sin(2.0 * np.pi * h / self.period + self.phase)
                                          - math.sin(self.phase))
        return out if out.shape else float(out)


@dataclass(frozen=True)
class HistorySpec:
    """Shared context generator; identical across modes by construction."""

    level: float = 10.0
    slope: float = 0.0
    amplitude: float = 1.0
    period: float = 12.0
    noise_std: float = 0.2

    def values(self, t: np.ndarray) -> np.ndarray:
        return (self.level + self.slope * t
                + self.amplitude * np.sin(2.0 * np.pi * t / self.period))


@dataclass(frozen=True)
class MixtureSpec:
    modes: tuple[ModeSpec, ...]
    weights: tuple[float, ...]
    sigmas: tuple[float, ...]
    history: HistorySpec = HistorySpec()
    cue_strength: float = 0.9
    context_len: int = 64
    horizon: int = 8
    n_variates: int = 1

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        self.validate()

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def validate(self) -> None:
        k = len(self.modes)
        # K = 1 is allowed as the degenerate mixture used by edge-case checks,
        # even though interesting settings need at least two modes.
        if k < 1:
            raise SpecValidationError("need at least one mode")
        if len(self.weights) != k or len(self.sigmas) != k:
            raise SpecValidationError(
                f"modes/weights/sigmas lengths disagree: {k}/{len(self.weights)}/{len(self.sigmas)}")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise SpecValidationError(f"mode weights sum to {sum(self.weights)!r}, not 1")
        if any(w < 0 for w in self.weights):
            raise SpecValidationError("mode weights must be nonnegative")
        if any(s <= 0 for s in self.sigmas):
            raise SpecValidationError("within-mode noise stds must be positive")
        if not 0.0 <= self.cue_strength <= 1.0:
            raise SpecValidationError(f"cue_strength {self.cue_strength} outside [0, 1]")
        if self.context_len < 2 or self.horizon < 1 or self.n_variates < 1:
            raise SpecValidationError("context_len >= 2, horizon >= 1, n_variates >= 1 required")


@dataclass
class TimeSeriesWindow:
    """One benchmark example: context, future, and the mode bookkeeping."""

    x: np.ndarray  # (T, V)
    y: np.ndarray | None  # (H, V); None once the future has been stripped
    timestamps: np.ndarray  # (T + H,) integers
    true_mode: int
    event_label: str

    def without_future(self) -> "TimeSeriesWindow":
        """Context-only view handed to inference paths; y is never readable."""
        return replace(self, y=None)

    def to_json_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "y": None if self.y is None else self.y.tolist(),
            "timestamps": [int(t) for t in self.timestamps],
            "true_mode": int(self.true_mode),
            "event_label": self.event_label,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TimeSeriesWindow":
        return cls(
            x=np.asarray(d["x"], dtype=np.float64),
            y=None if d.get("y") is None else np.asarray(d["y"], dtype=np.float64),
            timestamps=np.asarray(d["timestamps"], dtype=np.int64),
            true_mode=int(d["true_mode"]),
            event_label=str(d["event_label"]),
        )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_window(spec: MixtureSpec, seed: int) -> TimeSeriesWindow:
    """Draw one window; fully deterministic given the seed.

    History is sampled first, then the mode, the event cue, and the future
    noise, so the draw order is part of the reproducibility contract.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    t_len, horizon, n_var = spec.context_len, spec.horizon, spec.n_variates

    t = np.arange(t_len, dtype=np.float64)
    base = spec.history.values(t)
    x = base[:, None] + rng.normal(0.0, spec.history.noise_std, size=(t_len, n_var))

    mode = int(rng.choice(spec.n_modes, p=np.asarray(spec.weights)))
    cue = rng.random() < spec.cue_strength
    event_label = f"EVENT_{mode}" if cue else "EVENT_NONE"

    h = np.arange(1, horizon + 1, dtype=np.float64)
    deltas = spec.modes[mode].delta(h)
    noise = rng.normal(0.0, spec.sigmas[mode], size=(horizon, n_var))
    y = x[-1][None, :] + deltas[:, None] + noise

    return TimeSeriesWindow(
        x=x, y=y,
        timestamps=np.arange(t_len + horizon, dtype=np.int64),
        true_mode=mode, event_label=event_label,
    )


def make_dataset(spec: MixtureSpec, n: int, seed: int) -> list[TimeSeriesWindow]:
    """n independent windows with per-window seeds derived from one root seed."""
    child_seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
    return [sample_window(spec, int(s)) for s in child_seeds]


# ---------------------------------------------------------------------------
# reasoning generators
# ---------------------------------------------------------------------------


def _trend_token(slope: float, threshold: float = 0.0) -> str:
    if abs(slope) <= max(threshold, 1e-12):
        return "TREND_FLAT"
    return "TREND_UP" if slope > 0 else "TREND_DOWN"


def teacher_reasoning(window: TimeSeriesWindow, spec: MixtureSpec) -> list[str]:
    """Oracle template; the mode token is always truthful.

    The teacher sees the true mode (it was generated with access to the
    future), so the trend/seasonality tokens describe the mode trajectory,
    not the history.
    """
    mode = spec.modes[window.true_mode]
    return [
        f"MODE_{window.true_mode}",
        _trend_token(mode.slope),
        "SEAS_YES" if mode.amplitude != 0.0 else "SEAS_NO",
        window.event_label,
        "EOS",
    ]


def _autocorrelation(x: np.ndarray, lag: int) -> float:
    xc = x - x.mean()
    denom = float(np.dot(xc, xc))
    if denom <= 0.0:
        return 0.0
    return float(np.dot(xc[:-lag], xc[lag:]) / denom)


def detect_period(x: np.ndarray) -> int | None:
    """Lag of the autocorrelation peak over lags 2..T//2, if it clears 0.5."""
    t_len = x.shape[0]
    best_lag, best_r = None, SEASONALITY_THRESHOLD
    for lag in range(2, t_len // 2 + 1):
        r = _autocorrelation(x, lag)
        if r > best_r:
            best_lag, best_r = lag, r
    return best_lag


def baseline_reasoning(window: TimeSeriesWindow) -> list[str]:
    """History-only heuristics; never emits a MODE token.

    Trend comes from the least-squares slope over the most recent half of
    the context (flat below 1e-3 of the context std); seasonality from the
    autocorrelation peak; the event token is copied from window metadata
    when a cue is present, since the cue is history-visible.
    """
    x = window.x[:, 0]
    half = x[x.shape[0] // 2:]
    slope = float(np.polyfit(np.arange(half.shape[0], dtype=np.float64), half, 1)[0])
    trend = _trend_token(slope, FLAT_SLOPE_FACTOR * float(x.std()))
    seas = "SEAS_YES" if detect_period(x) is not None else "SEAS_NO"
    event = window.event_label if window.event_label != "EVENT_NONE" else "EVENT_NONE"
    return [trend, seas, event]


# ---------------------------------------------------------------------------
# prompt serialization
# ---------------------------------------------------------------------------


def _freq_token(x: np.ndarray) -> str:
    period = detect_period(x)
    if period is None:
        return "FREQ_NONE"
    if period <= 8:
        return "FREQ_SHORT"
    if period <= 32:
        return "FREQ_MED"
    return "FREQ_LONG"


def _len_token(t_len: int) -> str:
    if t_len <= 32:
        return "LEN_SHORT"
    if t_len <= 96:
        return "LEN_MED"
    return "LEN_LONG"


def build_prompt(window: TimeSeriesWindow, r_base: list[str], vocab: Vocabulary,
                 max_len: int = 128) -> list[int]:
    """Serialize the context into prompt token ids.

    Layout: BOS, frequency/length metadata, the last 32 context values
    quantized into uniform bins over the context min-max, SEP, the baseline
    reasoning draft, SEP. Overlength prompts drop the oldest value tokens
    first; metadata and the draft are never truncated.
    """
    x = window.x[:, 0]
    lo, hi = float(x.min()), float(x.max())
    values = x[-min(x.shape[0], PROMPT_VALUE_COUNT):]
    if hi - lo <= 0.0:
        bins = [0] * values.shape[0]  # degenerate range maps to the lowest bin
    else:
        bins = np.minimum((values - lo) / (hi - lo) * vocab.n_bins,
                          vocab.n_bins - 1).astype(int).tolist()

    head = ["BOS", _freq_token(x), _len_token(x.shape[0])]
    tail = ["SEP"] + list(r_base) + ["SEP"]
    overflow = len(head) + len(bins) + len(tail) - max_len
    if overflow > 0:
        if overflow >= len(bins):
            raise ValueError(f"prompt cannot fit in {max_len} tokens even without value tokens")
        bins = bins[overflow:]
    tokens = head + [f"BIN_{b}" for b in bins] + tail
    return vocab.ids(tokens)


# ---------------------------------------------------------------------------
# closed-form mixture statistics
# ---------------------------------------------------------------------------


def analytic_mixture_stats(spec: MixtureSpec, t: int) -> dict:
    """Law-of-total-variance decomposition at horizon step t.

    unconditional_var is the predictive variance given only the context
    (mixture across modes); conditional_var_k is the within-mode variance;
    variance_reduction is the between-mode term removed by knowing the mode.
    """
    spec.validate()
    w = np.asarray(spec.weights)
    deltas = np.asarray([m.delta(t) for m in spec.modes])
    sig2 = np.asarray(spec.sigmas) ** 2
    mu_bar = float(np.dot(w, deltas))
    within = float(np.dot(w, sig2))
    between = float(np.dot(w, (deltas - mu_bar) ** 2))
    return {
        "mode_means": tuple(float(d) for d in deltas),
        "unconditional_var": within + between,
        "conditional_var": tuple(float(s) for s in sig2),
        "variance_reduction": between,
    }


def misspecification_error(spec: MixtureSpec, predicted_mode: int, true_mode: int,
                           t: int) -> dict:
    """Expected squared error of forecasting mode j when mode k is true.

    Decomposes into squared bias between the mode means, the predicted
    mode's variance, and the true mode's irreducible variance.
    """
    k = spec.n_modes
    if not (0 <= predicted_mode < k and 0 <= true_mode < k):
        raise SpecValidationError(f"mode index out of range for {k} modes")
    mu_j = spec.modes[predicted_mode].delta(t)
    mu_k = spec.modes[true_mode].delta(t)
    bias_sq = float((mu_j - mu_k) ** 2)
    variance = float(spec.sigmas[predicted_mode] ** 2)
    irreducible = float(spec.sigmas[true_mode] ** 2)
    return {
        "bias_sq": bias_sq,
        "variance": variance,
        "irreducible": irreducible,
        "total": bias_sq + variance + irreducible,
    }


# ---------------------------------------------------------------------------
# dataset files (one JSON record per line)
# ---------------------------------------------------------------------------


def write_windows(path, windows: list[TimeSeriesWindow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w in windows:
            fh.write(json.dumps(w.to_json_dict()) + "\n")


def read_windows(path) -> list[TimeSeriesWindow]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TimeSeriesWindow.from_json_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# canonical specifications
# ---------------------------------------------------------------------------


def default_two_mode_spec(cue_strength: float = 0.9) -> MixtureSpec:
    """The standard benchmark: two diverging linear modes over a seasonal history."""
    return MixtureSpec(
        modes=(ModeSpec(slope=-0.35), ModeSpec(slope=0.35)),
        weights=(0.5, 0.5),
        sigmas=(0.1, 0.1),
        history=HistorySpec(level=10.0, slope=0.0, amplitude=1.0, period=12.0, noise_std=0.2),
        cue_strength=cue_strength,
        context_len=64,
        horizon=8,
    )


def identical_modes_spec(cue_strength: float = 1.0) -> MixtureSpec:
    """Two indistinguishable modes: the cue carries no usable information."""
    return MixtureSpec(
        modes=(ModeSpec(slope=0.1), ModeSpec(slope=0.1)),
        weights=(0.5, 0.5),
        sigmas=(0.1, 0.1),
        history=HistorySpec(level=10.0, slope=0.0, amplitude=1.0, period=12.0, noise_std=0.2),
        cue_strength=cue_strength,
        context_len=64,
        horizon=8,
    )


def worked_example_spec() -> MixtureSpec:
    """Two equal modes with means -1/+1 at step 4 and within-mode variance 0.01."""
    return MixtureSpec(
        modes=(ModeSpec(slope=-0.25), ModeSpec(slope=0.25)),
        weights=(0.5, 0.5),
        sigmas=(0.1, 0.1),
        history=HistorySpec(noise_std=0.1),
        cue_strength=0.9,
        context_len=64,
        horizon=8,
    )
