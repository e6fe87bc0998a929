"""Small causal transformer over the synthetic reasoning vocabulary.

The student encodes prompts into hidden states, scores reasoning targets
with a masked cross-entropy, and generates reasoning sequences. All base
weights (embeddings, positions, attention, feed-forward, and the tied
output head) are frozen at initialization; the only trainable parameters
are the low-rank adapters attached to the four attention projections of
every block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Block, LayerNorm
from .tensor import Tensor
from .vocab import Vocabulary, VocabularyError

__all__ = ["StudentConfig", "ReasoningTrace", "StudentLM",
           "PromptLengthError", "CapacityError", "EmptyTargetError", "TraceError"]


class PromptLengthError(ValueError):
    """Prompt does not fit the model's maximum sequence length."""


class CapacityError(ValueError):
    """No room left to generate at least one new token."""


class EmptyTargetError(ValueError):
    """A training trace with zero masked-in target positions."""


class TraceError(ValueError):
    """Malformed reasoning trace (mask inconsistent with prompt/target)."""


@dataclass(frozen=True)
class StudentConfig:
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    lora_rank: int = 4
    max_len: int = 128


@dataclass
class ReasoningTrace:
    """A prompt, a reasoning target, and the loss mask separating them.

    ``mask`` covers the concatenated sequence (prompt then target): False on
    every prompt position, True on every non-PAD target position.
    """

    prompt_ids: list[int]
    target_ids: list[int]
    mask: list[bool] = field(default_factory=list)

    @classmethod
    def for_training(cls, prompt_ids, target_ids, pad_id: int) -> "ReasoningTrace":
        prompt_ids = [int(i) for i in prompt_ids]
        target_ids = [int(i) for i in target_ids]
        mask = [False] * len(prompt_ids) + [t != pad_id for t in target_ids]
        return cls(prompt_ids, target_ids, mask)

    def validate(self) -> None:
        n_prompt, n_target = len(self.prompt_ids), len(self.target_ids)
        if len(self.mask) != n_prompt + n_target:
            raise TraceError(f"mask length {len(self.mask)} != prompt+target length {n_prompt + n_target}")
        if any(self.mask[:n_prompt]):
            raise TraceError("mask is set on a prompt position")
        if self.masked_count() < 1:
            raise EmptyTargetError("trace has no masked-in target positions")

    def masked_count(self) -> int:
        return sum(bool(m) for m in self.mask)


class StudentLM:
    """Frozen-base causal LM trained only through attention adapters."""

    def __init__(self, vocab: Vocabulary, config: StudentConfig = StudentConfig(),
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.vocab = vocab
        self.config = config
        d = config.d_model
        self.embed = Tensor(rng.normal(0.0, 0.1, size=(len(vocab), d)))
        self.pos = Tensor(rng.normal(0.0, 0.1, size=(config.max_len, d)))
        self.blocks = [Block(rng, d, config.n_heads, trainable_base=False, lora_rank=config.lora_rank)
                       for _ in range(config.n_blocks)]
        self.ln_final = LayerNorm(d, trainable=False)

    # -- forward passes ------------------------------------------------------

    def _check_ids(self, ids) -> list[int]:
        ids = [int(i) for i in ids]
        size = len(self.vocab)
        for i in ids:
            if not 0 <= i < size:
                raise VocabularyError(f"token id {i} out of range (vocabulary size {size})")
        return ids

    def hidden_states(self, ids, use_adapters: bool = True) -> Tensor:
        """Last-layer states over the given token sequence (causal)."""
        ids = self._check_ids(ids)
        n = len(ids)
        if n < 1:
            raise PromptLengthError("empty token sequence")
        if n > self.config.max_len:
            raise PromptLengthError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        x = T.add(T.lookup_rows(self.embed, ids), T.slice_rows(self.pos, 0, n))
        for block in self.blocks:
            x = block.forward(x, causal=True, use_adapters=use_adapters)
        return self.ln_final.forward(x)

    def encode_prompt(self, prompt_ids, use_adapters: bool = True) -> Tensor:
        """Pre-fill states over exactly the prompt positions (L x d_llm)."""
        return self.hidden_states(prompt_ids, use_adapters=use_adapters)

    def logits(self, ids, use_adapters: bool = True) -> Tensor:
        """Token logits at every position; output head is tied to the embedding."""
        h = self.hidden_states(ids, use_adapters=use_adapters)
        return T.matmul(h, T.transpose(self.embed))

    # -- losses ----------------------------------------------------------------

    def ce_from_hidden(self, hidden: Tensor, trace: ReasoningTrace,
                       reduction: str = "mean") -> Tensor:
        """Masked cross-entropy given hidden states over prompt+target[:-1].

        Splitting this out lets the joint trainer reuse one forward pass for
        both the loss and the pre-fill pooling (causality makes the prompt
        rows identical to a prompt-only pass).
        """
        if reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {reduction!r}")
        seq = list(trace.prompt_ids) + list(trace.target_ids)
        if hidden.shape[0] != len(seq) - 1:
            raise TraceError(f"hidden states cover {hidden.shape[0]} positions, trace needs {len(seq) - 1}")
        # Position i of the input predicts seq[i+1]; keep positions whose
        # prediction target is masked in.
        rows = [i for i in range(len(seq) - 1) if trace.mask[i + 1]]
        labels = [seq[i + 1] for i in rows]
        logits = T.matmul(hidden, T.transpose(self.embed))
        logp = T.log_softmax_rows(logits)
        picked = T.pick_entries(logp, rows, labels)
        total = T.sum_all(picked) if reduction == "sum" else T.mean_all(picked)
        return T.mul(total, -1.0)

    def masked_ce_loss(self, trace: ReasoningTrace, reduction: str = "mean",
                       use_adapters: bool = True) -> Tensor:
        """Next-token cross-entropy over masked-in target positions only."""
        trace.validate()
        seq = list(trace.prompt_ids) + list(trace.target_ids)
        hidden = self.hidden_states(seq[:-1], use_adapters=use_adapters)
        return self.ce_from_hidden(hidden, trace, reduction=reduction)

    # -- generation --------------------------------------------------------------

    def generate(self, prompt_ids, max_new: int, mode: str = "greedy",
                 temperature: float = 1.0, seed: int | None = None) -> list[int]:
        """Autoregressive continuation; excludes the prompt and the final EOS.

        Greedy mode takes the argmax with lowest-token-id tie-break and is
        fully deterministic; sampled mode draws from the temperature-scaled
        distribution of a dedicated seeded generator.
        """
        prompt_ids = self._check_ids(prompt_ids)
        if max_new < 1:
            raise CapacityError("max_new must be at least 1")
        if len(prompt_ids) + 1 > self.config.max_len:
            raise CapacityError(
                f"prompt of length {len(prompt_ids)} leaves no room to generate (max_len {self.config.max_len})")
        if mode not in ("greedy", "sampled"):
            raise ValueError(f"unknown generation mode {mode!r}")
        if mode == "sampled" and temperature <= 0:
            raise ValueError("temperature must be positive")
        rng = np.random.default_rng(seed) if mode == "sampled" else None

        out: list[int] = []
        seq = list(prompt_ids)
        with T.no_grad():
            for _ in range(max_new):
                if len(seq) >= self.config.max_len:
                    break
                logits = self.logits(seq).data[-1]
                if mode == "greedy":
                    nxt = int(np.argmax(logits))
                else:
                    z = logits / temperature
                    z = z - z.max()
                    p = np.exp(z)
                    p /= p.sum()
                    nxt = int(rng.choice(len(p), p=p))
                if nxt == self.vocab.eos_id:
                    break
                out.append(nxt)
                seq.append(nxt)
        return out

    # -- parameters ---------------------------------------------------------------

    def trainable_params(self) -> list[Tensor]:
        """Exactly the adapter A/B tensors, in fixed block/projection order."""
        return [t for block in self.blocks for t in block.attn.adapter_tensors()]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"embed": self.embed, "pos": self.pos}
        for i, block in enumerate(self.blocks):
            for name, t in block.tensors().items():
                out[f"block{i}.{name}"] = t
        for name, t in self.ln_final.tensors().items():
            out[f"ln_f.{name}"] = t
        return out
