"""Token vocabulary for the synthetic reasoning language.

The alphabet covers quantized value bins, coarse context metadata, the
baseline reasoning tokens (trend / seasonality / event), mode tokens that
only the teacher may emit, and the structural tokens. Ids are dense and
assigned in a fixed construction order so they are stable across save/load.
"""

from __future__ import annotations

__all__ = ["Vocabulary", "VocabularyError", "FREQ_TOKENS", "LEN_TOKENS"]

FREQ_TOKENS = ("FREQ_NONE", "FREQ_SHORT", "FREQ_MED", "FREQ_LONG")
LEN_TOKENS = ("LEN_SHORT", "LEN_MED", "LEN_LONG")


class VocabularyError(KeyError):
    """Unknown token string or out-of-range token id."""


class Vocabulary:
    """Dense, ordered token table.

    Construction order: PAD, BOS, EOS, SEP, value bins, FREQ_*, LEN_*,
    TREND_*, SEAS_*, EVENT_NONE, EVENT_0..E-1, MODE_0..K-1. PAD is id 0 and
    is excluded from every loss.
    """

    def __init__(self, n_modes: int, n_events: int | None = None, n_bins: int = 16):
        if n_modes < 1:
            raise ValueError(f"need at least one mode, got {n_modes}")
        if n_bins < 2:
            raise ValueError(f"need at least two value bins, got {n_bins}")
        if n_events is None:
            n_events = n_modes
        self.n_modes = n_modes
        self.n_events = n_events
        self.n_bins = n_bins

        tokens = ["PAD", "BOS", "EOS", "SEP"]
        tokens += [f"BIN_{i}" for i in range(n_bins)]
        tokens += list(FREQ_TOKENS)
        tokens += list(LEN_TOKENS)
        tokens += ["TREND_UP", "TREND_DOWN", "TREND_FLAT", "SEAS_YES", "SEAS_NO"]
        tokens += ["EVENT_NONE"] + [f"EVENT_{i}" for i in range(n_events)]
        tokens += [f"MODE_{i}" for i in range(n_modes)]
        self.tokens: list[str] = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

        self.pad_id = self._ids["PAD"]
        self.bos_id = self._ids["BOS"]
        self.eos_id = self._ids["EOS"]
        self.sep_id = self._ids["SEP"]

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def ids(self, tokens) -> list[int]:
        return [self.id(t) for t in tokens]

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise VocabularyError(f"token id {token_id} out of range (vocabulary size {len(self.tokens)})")
        return self.tokens[token_id]

    def strings(self, token_ids) -> list[str]:
        return [self.token(int(i)) for i in token_ids]

    def bin_id(self, bin_index: int) -> int:
        if not 0 <= bin_index < self.n_bins:
            raise VocabularyError(f"bin index {bin_index} out of range ({self.n_bins} bins)")
        return self._ids[f"BIN_{bin_index}"]

    def mode_id(self, mode: int) -> int:
        if not 0 <= mode < self.n_modes:
            raise VocabularyError(f"mode index {mode} out of range ({self.n_modes} modes)")
        return self._ids[f"MODE_{mode}"]

    def mode_index(self, token_id: int) -> int | None:
        """Mode index if the id is a MODE token, else None."""
        name = self.token(token_id)
        if name.startswith("MODE_"):
            return int(name.split("_", 1)[1])
        return None

    def event_id(self, label: str) -> int:
        if label == "EVENT_NONE" or label.startswith("EVENT_"):
            return self.id(label)
        raise VocabularyError(f"not an event label: {label!r}")

    # -- persistence -------------------------------------------------------

    def to_token_list(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_token_list(cls, tokens: list[str]) -> "Vocabulary":
        """Rebuild from a serialized ordered token list (checkpoint format)."""
        n_modes = sum(1 for t in tokens if t.startswith("MODE_"))
        n_events = sum(1 for t in tokens if t.startswith("EVENT_") and t != "EVENT_NONE")
        n_bins = sum(1 for t in tokens if t.startswith("BIN_"))
        vocab = cls(n_modes=n_modes, n_events=n_events, n_bins=n_bins)
        if vocab.tokens != list(tokens):
            raise VocabularyError("serialized token list does not match canonical construction order")
        return vocab
