"""Closed-vocabulary tokenizer, seeded prompt embeddings and token alignment.

The vocabulary lives in ``vocab.txt`` next to this module, one word per
line; the (0-based) line number is the token id.  Ids 0 and 1 are reserved
for the null token and for unknown words.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

NULL_ID = 0
UNK_ID = 1
D_TXT = 16
MAX_TOKENS = 32
POSITION_SCALE = 0.3


class TextError(ValueError):
    pass


@lru_cache(maxsize=None)
def vocabulary() -> tuple[str, ...]:
    raw = resources.files(__package__).joinpath("vocab.txt").read_text(encoding="utf-8")
    words = tuple(w.strip() for w in raw.splitlines() if w.strip())
    if words[NULL_ID] != "<null>" or words[UNK_ID] != "<unk>":
        raise TextError("vocabulary registry must start with <null>, <unk>")
    return words


@lru_cache(maxsize=None)
def _word_ids() -> dict[str, int]:
    return {w: i for i, w in enumerate(vocabulary())}


def token_id(word: str) -> int:
    return _word_ids().get(word.lower(), UNK_ID)


@dataclass(frozen=True)
class Prompt:
    raw: str
    tokens: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> tuple[str, ...]:
        vocab = vocabulary()
        return tuple(vocab[i] for i in self.tokens)

    def index_of(self, word: str) -> int:
        """Position of the first occurrence of ``word``."""
        tid = token_id(word)
        try:
            return self.tokens.index(tid)
        except ValueError:
            raise TextError(f"{word!r} does not occur in prompt {self.raw!r}") from None


def tokenize(raw: str) -> Prompt:
    words = raw.lower().split()
    if not words:
        raise TextError("cannot tokenize an empty prompt")
    if len(words) > MAX_TOKENS:
        raise TextError(f"prompt has {len(words)} words, at most {MAX_TOKENS} are supported")
    return Prompt(raw, tuple(token_id(w) for w in words))


def null_prompt(length: int) -> Prompt:
    """The empty prompt, padded with the null token to ``length`` positions."""
    if not 1 <= length <= MAX_TOKENS:
        raise TextError(f"null prompt length must lie in [1, {MAX_TOKENS}]")
    return Prompt("", (NULL_ID,) * length)


@lru_cache(maxsize=8)
def _table(seed: int, d_txt: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E47]))
    table = rng.standard_normal((len(vocabulary()), d_txt))
    table.setflags(write=False)
    return table


@lru_cache(maxsize=8)
def _positions(seed: int, d_txt: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9051]))
    table = POSITION_SCALE * rng.standard_normal((MAX_TOKENS, d_txt))
    table.setflags(write=False)
    return table


def embedding_table(seed: int, d_txt: int = D_TXT) -> np.ndarray:
    return _table(int(seed), int(d_txt))


def position_table(seed: int, d_txt: int = D_TXT) -> np.ndarray:
    return _positions(int(seed), int(d_txt))


def embed_prompt(p: Prompt, seed: int, d_txt: int = D_TXT) -> np.ndarray:
    """``len(p) x d_txt`` matrix; row ``i`` is the table row of token ``i``
    plus the position row ``i``.

    Without the position term the empty prompt would be ``L`` identical rows,
    and identical keys and values receive identical gradients, so an
    optimized null embedding could never tell its rows apart.
    """
    if len(p) > MAX_TOKENS:
        raise TextError(f"prompt longer than {MAX_TOKENS} tokens")
    return embedding_table(seed, d_txt)[list(p.tokens)] + position_table(seed, d_txt)[:len(p)]


@dataclass(frozen=True)
class Alignment:
    """Target-index -> source-index mapping from a longest common subsequence."""

    map: dict[int, int]
    new_tokens: frozenset[int]
    src_len: int
    dst_len: int
    _pairs: tuple[tuple[int, int], ...] = field(default=(), repr=False)

    def __post_init__(self):
        for j, i in self.map.items():
            if not (0 <= j < self.dst_len and 0 <= i < self.src_len):
                raise TextError(f"alignment pair {j}->{i} out of range")
        object.__setattr__(self, "_pairs", tuple(sorted(self.map.items())))

    @property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        """Sorted ``(target_index, source_index)`` pairs."""
        return self._pairs

    @classmethod
    def identity(cls, length: int) -> "Alignment":
        return cls({j: j for j in range(length)}, frozenset(), length, length)


def align_prompts(src: Prompt, dst: Prompt) -> Alignment:
    a, b = src.tokens, dst.tokens
    n, m = len(a), len(b)
    # suffix LCS lengths
    lcs = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                lcs[i, j] = 1 + lcs[i + 1, j + 1]
            else:
                lcs[i, j] = max(lcs[i + 1, j], lcs[i, j + 1])
    mapping: dict[int, int] = {}
    i = 0
    for j in range(m):
        for k in range(i, n):
            if a[k] == b[j] and 1 + lcs[k + 1, j + 1] == lcs[i, j]:
                mapping[j] = k
                i = k + 1
                break
    new = frozenset(j for j in range(m) if j not in mapping)
    return Alignment(mapping, new, n, m)
