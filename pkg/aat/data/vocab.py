"""
Token vocabularies and the caption preprocessing rules.
"""

from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

from ..errors import ConfigError, TokenLookupError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

DEFAULT_MIN_COUNT = 5
DEFAULT_MAX_LEN = 16


def tokenize(caption: str) -> List[str]:
    """
    Lowercases a caption and splits it on whitespace.

    ``` python
    >>> tokenize("A  Dog on the Grass")
    ['a', 'dog', 'on', 'the', 'grass']
    ```
    """
    return caption.lower().split()


class Vocabulary:
    """
    A fixed list of tokens. The first four ids are always `<pad>`, `<bos>`, `<eos>` and `<unk>`.
    """

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: List[str] = list(SPECIAL_TOKENS)
        self._ids: Dict[str, int] = {t: i for i, t in enumerate(self._tokens)}
        for token in tokens:
            if token in self._ids:
                raise ConfigError(f"duplicate token {token!r}")
            if not token or any(c.isspace() for c in token):
                raise ConfigError(f"tokens must be non-empty and contain no whitespace: {token!r}")
            self._ids[token] = len(self._tokens)
            self._tokens.append(token)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __repr__(self) -> str:
        return f"Vocabulary({len(self)} tokens)"

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise TokenLookupError(token_id, len(self._tokens))
        return self._tokens[token_id]

    def encode(self, caption: Union[str, Sequence[str]]) -> List[int]:
        """
        Maps a caption to token ids; unknown tokens become `<unk>`. No BOS or EOS is added.
        """
        tokens = tokenize(caption) if isinstance(caption, str) else caption
        return [self.id_of(t) for t in tokens]

    def decode(self, token_ids: Iterable[int]) -> List[str]:
        """
        Maps token ids back to tokens, stopping at the first `<eos>` and skipping padding and `<bos>`.
        """
        words = []
        for token_id in token_ids:
            if token_id == EOS:
                break
            if token_id in (PAD, BOS):
                continue
            words.append(self.token_of(token_id))
        return words

    def save(self, path: Union[str, Path]) -> None:
        """Writes one token per line, special tokens included."""
        Path(path).write_text("".join(f"{t}\n" for t in self._tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split()
        if tuple(lines[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigError(f"{path}: a vocabulary file must start with {SPECIAL_TOKENS}")
        return cls(lines[len(SPECIAL_TOKENS) :])


def build_vocab(
    corpus: Iterable[str],
    min_count: int = DEFAULT_MIN_COUNT,
    max_len: int = DEFAULT_MAX_LEN,
) -> Tuple[Vocabulary, List[List[str]]]:
    """
    Builds a vocabulary from a caption corpus.

    Words are lowercased and counted over the full captions; words seen fewer than `min_count` times are
    dropped. The kept words are ordered by decreasing count, ties broken alphabetically.

    :param corpus: One caption per item, tokenized on whitespace.
    :param min_count: Minimum number of occurrences of a kept word.
    :param max_len: Captions are truncated to this many words.
    :return: The vocabulary and the tokenized, truncated captions.
    """
    if min_count < 1 or max_len < 1:
        raise ConfigError("min_count and max_len must be >= 1")
    captions = [tokenize(line) for line in corpus]
    captions = [c for c in captions if c]
    if not captions:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    counts = Counter(word for caption in captions for word in caption)
    kept = sorted(
        (w for w, n in counts.items() if n >= min_count and w not in SPECIAL_TOKENS),
        key=lambda w: (-counts[w], w),
    )
    return Vocabulary(kept), [caption[:max_len] for caption in captions]
