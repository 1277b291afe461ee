"""Vocabulary-file driven WordPiece subtokenizer.

Words are split greedily longest-match-first; continuation pieces carry a
``##`` prefix. The same handle interface is implemented by the Hugging Face
adapter in :mod:`promptner.encoder_backend`.
"""

from __future__ import annotations

import string
from collections import Counter
from pathlib import Path
from typing import Iterable

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = [PAD, UNK, CLS, SEP, MASK]
_BASE_CHARS = string.ascii_lowercase + string.digits + string.punctuation


class WordPieceTokenizer:
    def __init__(self, vocab: list[str], lowercase: bool = True, max_chars_per_word: int = 100):
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary contains duplicates")
        self.vocab = list(vocab)
        self.token_to_id = {t: i for i, t in enumerate(self.vocab)}
        self.lowercase = lowercase
        self.max_chars_per_word = max_chars_per_word
        for tok in (PAD, UNK):
            if tok not in self.token_to_id:
                raise ValueError(f"vocabulary lacks {tok}")

    unk_token = UNK

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    def __len__(self) -> int:
        return len(self.vocab)

    def tokenize_word(self, word: str) -> list[str]:
        if self.lowercase:
            word = word.lower()
        if not word:
            return []
        if len(word) > self.max_chars_per_word:
            return [UNK]
        pieces = []
        start = 0
        while start < len(word):
            end = len(word)
            cur = None
            while start < end:
                sub = word[start:end]
                if start > 0:
                    sub = "##" + sub
                if sub in self.token_to_id:
                    cur = sub
                    break
                end -= 1
            if cur is None:
                return [UNK]
            pieces.append(cur)
            start = end
        return pieces

    def convert_tokens_to_ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, self.unk_id) for t in tokens]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.vocab) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path: str | Path, lowercase: bool = True) -> "WordPieceTokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([l for l in lines if l], lowercase=lowercase)

    @classmethod
    def build(
        cls,
        sentences: Iterable[Iterable[str]],
        min_freq: int = 2,
        extra_words: Iterable[str] = (),
        lowercase: bool = True,
    ) -> "WordPieceTokenizer":
        """Whole-word vocabulary for words seen ``min_freq`` times plus single
        characters, so every ASCII word remains tokenizable."""
        counts: Counter = Counter()
        for words in sentences:
            counts.update(w.lower() if lowercase else w for w in words)
        for w in extra_words:
            counts[w.lower() if lowercase else w] += min_freq
        chars = set(_BASE_CHARS)
        for w in counts:
            chars.update(w)
        vocab = list(SPECIALS)
        vocab += sorted(chars)
        vocab += sorted("##" + c for c in chars)
        seen = set(vocab)
        for w in sorted(counts):
            if counts[w] >= min_freq and w not in seen:
                vocab.append(w)
                seen.add(w)
        return cls(vocab, lowercase=lowercase)
