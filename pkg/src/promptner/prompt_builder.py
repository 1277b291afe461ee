"""Prompted input construction: ``[prefix, label words, sentence]`` plus the
word-to-subtoken alignment used for mean pooling."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Protocol, Sequence

from promptner.episode_data import EntityTypeSet

DEFAULT_TEMPLATE = "Find some entities, such as {types}: "
_WORD_RE = re.compile(r"\w+|[^\w\s]")
_NON_ALNUM = re.compile(r"[^0-9A-Za-z]+")


class PromptConstructionError(ValueError):
    pass


class SubtokenizerHandle(Protocol):
    def tokenize_word(self, word: str) -> list[str]: ...

    def convert_tokens_to_ids(self, tokens: Sequence[str]) -> list[int]: ...


def normalize_type_name(name: str) -> str:
    """Collapse a (possibly multi-word) class name into one label word."""
    return _NON_ALNUM.sub("_", name).strip("_")


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text)


@dataclass(frozen=True)
class PromptTemplate:
    prefix_text: str = DEFAULT_TEMPLATE
    type_separator: str = ", "

    def __post_init__(self) -> None:
        if self.prefix_text.count("{types}") != 1:
            raise ValueError("template needs exactly one {types} placeholder")

    def render(self, type_names: Sequence[str]) -> str:
        return self.prefix_text.replace("{types}", self.type_separator.join(type_names))

    def separator(self) -> str:
        return self.prefix_text.split("{types}", 1)[1]

    def word_parts(self) -> tuple[list[str], list[str]]:
        before, after = self.prefix_text.split("{types}", 1)
        return split_words(before), split_words(after)


@dataclass(frozen=True)
class PromptedInput:
    """A prompted sentence in encoder (text) order.

    ``words`` is ``before + label words + after + sentence``; the separator
    words (``after``) belong to the prefix segment, so the segment view
    ``full_text_words`` is ``[prefix..., label words..., sentence...]``.
    """

    words: tuple[str, ...]
    n_before: int
    n_after: int
    m: int
    n: int
    subtokens: tuple[str, ...]
    input_ids: tuple[int, ...]
    alignment: tuple[tuple[int, int], ...]  # half-open subtoken range per word in `words`

    @property
    def l(self) -> int:
        return self.n_before + self.n_after

    @property
    def label_positions(self) -> range:
        return range(self.n_before, self.n_before + self.m)

    @property
    def sentence_positions(self) -> range:
        start = self.n_before + self.m + self.n_after
        return range(start, start + self.n)

    @property
    def prefix_positions(self) -> list[int]:
        after0 = self.n_before + self.m
        return list(range(self.n_before)) + list(range(after0, after0 + self.n_after))

    @property
    def full_text_words(self) -> list[str]:
        order = self.prefix_positions + list(self.label_positions) + list(self.sentence_positions)
        return [self.words[i] for i in order]

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def sentence_word_ranges(self) -> list[tuple[int, int]]:
        return [self.alignment[i] for i in self.sentence_positions]


def build_prompted_input(
    sentence: Sequence[str],
    type_set: EntityTypeSet,
    template: PromptTemplate,
    tokenizer: SubtokenizerHandle,
) -> PromptedInput:
    if not sentence:
        raise PromptConstructionError("empty sentence")
    before, after = template.word_parts()
    labels = [normalize_type_name(t) for t in type_set.types]
    words = before + labels + after + list(sentence)
    subtokens: list[str] = []
    alignment = []
    label_lo = len(before)
    for i, w in enumerate(words):
        pieces = tokenizer.tokenize_word(w)
        if not pieces:
            if label_lo <= i < label_lo + len(labels):
                raise PromptConstructionError(
                    f"type name {type_set.types[i - label_lo]!r} produced no subtokens"
                )
            pieces = [getattr(tokenizer, "unk_token", "[UNK]")]
        alignment.append((len(subtokens), len(subtokens) + len(pieces)))
        subtokens.extend(pieces)
    return PromptedInput(
        words=tuple(words),
        n_before=len(before),
        n_after=len(after),
        m=len(labels),
        n=len(sentence),
        subtokens=tuple(subtokens),
        input_ids=tuple(tokenizer.convert_tokens_to_ids(subtokens)),
        alignment=tuple(alignment),
    )


def label_word_indices(pi: PromptedInput) -> list[tuple[int, int]]:
    """Subtoken ranges of the label words, in type-set order."""
    return [pi.alignment[i] for i in pi.label_positions]
