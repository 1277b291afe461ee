"""Corpus ingestion, tag/span conversion and N-way K-shot episode sampling."""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

NONE_TYPE = "none"
OUTSIDE = "O"


class CorpusFormatError(ValueError):
    """Raised when a corpus file does not parse under its declared format."""


class ConfigError(ValueError):
    pass


class InfeasibleSamplingError(RuntimeError):
    def __init__(self, message: str, deficient: dict[str, int]):
        super().__init__(message)
        self.deficient = deficient


@dataclass(frozen=True)
class SpanAnnotation:
    """Inclusive 0-based word span ``[start, end]``."""

    start: int
    end: int
    label: str | None = None

    def key(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass
class TaggedSentence:
    words: list[str]
    tags: list[str]
    sid: str | None = None

    def __post_init__(self) -> None:
        if len(self.words) != len(self.tags):
            raise ValueError(
                f"sentence {self.sid!r}: {len(self.words)} words but {len(self.tags)} tags"
            )

    def identity(self):
        return self.sid if self.sid is not None else tuple(self.words)

    def type_counts(self) -> Counter:
        return Counter(s.label for s in tags_to_spans(self))


@dataclass
class EntityTypeSet:
    types: list[str]

    def __post_init__(self) -> None:
        if not self.types or self.types[0] != NONE_TYPE:
            raise ValueError('type set must start with "none"')
        if len(set(self.types)) != len(self.types):
            raise ValueError(f"duplicate types in {self.types}")
        if len(self.types) < 2:
            raise ValueError("type set needs at least one entity type besides none")

    @classmethod
    def from_entity_types(cls, entity_types: Iterable[str]) -> "EntityTypeSet":
        return cls([NONE_TYPE] + [t for t in entity_types if t != NONE_TYPE])

    @property
    def entity_types(self) -> list[str]:
        return self.types[1:]

    def index(self, label: str) -> int:
        return self.types.index(label)

    def __len__(self) -> int:
        return len(self.types)


@dataclass
class Corpus:
    sentences: list[TaggedSentence]
    types: list[str] = field(default_factory=list)


@dataclass
class Episode:
    support: list[TaggedSentence]
    query: list[TaggedSentence]
    type_set: EntityTypeSet
    n_way: int
    k_shot: int


def strip_tag(tag: str) -> str:
    """``B-person`` / ``I-person`` / ``S-person`` -> ``person``; ``O`` stays ``O``."""
    if tag == OUTSIDE or tag == "":
        return OUTSIDE
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BIESLU":
        return tag[2:]
    return tag


def _finish(words, tags, sentences, inventory):
    if words:
        sid = str(len(sentences))
        sentences.append(TaggedSentence(list(words), list(tags), sid=sid))
        inventory.update(t for t in tags if t != OUTSIDE)
        words.clear()
        tags.clear()


def read_column_bio(path: str | Path) -> Corpus:
    sentences: list[TaggedSentence] = []
    inventory: set[str] = set()
    words: list[str] = []
    tags: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                _finish(words, tags, sentences, inventory)
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise CorpusFormatError(f"{path}:{lineno}: expected 'word<TAB>tag', got {line!r}")
            words.append(parts[0])
            tags.append(strip_tag(parts[1].strip()))
    _finish(words, tags, sentences, inventory)
    return Corpus(sentences, sorted(inventory))


def write_column_bio(corpus: Corpus | Sequence[TaggedSentence], path: str | Path) -> None:
    sents = corpus.sentences if isinstance(corpus, Corpus) else corpus
    with open(path, "w", encoding="utf-8") as fh:
        for s in sents:
            for w, t in zip(s.words, s.tags):
                fh.write(f"{w}\t{t}\n")
            fh.write("\n")


def _sentences_from_json(block: dict, where: str) -> list[TaggedSentence]:
    words, labels = block.get("word"), block.get("label")
    if words is None or labels is None or len(words) != len(labels):
        raise CorpusFormatError(f"{where}: needs equal-length 'word' and 'label' lists")
    out = []
    for i, (w, l) in enumerate(zip(words, labels)):
        if len(w) != len(l):
            raise CorpusFormatError(f"{where}[{i}]: {len(w)} words vs {len(l)} labels")
        out.append(TaggedSentence(list(w), [strip_tag(t) for t in l]))
    return out


def episode_from_dict(obj: dict, where: str = "episode") -> Episode:
    for key in ("support", "query", "types"):
        if key not in obj:
            raise CorpusFormatError(f"{where}: missing key {key!r}")
    type_set = EntityTypeSet.from_entity_types(obj["types"])
    allowed = set(type_set.entity_types)

    def clean(sents):
        # tags outside the episode type set are treated as O, as in Few-NERD episodes
        for s in sents:
            s.tags = [t if t in allowed else OUTSIDE for t in s.tags]
        return sents

    support = clean(_sentences_from_json(obj["support"], f"{where}.support"))
    query = clean(_sentences_from_json(obj["query"], f"{where}.query"))
    n_way = len(type_set.entity_types)
    k_shot = int(obj.get("k_shot", _infer_k_shot(support, type_set)))
    return Episode(support, query, type_set, n_way, k_shot)


def _infer_k_shot(support, type_set) -> int:
    counts = Counter()
    for s in support:
        counts.update(s.type_counts())
    vals = [counts[t] for t in type_set.entity_types if counts[t] > 0]
    # support counts lie in [K, 2K]; the smallest count is the tightest guess
    return max(1, min(vals)) if vals else 1


def episode_to_dict(ep: Episode) -> dict:
    def block(sents):
        return {"word": [s.words for s in sents], "label": [s.tags for s in sents]}

    return {
        "support": block(ep.support),
        "query": block(ep.query),
        "types": ep.type_set.entity_types,
        "k_shot": ep.k_shot,
    }


def read_episodes(path: str | Path) -> list[Episode]:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            episodes.append(episode_from_dict(obj, where=f"{path}:{lineno}"))
    return episodes


def write_episodes(episodes: Iterable[Episode], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_dict(ep), ensure_ascii=False) + "\n")


def load_corpus(path: str | Path, format: str = "column-bio"):
    """Load a corpus file.

    ``column-bio`` returns a :class:`Corpus`; ``episode-json`` returns a list of
    :class:`Episode` (one per JSON line).
    """
    if format not in ("column-bio", "episode-json"):
        raise ConfigError(f"unknown corpus format {format!r} (expected column-bio or episode-json)")
    if not Path(path).exists():
        raise FileNotFoundError(path)
    if format == "column-bio":
        return read_column_bio(path)
    return read_episodes(path)


def tags_to_spans(sent: TaggedSentence | Sequence[str]) -> list[SpanAnnotation]:
    tags = sent.tags if isinstance(sent, TaggedSentence) else list(sent)
    spans = []
    start = None
    for i, tag in enumerate(tags + [OUTSIDE]):
        if start is not None and (i == len(tags) or tag != tags[start]):
            spans.append(SpanAnnotation(start, i - 1, tags[start]))
            start = None
        if start is None and tag != OUTSIDE and i < len(tags):
            start = i
    return spans


def spans_to_tags(spans: Iterable[SpanAnnotation], length: int) -> list[str]:
    tags = [OUTSIDE] * length
    for s in spans:
        for i in range(s.start, s.end + 1):
            tags[i] = s.label
    return tags


# ---------------------------------------------------------------------------
# sampling


@dataclass
class ValidationReport:
    support_counts: dict[str, int]
    query_counts: dict[str, int]
    band_failures: list[tuple[str, str, int]]
    disjoint: bool
    n_way_ok: bool

    @property
    def ok(self) -> bool:
        return not self.band_failures and self.disjoint and self.n_way_ok

    def describe(self) -> str:
        if self.ok:
            return "ok"
        msgs = [f"{part} class {name!r} has {cnt} mentions" for part, name, cnt in self.band_failures]
        if not self.disjoint:
            msgs.append("support and query share a sentence")
        if not self.n_way_ok:
            msgs.append("type count differs from n_way")
        return "; ".join(msgs)


def _count(sents: Sequence[TaggedSentence], types: Sequence[str]) -> dict[str, int]:
    c = Counter()
    for s in sents:
        c.update(s.type_counts())
    return {t: c.get(t, 0) for t in types}


def validate_episode(ep: Episode) -> ValidationReport:
    types = ep.type_set.entity_types
    sup, qry = _count(ep.support, types), _count(ep.query, types)
    lo, hi = ep.k_shot, 2 * ep.k_shot
    failures = [("support", t, sup[t]) for t in types if not lo <= sup[t] <= hi]
    failures += [("query", t, qry[t]) for t in types if not lo <= qry[t] <= hi]
    disjoint = not ({s.identity() for s in ep.support} & {s.identity() for s in ep.query})
    return ValidationReport(sup, qry, failures, disjoint, len(types) == ep.n_way)


def _greedy_fill(pool, counts_of, targets, k, rng) -> list[int] | None:
    """Greedily pick sentences until every target class has >= k mentions.

    Returns None if the band [k, 2k] cannot be met from this pool.
    """
    order = list(pool)
    rng.shuffle(order)
    filled = {t: 0 for t in targets}
    chosen: list[int] = []
    while any(v < k for v in filled.values()):
        best, best_gain = None, 0
        for idx in order:
            c = counts_of[idx]
            if any(filled[t] + n > 2 * k for t, n in c.items()):
                continue
            gain = sum(min(n, k - filled[t]) for t, n in c.items() if filled[t] < k)
            if gain > best_gain:
                best, best_gain = idx, gain
        if best is None:
            return None
        chosen.append(best)
        order.remove(best)
        for t, n in counts_of[best].items():
            filled[t] += n
    return chosen


def sample_episode(
    corpus: Corpus,
    n_way: int,
    k_shot: int,
    rng_seed: int,
    max_tries: int = 1000,
) -> Episode:
    """Sample an N-way K-shot episode whose support and query each hold K..2K
    mentions per class. Sentences containing any class outside the chosen set
    are never used."""
    counts_of = {i: s.type_counts() for i, s in enumerate(corpus.sentences)}
    total = Counter()
    for c in counts_of.values():
        total.update(c)
    eligible = sorted(t for t in total if total[t] >= 2 * k_shot)
    if len(eligible) < n_way:
        deficient = {t: total[t] for t in sorted(total) if total[t] < 2 * k_shot}
        raise InfeasibleSamplingError(
            f"need {n_way} classes with >= {2 * k_shot} mentions, found {len(eligible)}; "
            f"deficient: {deficient}",
            deficient,
        )
    rng = random.Random(rng_seed)
    shortfall: Counter = Counter()
    for _ in range(max_tries):
        targets = sorted(rng.sample(eligible, n_way))
        tset = set(targets)
        pool = [i for i, c in counts_of.items() if c and set(c) <= tset]
        support = _greedy_fill(pool, counts_of, targets, k_shot, rng)
        if support is None:
            shortfall.update(targets)
            continue
        rest = [i for i in pool if i not in set(support)]
        query = _greedy_fill(rest, counts_of, targets, k_shot, rng)
        if query is None:
            shortfall.update(targets)
            continue
        return Episode(
            support=[corpus.sentences[i] for i in support],
            query=[corpus.sentences[i] for i in query],
            type_set=EntityTypeSet.from_entity_types(targets),
            n_way=n_way,
            k_shot=k_shot,
        )
    deficient = {t: total[t] for t, _ in shortfall.most_common()}
    raise InfeasibleSamplingError(
        f"no valid {n_way}-way {k_shot}-shot episode after {max_tries} tries; "
        f"classes most often failing: {deficient}",
        deficient,
    )


def sample_episodes(corpus: Corpus, n_way: int, k_shot: int, count: int, seed: int) -> list[Episode]:
    return [sample_episode(corpus, n_way, k_shot, rng_seed=seed * 100003 + i) for i in range(count)]
