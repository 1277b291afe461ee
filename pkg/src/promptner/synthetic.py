"""Template-generated toy corpora for desk-scale training and evaluation."""

from __future__ import annotations

import random
from typing import Sequence

from promptner.episode_data import OUTSIDE, Corpus, TaggedSentence

LEXICON: dict[str, list[str]] = {
    "person": ["steve jobs", "marie curie", "alan turing", "ada lovelace", "john smith", "grace hopper"],
    "city": ["paris", "london", "new york", "tokyo", "berlin", "madrid"],
    "company": ["apple", "google", "microsoft", "intel", "amazon", "nokia"],
    "food": ["pizza", "sushi", "pasta", "bread", "cheese", "rice"],
    "sport": ["tennis", "soccer", "golf", "cricket", "rugby", "hockey"],
    "animal": ["lion", "zebra", "tiger", "eagle", "dolphin", "wolf"],
    "instrument": ["violin", "piano", "guitar", "cello", "flute", "drums"],
    "disease": ["malaria", "measles", "asthma", "diabetes", "cholera", "influenza"],
}

TRAIN_CLASSES = ["person", "city", "company", "food"]
NOVEL_CLASSES = ["sport", "animal", "instrument", "disease"]

# every template mentions exactly one class; two-class sentences join two templates
TEMPLATES: dict[str, list[str]] = {
    "person": ["{x} gave a talk yesterday", "we met {x} at the event", "a letter from {x} arrived"],
    "city": ["they moved to {x} in june", "the trip to {x} was long", "rain fell over {x} today"],
    "company": ["shares of {x} rose sharply", "{x} hired new engineers", "the office of {x} closed"],
    "food": ["dinner was {x} again", "she cooked {x} for us", "the shop sold fresh {x}"],
    "sport": ["he plays {x} every week", "the {x} match ended late", "kids learn {x} at school"],
    "animal": ["a {x} was seen nearby", "the zoo keeps one {x}", "photos of the {x} went viral"],
    "instrument": ["she practised the {x} daily", "a new {x} was delivered", "the {x} sounded sharp"],
    "disease": ["doctors treated {x} cases", "cases of {x} were reported", "a vaccine against {x} exists"],
}


class _Deck:
    """Draw without replacement, reshuffling when exhausted, so every item
    comes up about equally often."""

    def __init__(self, items: Sequence[str], rng: random.Random):
        self.items, self.rng, self.left = list(items), rng, []

    def draw(self) -> str:
        if not self.left:
            self.left = self.rng.sample(self.items, len(self.items))
        return self.left.pop()


def make_sentence(classes: Sequence[str], rng: random.Random, lexicon=LEXICON, decks=None) -> TaggedSentence:
    words: list[str] = []
    tags: list[str] = []
    for i, cls in enumerate(classes):
        if i:
            words.append("and")
            tags.append(OUTSIDE)
        template = decks[("t", cls)].draw() if decks else rng.choice(TEMPLATES[cls])
        for tok in template.split():
            if tok == "{x}":
                ent = (decks[("x", cls)].draw() if decks else rng.choice(lexicon[cls])).split()
                words += ent
                tags += [cls] * len(ent)
            else:
                words.append(tok)
                tags.append(OUTSIDE)
    words.append(".")
    tags.append(OUTSIDE)
    return TaggedSentence(words, tags)


def make_corpus(
    classes: Sequence[str],
    n_sentences: int,
    seed: int,
    pair_fraction: float = 0.25,
    lexicon=LEXICON,
) -> Corpus:
    """Round-robin over classes so every class is equally represented; a
    ``pair_fraction`` of sentences mention two distinct classes. Templates and
    surface forms are dealt from per-class decks for even coverage."""
    rng = random.Random(seed)
    decks = {}
    for c in classes:
        decks[("t", c)] = _Deck(TEMPLATES[c], rng)
        decks[("x", c)] = _Deck(lexicon[c], rng)
    sents = []
    for i in range(n_sentences):
        first = classes[i % len(classes)]
        picked = [first]
        if rng.random() < pair_fraction and len(classes) > 1:
            picked.append(rng.choice([c for c in classes if c != first]))
        s = make_sentence(picked, rng, lexicon, decks)
        s.sid = str(i)
        sents.append(s)
    return Corpus(sents, sorted(set(classes)))


def observed_lexicon(corpus: Corpus) -> dict[str, list[str]]:
    """Surface forms actually seen per class, usable as a ``lexicon``."""
    from promptner.episode_data import tags_to_spans

    seen: dict[str, set[str]] = {}
    for s in corpus.sentences:
        for sp in tags_to_spans(s):
            seen.setdefault(sp.label, set()).add(" ".join(s.words[sp.start : sp.end + 1]))
    return {k: sorted(v) for k, v in seen.items()}


def desk_config():
    """Settings for the tiny encoder on the synthetic corpus.

    The tiny encoder is trained from scratch, so its learning rates sit well
    above those used for a pre-trained encoder. Fine-tuning on a 2-4 sentence
    support set uses a tenth of the training rate for the encoder and a third
    for the decoder, enough to pick up unseen entities within 50 steps.
    """
    from promptner.config import FinetuneConfig, ModelConfig, RunConfig, TrainConfig

    return RunConfig(
        model=ModelConfig(d=32, layers=2),
        train=TrainConfig(encoder_lr=1e-3, decoder_lr=3e-3, max_steps=500, eval_every=25),
        finetune=FinetuneConfig(encoder_lr=1e-4, decoder_lr=1e-3),
    )


def desk_episodes(
    seed: int = 0,
    n_way: int = 2,
    k_shot: int = 2,
    train_sentences: int = 40,
    train_episodes: int = 500,
    dev_episodes: int = 30,
    held_episodes: int = 5,
    novel_episodes: int = 10,
) -> dict:
    """Train/dev/held/novel episode lists for desk-scale experiments.

    ``dev`` and ``held`` reuse the training classes and only surface forms
    seen in the training corpus; ``novel`` uses classes never trained on.
    """
    from promptner.episode_data import sample_episodes

    train = make_corpus(TRAIN_CLASSES, train_sentences, seed=seed)
    seen = observed_lexicon(train)
    dev = make_corpus(TRAIN_CLASSES, 40, seed=seed + 555, lexicon=seen)
    held = make_corpus(TRAIN_CLASSES, 40, seed=seed + 99, lexicon=seen)
    novel = make_corpus(NOVEL_CLASSES, 40, seed=seed + 7)
    return {
        "corpus": train,
        "train": sample_episodes(train, n_way, k_shot, train_episodes, seed=seed),
        "dev": sample_episodes(dev, n_way, k_shot, dev_episodes, seed=seed + 1),
        "held": sample_episodes(held, n_way, k_shot, held_episodes, seed=seed + 2),
        "novel": sample_episodes(novel, n_way, k_shot, novel_episodes, seed=seed + 3),
    }
