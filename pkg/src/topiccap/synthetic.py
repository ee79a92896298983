"""Synthetic topic-structured corpora with known ground truth.

Each topic owns a content vocabulary and a handful of sentence templates;
features are drawn around per-topic modality centers.  Records either belong
to a single topic or mix two, and the true topic mixture is stored alongside
every record, which makes clustering and captioning claims checkable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, VideoRecord, Vocabulary

_SYLLABLES = [
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu",
    "na", "pe", "ri", "so", "tu", "va", "wi", "xo", "yu", "ze",
]

_FUNCTION_WORDS = [
    "the", "a", "is", "are", "on", "in", "with", "and", "of", "to", "at", "it",
]


@dataclass
class GeneratorConfig:
    k_true: int = 5
    words_per_topic: int = 24
    templates_per_topic: int = 6
    train_per_topic: int = 40
    val_per_topic: int = 10
    test_per_topic: int = 10
    captions_per_video: int = 3
    dim_m1: int = 12
    dim_m2: int = 6
    dim_m3: int = 6
    separation: float = 4.0
    mix_fraction: float = 0.0
    polysemy: float = 0.0
    shared_word_count: int = 8
    noise_scale: float = 1.0
    noise_offset: float = 0.0
    min_count: int = 0
    min_sentence_len: int = 5
    max_sentence_len: int = 8
    # Modality centers are seeded separately from the record stream so corpora
    # generated from the same config share feature geometry across seeds.
    center_seed: int = 0

    def validate(self) -> None:
        if self.k_true < 2:
            raise ValueError("k_true must be at least 2")
        if not 0.0 <= self.mix_fraction <= 1.0:
            raise ValueError("mix_fraction must lie in [0, 1]")
        if not 0.0 <= self.polysemy < 1.0:
            raise ValueError("polysemy must lie in [0, 1)")
        if self.words_per_topic < 2 or self.templates_per_topic < 1:
            raise ValueError("need at least 2 content words and 1 template per topic")
        if self.min_sentence_len < 2 or self.max_sentence_len < self.min_sentence_len:
            raise ValueError("bad sentence length range")
        if self.shared_word_count < 1:
            raise ValueError("need at least one shared function word")
        if self.separation < 0:
            raise ValueError("separation must be non-negative")


def shared_function_words(config: GeneratorConfig) -> list[str]:
    """The function words every topic shares; these double as the stopword list."""
    words = list(_FUNCTION_WORDS)
    while len(words) < config.shared_word_count:
        words.append(f"fw{len(words)}")
    return words[: config.shared_word_count]


def _pure_word(topic: int, j: int) -> str:
    word = _SYLLABLES[topic % 20] + _SYLLABLES[j % 20]
    if topic >= 20 or j >= 20:
        word += f"{topic // 20}{j // 20}"
    return word


def _poly_word(topic: int, j: int) -> str:
    # Shared between `topic` and the next topic (cyclically).
    return "py" + _SYLLABLES[topic % 20] + _SYLLABLES[j % 20]


def topic_vocabularies(config: GeneratorConfig) -> list[list[str]]:
    """Per-topic content vocabularies, a pure function of the config.

    With ``polysemy`` zero the vocabularies are pairwise disjoint.  Otherwise
    that fraction of each topic's words is drawn from pools shared with the
    neighboring topics: a shared word belongs to exactly two topics (one word
    per topic is single-owner when the shared count is odd).
    """
    config.validate()
    k = config.k_true
    n_poly = int(round(config.polysemy * config.words_per_topic))
    n_pure = config.words_per_topic - n_poly
    n_prev = n_poly // 2
    n_next = n_poly - n_prev
    vocabs = []
    for topic in range(k):
        words = [_pure_word(topic, j) for j in range(n_pure)]
        words += [_poly_word(topic, j) for j in range(n_next)]
        words += [_poly_word((topic - 1) % k, j) for j in range(n_prev)]
        vocabs.append(words)
    if n_poly == 0:
        seen: set[str] = set()
        for words in vocabs:
            overlap = seen.intersection(words)
            if overlap:
                raise ValueError(f"topic vocabularies overlap on {sorted(overlap)[:3]}")
            seen.update(words)
    return vocabs


def _make_templates(
    config: GeneratorConfig,
    rng: np.random.Generator,
    shared: list[str],
    vocabs: list[list[str]],
):
    """Build per-topic sentence templates.

    A template mixes literal function words with fixed topic words plus one or
    two choice slots that alternate between two topic words, so references
    share long n-grams while still varying.  Content words are dealt from a
    shuffled copy of the topic vocabulary, cycling after every word has been
    used once, which guarantees full vocabulary coverage.
    """
    templates = []
    for topic in range(config.k_true):
        deck = list(vocabs[topic])
        rng.shuffle(deck)
        cursor = 0

        def deal() -> str:
            nonlocal cursor
            word = deck[cursor % len(deck)]
            cursor += 1
            if cursor % len(deck) == 0:
                rng.shuffle(deck)
            return word

        per_topic = []
        for _ in range(config.templates_per_topic):
            length = int(rng.integers(config.min_sentence_len, config.max_sentence_len + 1))
            is_content = [bool(rng.random() >= 0.3) for _ in range(length)]
            while sum(is_content) < 3:
                is_content[int(rng.integers(length))] = True
            content_positions = [pos for pos, flag in enumerate(is_content) if flag]
            n_slots = int(rng.integers(1, 3))
            slot_positions = set(
                content_positions[i]
                for i in rng.permutation(len(content_positions))[:n_slots]
            )
            template = []
            for pos in range(length):
                if not is_content[pos]:
                    template.append(("w", shared[int(rng.integers(len(shared)))]))
                elif pos in slot_positions:
                    template.append(("slot", (deal(), deal())))
                else:
                    template.append(("w", deal()))
            per_topic.append(template)
        templates.append(per_topic)
    return templates


def _make_centers(config: GeneratorConfig) -> list[list[np.ndarray]]:
    rng = np.random.default_rng(config.center_seed)
    centers = []
    for dim in (config.dim_m1, config.dim_m2, config.dim_m3):
        per_modality = []
        for _ in range(config.k_true):
            direction = rng.normal(size=dim)
            direction /= np.linalg.norm(direction)
            per_modality.append(direction * config.separation * config.noise_scale)
        centers.append(per_modality)
    return centers


def _instantiate(template, rng: np.random.Generator) -> list[str]:
    return [
        item[1] if item[0] == "w" else item[1][int(rng.integers(2))] for item in template
    ]


def generate_synthetic_corpus(config: GeneratorConfig, seed: int) -> Corpus:
    """Generate a corpus with known per-record topic mixtures.

    Deterministic per (config, seed): the same arguments always produce a
    byte-identical corpus file.
    """
    config.validate()
    vocabs = topic_vocabularies(config)
    shared = shared_function_words(config)
    centers = _make_centers(config)
    rng = np.random.default_rng(seed)
    templates = _make_templates(config, rng, shared, vocabs)

    records = []
    split_sizes = (
        ("train", config.train_per_topic),
        ("val", config.val_per_topic),
        ("test", config.test_per_topic),
    )
    for split, per_topic in split_sizes:
        for topic in range(config.k_true):
            for i in range(per_topic):
                mixed = config.mix_fraction > 0 and rng.random() < config.mix_fraction
                if mixed:
                    partner = int(rng.integers(config.k_true - 1))
                    if partner >= topic:
                        partner += 1
                    weight = float(rng.uniform(0.0, 1.0))
                else:
                    partner = topic
                    weight = 1.0
                mix = np.zeros(config.k_true)
                mix[topic] += weight
                mix[partner] += 1.0 - weight

                feats = []
                for m, dim in enumerate((config.dim_m1, config.dim_m2, config.dim_m3)):
                    center = weight * centers[m][topic] + (1.0 - weight) * centers[m][partner]
                    noise = rng.normal(size=dim) * config.noise_scale
                    feats.append(center + noise + config.noise_offset)

                captions = []
                for _ in range(config.captions_per_video):
                    drawn = topic if rng.random() < weight else partner
                    template = templates[drawn][int(rng.integers(config.templates_per_topic))]
                    captions.append(_instantiate(template, rng))

                records.append(
                    VideoRecord(
                        id=f"{split}-{topic}-{i:03d}",
                        m1=feats[0],
                        m2=feats[1],
                        m3=feats[2],
                        captions=captions,
                        expert_topic=f"topic{int(np.argmax(mix))}",
                        split=split,
                        true_topic_mix=mix,
                    )
                )

    train_captions = [c for r in records if r.split == "train" for c in r.captions]
    vocabulary = Vocabulary.from_token_lists(train_captions, min_count=config.min_count)
    return Corpus(
        feature_dims=(config.dim_m1, config.dim_m2, config.dim_m3),
        records=records,
        vocabulary=vocabulary,
        min_count=config.min_count,
        k_true=config.k_true,
        stopwords=shared,
    )
