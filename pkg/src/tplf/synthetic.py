"""Small synthetic corpora in the workbench's data formats.

Everything is drawn from one shared pseudo-word vocabulary: entity surface
forms per type, topic words (each with a synonym), and function words. The
generators produce BIO-tagged sentences, paraphrase-style sentence pairs from
several "source datasets", and topic- or entity-labelled sentences for probes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ENTITY_TYPES = ("PER", "LOC", "ORG", "MISC")
_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def _pseudo_word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                   for _ in range(syllables))


@dataclass
class SyntheticWorld:
    """A fixed lexicon shared by every generator drawn from it."""

    entities: dict[str, list[tuple[str, ...]]]
    topics: list[list[str]]
    synonyms: dict[str, str]
    function_words: list[str]
    seed: int = 0
    entity_groups: dict[tuple[str, ...], int] = field(default_factory=dict)

    @classmethod
    def create(cls, seed: int = 0, n_entities: int = 40, n_topics: int = 8, words_per_topic: int = 12,
               n_function: int = 30, n_groups: int = 4) -> "SyntheticWorld":
        rng = np.random.default_rng(seed)
        used: set[str] = set()

        def fresh(syl):
            while True:
                w = _pseudo_word(rng, syl)
                if w not in used:
                    used.add(w)
                    return w

        function_words = [fresh(1) for _ in range(n_function)]
        entities = {}
        for kind in ENTITY_TYPES:
            forms = []
            for _ in range(n_entities):
                n_words = int(rng.choice([1, 1, 2, 2, 3]))
                forms.append(tuple(fresh(3).capitalize() for _ in range(n_words)))
            entities[kind] = forms
        topics, synonyms = [], {}
        for _ in range(n_topics):
            words = [fresh(2) for _ in range(words_per_topic)]
            for w in words:
                s = fresh(2)
                synonyms[w], synonyms[s] = s, w
            topics.append(words)
        groups = {}
        for kind in ENTITY_TYPES:
            for i, form in enumerate(entities[kind]):
                groups[form] = i % n_groups
        return cls(entities, topics, synonyms, function_words, seed, groups)

    @property
    def n_groups(self) -> int:
        return max(self.entity_groups.values()) + 1

    def sentence(self, rng: np.random.Generator, topic: int | None = None, n_entities: int | None = None,
                 length: tuple[int, int] = (6, 11), entity: tuple[str, tuple[str, ...]] | None = None):
        """Words, BIO tags and the chosen topic.

        Filler words mix topic words (or their synonyms) and function words.
        ``entity`` forces the first entity slot to a given (type, surface).
        """
        topic = int(rng.integers(len(self.topics))) if topic is None else topic
        n_fill = int(rng.integers(length[0], length[1] + 1))
        n_ent = int(rng.integers(1, 3)) if n_entities is None else n_entities
        fill = []
        for _ in range(n_fill):
            if rng.random() < 0.55:
                w = self.topics[topic][rng.integers(len(self.topics[topic]))]
                fill.append(self.synonyms[w] if rng.random() < 0.3 else w)
            else:
                fill.append(self.function_words[rng.integers(len(self.function_words))])
        slots = sorted(rng.choice(n_fill + 1, size=n_ent, replace=True).tolist())
        words, tags = [], []
        pos = 0
        for j, slot in enumerate(slots):
            words.extend(fill[pos:slot])
            tags.extend(["O"] * (slot - pos))
            pos = slot
            if j == 0 and entity is not None:
                kind, form = entity
            else:
                kind = ENTITY_TYPES[rng.integers(len(ENTITY_TYPES))]
                form = self.entities[kind][rng.integers(len(self.entities[kind]))]
            words.extend(form)
            tags.extend([f"B-{kind}"] + [f"I-{kind}"] * (len(form) - 1))
        words.extend(fill[pos:])
        tags.extend(["O"] * (n_fill - pos))
        return words, tags, topic

    def ner_corpus(self, n: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        sents, tags = [], []
        for _ in range(n):
            w, t, _ = self.sentence(rng)
            sents.append(w)
            tags.append(t)
        return sents, tags

    def paraphrase(self, words, tags, rng: np.random.Generator, style: str):
        """A positive for ``words``: entities kept, context words perturbed per ``style``."""
        out = []
        for w, t in zip(words, tags):
            if t != "O":
                out.append(w)
                continue
            r = rng.random()
            if style == "synonym" and w in self.synonyms and r < 0.5:
                out.append(self.synonyms[w])
            elif style == "drop" and r < 0.35:
                continue
            else:
                out.append(w)
        if style == "shuffle" and len(out) > 3:
            i = int(rng.integers(len(out) - 2))
            out[i], out[i + 1] = out[i + 1], out[i]
        return out or list(words)

    def pair_corpus(self, n: int, seed: int = 0, styles=("synonym", "drop", "shuffle")):
        """``{style: [(anchor_words, positive_words), ...]}``, one registry entry per style."""
        rng = np.random.default_rng(seed)
        registry: dict[str, list] = {s: [] for s in styles}
        for i in range(n):
            style = styles[i % len(styles)]
            w, t, _ = self.sentence(rng)
            registry[style].append((w, self.paraphrase(w, t, rng, style)))
        return registry

    def topic_classification(self, n: int, seed: int = 0):
        """Sentences labelled by topic."""
        rng = np.random.default_rng(seed)
        sents, labels = [], []
        for _ in range(n):
            w, _, topic = self.sentence(rng)
            sents.append(w)
            labels.append(topic)
        return sents, labels

    def entity_group_classification(self, n: int, seed: int = 0, kind: str | None = None, target: str = "group"):
        """Sentences whose label is a hidden attribute of the (single) entity they mention.

        Two sentences differing only in same-type entities can have different
        labels, so collapsing same-type entities hurts this task. ``target="entity"``
        labels each sentence with the identity of its entity instead of its group.
        """
        if target not in ("group", "entity"):
            raise ValueError(f"target must be 'group' or 'entity', got {target!r}")
        identity = {form: i for i, form in enumerate(f for t in ENTITY_TYPES for f in self.entities[t])}
        rng = np.random.default_rng(seed)
        sents, labels = [], []
        for _ in range(n):
            k = kind or ENTITY_TYPES[rng.integers(len(ENTITY_TYPES))]
            form = self.entities[k][rng.integers(len(self.entities[k]))]
            w, _, _ = self.sentence(rng, n_entities=1, entity=(k, form))
            sents.append(w)
            labels.append(identity[form] if target == "entity" else self.entity_groups[form])
        return sents, labels

    def entity_pair_corpus(self, n: int, seed: int = 0, styles=("synonym", "drop", "shuffle")):
        """Pairs that share only the entity: anchor and positive are different sentences
        (different topics) mentioning the same entity."""
        rng = np.random.default_rng(seed)
        registry: dict[str, list] = {s: [] for s in styles}
        for i in range(n):
            style = styles[i % len(styles)]
            k = ENTITY_TYPES[rng.integers(len(ENTITY_TYPES))]
            form = self.entities[k][rng.integers(len(self.entities[k]))]
            a, _, _ = self.sentence(rng, n_entities=1, entity=(k, form))
            p, pt, _ = self.sentence(rng, n_entities=1, entity=(k, form))
            registry[style].append((a, self.paraphrase(p, pt, rng, style)))
        return registry

    def all_words(self) -> list[list[str]]:
        """Every word of the lexicon, for building a tokenizer vocabulary."""
        words = list(self.function_words)
        for forms in self.entities.values():
            for f in forms:
                words.extend(f)
        for topic in self.topics:
            for w in topic:
                words.extend([w, self.synonyms[w]])
        return [words]
