"""Data model for paired (feature-vector, sentence-set) records.

A corpus is a header plus a list of records, each holding three modality
feature vectors, one or more reference sentences, and bookkeeping fields.
Sentences are stored as token lists without begin/end markers; the decoder
owns those.
"""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
BOS_ID = 0
EOS_ID = 1
UNK_ID = 2

SPECIALS = (BOS, EOS, UNK)

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass
class Vocabulary:
    """Token <-> id bijection with reserved begin/end/unknown markers.

    Ids are dense from 0, with the three specials first and the retained
    content tokens following in sorted order, so a vocabulary is a pure
    function of the token multiset and ``min_count``.
    """

    tokens: list[str]
    min_count: int = 0
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:3] != list(SPECIALS):
            raise ValueError("vocabulary must start with the reserved specials")
        for special in SPECIALS:
            if self.tokens.count(special) != 1:
                raise ValueError(f"special token {special!r} must appear exactly once")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @classmethod
    def from_token_lists(cls, token_lists, min_count: int = 0) -> "Vocabulary":
        """Build a vocabulary keeping tokens that appear more than ``min_count`` times."""
        counts = Counter()
        for tokens in token_lists:
            counts.update(tokens)
        kept = sorted(tok for tok, c in counts.items() if c > min_count and tok not in SPECIALS)
        return cls(tokens=list(SPECIALS) + kept, min_count=min_count)

    def encode(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode_all(self, tokens) -> list[int]:
        return [self._index.get(tok, UNK_ID) for tok in tokens]

    def decode(self, token_id: int) -> str:
        return self.tokens[token_id]

    def decode_all(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class VideoRecord:
    """One record: three modality feature vectors plus reference captions."""

    id: str
    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    captions: list[list[str]]
    expert_topic: str | None = None
    split: str = "train"
    true_topic_mix: np.ndarray | None = None

    def __post_init__(self):
        self.m1 = np.asarray(self.m1, dtype=np.float64)
        self.m2 = np.asarray(self.m2, dtype=np.float64)
        self.m3 = np.asarray(self.m3, dtype=np.float64)
        if self.true_topic_mix is not None:
            self.true_topic_mix = np.asarray(self.true_topic_mix, dtype=np.float64)
        if not self.captions or any(len(c) == 0 for c in self.captions):
            raise ValueError(f"record {self.id}: needs at least one non-empty caption")
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"record {self.id}: unknown split {self.split!r}")

    def features(self) -> np.ndarray:
        """Concatenated multimodal feature vector; a missing modality is all zeros."""
        return np.concatenate([self.m1, self.m2, self.m3])

    def feature_dims(self) -> tuple[int, int, int]:
        return (self.m1.size, self.m2.size, self.m3.size)


@dataclass
class Corpus:
    feature_dims: tuple[int, int, int]
    records: list[VideoRecord]
    vocabulary: Vocabulary
    min_count: int = 0
    k_true: int | None = None
    stopwords: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate record ids")
        for r in self.records:
            if r.feature_dims() != tuple(self.feature_dims):
                raise ValueError(
                    f"record {r.id}: feature dims {r.feature_dims()} do not match "
                    f"header {tuple(self.feature_dims)}"
                )

    def split(self, name: str) -> list[VideoRecord]:
        return [r for r in self.records if r.split == name]

    def record_by_id(self, record_id: str) -> VideoRecord:
        for r in self.records:
            if r.id == record_id:
                return r
        raise KeyError(record_id)


def clean_sentence(raw: str) -> list[str]:
    """Lowercase, strip punctuation, and split on whitespace."""
    return raw.lower().translate(_PUNCT_TABLE).split()


def preprocess(raw_sentences: list[str], min_count: int = 0) -> tuple[Vocabulary, list[list[str]]]:
    """Clean raw sentences and build a vocabulary over the surviving tokens.

    Tokens whose total frequency is at most ``min_count`` are replaced by the
    unknown marker in the returned token lists.
    """
    if not raw_sentences:
        raise ValueError("preprocess: no sentences given")
    tokenized = [clean_sentence(s) for s in raw_sentences]
    if all(len(t) == 0 for t in tokenized):
        raise ValueError("preprocess: all sentences empty after cleaning")
    vocab = Vocabulary.from_token_lists(tokenized, min_count=min_count)
    mapped = [[tok if tok in vocab else UNK for tok in sent] for sent in tokenized]
    return vocab, mapped


def bag_of_words(
    record: VideoRecord, vocabulary: Vocabulary, stopwords: set[str] | frozenset[str]
) -> tuple[np.ndarray, bool]:
    """L2-normalized token counts pooled over all of a record's captions.

    Stopwords, the reserved specials, and out-of-vocabulary tokens are
    excluded.  Returns the vector and a flag that is True when every token was
    excluded (the vector is then all zeros).
    """
    vec = np.zeros(len(vocabulary), dtype=np.float64)
    for caption in record.captions:
        for tok in caption:
            if tok in stopwords or tok in SPECIALS:
                continue
            idx = vocabulary.encode(tok)
            if idx == UNK_ID:
                continue
            vec[idx] += 1.0
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        return vec, True
    return vec / norm, False


def _record_to_json(record: VideoRecord) -> dict:
    return {
        "id": record.id,
        "features": {
            "m1": record.m1.tolist(),
            "m2": record.m2.tolist(),
            "m3": record.m3.tolist(),
        },
        "captions": record.captions,
        "expert_topic": record.expert_topic,
        "split": record.split,
        "true_topic_mix": None if record.true_topic_mix is None else record.true_topic_mix.tolist(),
    }


def save_corpus(corpus: Corpus, path) -> None:
    """Write a corpus as a header line followed by one JSON record per line."""
    header = {
        "feature_dims": list(corpus.feature_dims),
        "k_true": corpus.k_true,
        "min_count": corpus.min_count,
        "stopwords": list(corpus.stopwords),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record in corpus.records:
            fh.write(json.dumps(_record_to_json(record), sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    """Read a corpus file; the vocabulary is rebuilt from the train captions."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty corpus file")
    try:
        header = json.loads(lines[0])
        feature_dims = tuple(int(d) for d in header["feature_dims"])
        min_count = int(header["min_count"])
        k_true = header.get("k_true")
        stopwords = list(header.get("stopwords", []))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path} line 1: bad header ({exc})") from None
    if len(feature_dims) != 3:
        raise ValueError(f"{path} line 1: feature_dims must have three entries")

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            feats = obj["features"]
            record = VideoRecord(
                id=obj["id"],
                m1=feats["m1"],
                m2=feats["m2"],
                m3=feats["m3"],
                captions=[list(c) for c in obj["captions"]],
                expert_topic=obj.get("expert_topic"),
                split=obj["split"],
                true_topic_mix=obj.get("true_topic_mix"),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path} line {lineno}: malformed record ({exc})") from None
        if record.feature_dims() != feature_dims:
            raise ValueError(
                f"{path} line {lineno}: feature dims {record.feature_dims()} "
                f"do not match header {feature_dims}"
            )
        records.append(record)

    train_captions = [c for r in records if r.split == "train" for c in r.captions]
    if not train_captions:
        raise ValueError(f"{path}: no training captions to build a vocabulary from")
    vocab = Vocabulary.from_token_lists(train_captions, min_count=min_count)
    return Corpus(
        feature_dims=feature_dims,
        records=records,
        vocabulary=vocab,
        min_count=min_count,
        k_true=None if k_true is None else int(k_true),
        stopwords=stopwords,
    )
