"""Tokenisation, dataset and label-description ingestion, batching, synthetic corpora."""

from __future__ import annotations

import json
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class DataError(ValueError):
    pass


def normalize(text: str) -> list[str]:
    """Lowercased word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids if i >= len(RESERVED)]


def build_vocab(corpus: Sequence[str], min_freq: int = 1) -> Vocab:
    """Tokens with count >= ``min_freq``, ordered by frequency then lexicographically."""
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in normalize(text))
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


@dataclass
class TokenSequence:
    ids: np.ndarray  # (n_max,) int
    mask: np.ndarray  # (n_max,) bool, True on real tokens

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def tokenize(text: str, vocab: Vocab, n_max: int, text2: str | None = None) -> TokenSequence:
    """``[CLS] tokens`` or ``[CLS] tokens [SEP] tokens2``, truncated and padded to ``n_max``."""
    if n_max < 3:
        raise DataError("n_max must be at least 3")
    ids = [CLS] + [vocab.id(t) for t in normalize(text)]
    if text2 is not None:
        ids += [SEP] + [vocab.id(t) for t in normalize(text2)]
    ids = ids[:n_max]
    out = np.full(n_max, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    mask = np.zeros(n_max, dtype=bool)
    mask[: len(ids)] = True
    return TokenSequence(out, mask)


def tokenize_many(texts, vocab: Vocab, n_max: int, texts2=None):
    """Stack tokenised sequences into (N, n_max) id and mask matrices."""
    seqs = [
        tokenize(t, vocab, n_max, None if texts2 is None else texts2[i])
        for i, t in enumerate(texts)
    ]
    if not seqs:
        return np.zeros((0, n_max), dtype=np.int64), np.zeros((0, n_max), dtype=bool)
    return np.stack([s.ids for s in seqs]), np.stack([s.mask for s in seqs])


@dataclass
class Example:
    text: str
    label: int
    id: str
    text2: str | None = None


@dataclass
class LabelSet:
    names: list[str]
    descriptions: list[list[str]]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError("label names must be unique")
        if len(self.descriptions) != len(self.names):
            raise DataError("one description list per label is required")

    @property
    def m(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown label {name!r}") from None

    @classmethod
    def bare(cls, names: Sequence[str]) -> "LabelSet":
        return cls(list(names), [[] for _ in names])


def load_dataset(path, label_names: Sequence[str] | None = None):
    """Read JSON Lines examples; returns (examples, label names).

    Labels take first-appearance order unless ``label_names`` fixes them, in
    which case unknown labels are errors.
    """
    path = Path(path)
    names = list(label_names) if label_names is not None else []
    known = {n: i for i, n in enumerate(names)}
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            if not isinstance(obj.get("text"), str):
                raise DataError(f"{path}:{lineno}: missing string field 'text'")
            if not isinstance(obj.get("label"), str):
                raise DataError(f"{path}:{lineno}: missing string field 'label'")
            text2 = obj.get("text2")
            if text2 is not None and not isinstance(text2, str):
                raise DataError(f"{path}:{lineno}: 'text2' must be a string")
            label = obj["label"]
            if label not in known:
                if label_names is not None:
                    raise DataError(f"{path}:{lineno}: unknown label {label!r}")
                known[label] = len(names)
                names.append(label)
            ex_id = str(obj.get("id", f"{path.stem}-{lineno}"))
            examples.append(Example(obj["text"], known[label], ex_id, text2))
    return examples, names


def load_label_descriptions(path, label_names: Sequence[str], max_per_word: int = 3) -> LabelSet:
    """Attach per-word description lists to the dataset's labels.

    Every label in the file must exist in ``label_names``; labels without an
    entry get no descriptions.  A word with more than ``max_per_word``
    descriptions is rejected.
    """
    path = Path(path)
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc.msg})") from None
    if not isinstance(entries, list):
        raise DataError(f"{path}: expected a JSON list of label entries")
    descs: list[list[str]] = [[] for _ in label_names]
    index = {n: i for i, n in enumerate(label_names)}
    for entry in entries:
        label = entry.get("label")
        if label not in index:
            raise DataError(f"{path}: label {label!r} does not occur in the dataset")
        for w in entry.get("words", []):
            texts = w.get("descriptions", [])
            if len(texts) > max_per_word:
                raise DataError(
                    f"{path}: word {w.get('word')!r} of label {label!r} has "
                    f"{len(texts)} descriptions (max {max_per_word})"
                )
            descs[index[label]].extend(texts)
    return LabelSet(list(label_names), descs)


@dataclass
class Batch:
    ids: np.ndarray  # (N, n)
    mask: np.ndarray  # (N, n)
    y: np.ndarray  # (N,)
    pairs: np.ndarray  # (N/2, 2) batch positions
    pair_targets: np.ndarray  # (N/2,) 1 when the labels match
    triplets: np.ndarray  # (T, 3) anchor, positive, negative positions
    skipped_anchors: int = 0


def make_pairs(labels: np.ndarray, rng: np.random.Generator):
    """Non-overlapping pairs from a seeded shuffle; target 1 iff labels match."""
    n = len(labels)
    if n % 2:
        raise DataError(f"pairing needs an even number of examples, got {n}")
    order = rng.permutation(n)
    pairs = order.reshape(-1, 2)
    targets = (labels[pairs[:, 0]] == labels[pairs[:, 1]]).astype(np.int64)
    return pairs, targets


def make_triplets(labels: np.ndarray, rng: np.random.Generator):
    """Up to floor(N/3) in-batch (anchor, positive, negative) triples.

    Anchors without a same-label partner or without a different-label member
    are skipped; returns (triplets, number skipped).
    """
    n = len(labels)
    anchors = rng.permutation(n)[: n // 3]
    out, skipped = [], 0
    for a in anchors:
        pos = np.flatnonzero((labels == labels[a]) & (np.arange(n) != a))
        neg = np.flatnonzero(labels != labels[a])
        if pos.size == 0 or neg.size == 0:
            skipped += 1
            continue
        out.append((a, pos[rng.integers(pos.size)], neg[rng.integers(neg.size)]))
    if len(np.unique(labels)) < 2:
        warnings.warn("single-label batch: no triplets can be formed", stacklevel=2)
    return np.array(out, dtype=np.int64).reshape(-1, 3), skipped


def make_batch(ids: np.ndarray, mask: np.ndarray, labels, rng: np.random.Generator) -> Batch:
    labels = np.asarray(labels, dtype=np.int64)
    pairs, targets = make_pairs(labels, rng)
    triplets, skipped = make_triplets(labels, rng)
    return Batch(ids, mask, labels, pairs, targets, triplets, skipped)


# ----------------------------------------------------------------------------
# synthetic corpora
# ----------------------------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
KEYWORDS_PER_CLASS = 6
KEYWORD_SLOTS = 3


@dataclass
class SynthSpec:
    classes: int = 4
    vocab_size: int = 200
    per_class: int = 500
    overlap: float = 0.0
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.classes < 2:
            raise DataError("classes must be >= 2")
        if not 0.0 <= self.overlap <= 1.0:
            raise DataError("overlap must lie in [0, 1]")
        if self.per_class < 4:
            raise DataError("per_class must be >= 4")
        if self.vocab_size < self.classes * KEYWORDS_PER_CLASS + 10:
            raise DataError(
                f"vocab_size must be >= {self.classes * KEYWORDS_PER_CLASS + 10} "
                f"for {self.classes} classes"
            )
        return self


def parse_synth_spec(text: str) -> SynthSpec:
    kinds = {"classes": int, "vocab_size": int, "per_class": int, "overlap": float, "seed": int}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise DataError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = kinds[key](raw)
        except ValueError:
            raise DataError(f"line {lineno}: bad value for {key}: {raw!r}") from None
    return SynthSpec(**values).validate()


def _pseudo_words(count: int, rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < count:
        syllables = rng.integers(2, 4)
        w = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syllables)
        )
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def gen_synthetic(spec: SynthSpec, out_dir) -> dict[str, Path]:
    """Write train/dev/test JSON Lines plus a label-description file.

    Each sentence mixes shared filler words with ``KEYWORD_SLOTS`` class
    keywords; with probability ``overlap`` a slot draws from the keywords of a
    uniformly chosen class instead.  Dev and test hold ``per_class // 4``
    examples per class.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    words = _pseudo_words(spec.vocab_size + spec.classes, rng)
    names = [f"topic_{w}" for w in words[: spec.classes]]
    words = words[spec.classes:]
    n_kw = spec.classes * KEYWORDS_PER_CLASS
    keywords = [words[c * KEYWORDS_PER_CLASS:(c + 1) * KEYWORDS_PER_CLASS] for c in range(spec.classes)]
    filler = words[n_kw:]

    def sentence(c: int) -> str:
        length = int(rng.integers(8, 15))
        toks = [filler[i] for i in rng.integers(len(filler), size=length - KEYWORD_SLOTS)]
        for _ in range(KEYWORD_SLOTS):
            src = int(rng.integers(spec.classes)) if rng.random() < spec.overlap else c
            toks.append(keywords[src][rng.integers(KEYWORDS_PER_CLASS)])
        return " ".join(toks[i] for i in rng.permutation(length))

    held_out = max(1, spec.per_class // 4)
    paths = {}
    for split, count in (("train", spec.per_class), ("dev", held_out), ("test", held_out)):
        rows = [(c, sentence(c)) for c in range(spec.classes) for _ in range(count)]
        order = rng.permutation(len(rows))
        path = out / f"{split}.jsonl"
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for k, i in enumerate(order):
                c, text = rows[i]
                obj = {"id": f"{split}-{k}", "text": text, "label": names[c]}
                fh.write(json.dumps(obj, sort_keys=True) + "\n")
        paths[split] = path

    entries = []
    for c, name in enumerate(names):
        kw = keywords[c]
        descs = [
            f"{kw[0]} {kw[1]} {kw[2]} and related {filler[c % len(filler)]}",
            f"any {kw[3]} {kw[4]} or {kw[5]}",
        ]
        entries.append({"label": name, "words": [{"word": name, "descriptions": descs}]})
    paths["labels"] = out / "labels.json"
    paths["labels"].write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def keyword_oracle_accuracy(train: Sequence[Example], test: Sequence[Example], m: int) -> float:
    """Accuracy of a single-keyword classifier.

    Each token's class histogram is counted on ``train``; a test example is
    assigned the majority class of its purest token.
    """
    hist: dict[str, np.ndarray] = {}
    for ex in train:
        for tok in set(normalize(ex.text)):
            hist.setdefault(tok, np.zeros(m))[ex.label] += 1
    correct = 0
    for ex in test:
        best, best_purity = 0, -1.0
        for tok in normalize(ex.text):
            h = hist.get(tok)
            if h is None:
                continue
            purity = h.max() / h.sum()
            if purity > best_purity:
                best, best_purity = int(h.argmax()), purity
        correct += best == ex.label
    return correct / len(test)
