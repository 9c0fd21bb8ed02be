"""Character-level vocabulary, MLM batching and synthetic classification tasks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.ops import IGNORE_INDEX

PAD, MASK, CLS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[CLS]", "[UNK]")


@dataclass
class Vocab:
    tokens: list

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    @property
    def first_regular(self):
        return len(SPECIAL_TOKENS)

    def encode(self, text):
        return np.array([self.index.get(ch, UNK) for ch in text], dtype=np.int64)

    def decode(self, ids):
        return "".join(self.tokens[i] if i >= self.first_regular else "" for i in ids)


def build_vocab(corpus):
    """Specials first, then characters in order of first occurrence."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    seen = dict.fromkeys(corpus)
    return Vocab(list(SPECIAL_TOKENS) + list(seen))


_SUBJECTS = ["the cat", "a dog", "the bird", "my friend", "the old man", "a child", "the teacher", "her sister"]
_VERBS = ["sees", "likes", "finds", "helps", "calls", "follows", "greets", "watches"]
_OBJECTS = ["the ball", "a red box", "the river", "some bread", "the green door", "a small boat", "the moon", "his hat"]
_TAILS = ["today", "at night", "in the park", "every day", "again", "slowly", "near the house", "with joy"]


def synthetic_corpus(num_sentences=2000, seed=0):
    """Text from a tiny subject-verb-object grammar; deterministic per seed."""
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(num_sentences):
        s = rng.integers(len(_SUBJECTS))
        v = rng.integers(len(_VERBS))
        o = rng.integers(len(_OBJECTS))
        t = rng.integers(len(_TAILS))
        parts.append(f"{_SUBJECTS[s]} {_VERBS[v]} {_OBJECTS[o]} {_TAILS[t]}.")
    return " ".join(parts)


def load_corpus(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def make_mlm_batch(corpus_ids, vocab, seq_len, mask_prob, seed, batch_size=1, split=(0.8, 0.1, 0.1)):
    """Random corpus windows with BERT-style corruption.

    Row layout is ``[CLS] w_1 .. w_{seq_len-1}``. Each corpus position is
    selected with probability ``mask_prob``; a selected position becomes
    ``[MASK]`` / a random regular token / itself with probabilities
    ``split``. Targets hold the original id at selected positions and
    ``IGNORE_INDEX`` elsewhere.
    """
    if abs(sum(split) - 1.0) > 1e-9:
        raise ValueError("corruption split must sum to 1")
    corpus_ids = np.asarray(corpus_ids)
    width = seq_len - 1
    if corpus_ids.size < width:
        raise ValueError(f"corpus has {corpus_ids.size} tokens, fewer than a window of {width}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, corpus_ids.size - width + 1, size=batch_size)
    windows = np.stack([corpus_ids[s:s + width] for s in starts])
    inputs, targets = corrupt(windows, vocab, mask_prob, rng, split)
    cls = np.full((batch_size, 1), CLS, dtype=np.int64)
    ignore = np.full((batch_size, 1), IGNORE_INDEX, dtype=np.int64)
    return np.concatenate([cls, inputs], axis=1), np.concatenate([ignore, targets], axis=1)


def corrupt(windows, vocab, mask_prob, rng, split=(0.8, 0.1, 0.1)):
    """BERT-style corruption of token rows; returns ``(inputs, targets)``."""
    windows = np.asarray(windows, dtype=np.int64)
    selected = rng.random(windows.shape) < mask_prob
    action = rng.random(windows.shape)
    random_tokens = rng.integers(vocab.first_regular, len(vocab), size=windows.shape)

    inputs = windows.copy()
    to_mask = selected & (action < split[0])
    to_random = selected & (action >= split[0]) & (action < split[0] + split[1])
    inputs[to_mask] = MASK
    inputs[to_random] = random_tokens[to_random]
    targets = np.where(selected, windows, IGNORE_INDEX)
    return inputs, targets


@dataclass
class ClassificationData:
    vocab: Vocab
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    @property
    def num_classes(self):
        return int(max(self.train_y.max(), self.val_y.max())) + 1


MAJORITY_MARKERS = ("a", "b")
MAJORITY_FILLER = "cdefgh"
PATTERN = "abc"
PATTERN_ALPHABET = "abcdef"


def majority_label(text):
    """0 when marker 'a' outnumbers marker 'b', else 1."""
    return 0 if text.count("a") > text.count("b") else 1


def contains_label(text):
    return 1 if PATTERN in text else 0


def _majority_sample(rng, length, label):
    # odd marker count so there is never a tie
    n_markers = int(rng.choice(np.arange(3, length + 1, 2)))
    major = int(rng.integers(n_markers // 2 + 1, n_markers + 1))
    minor = n_markers - major
    chars = list(rng.choice(list(MAJORITY_FILLER), size=length - n_markers))
    win, lose = MAJORITY_MARKERS if label == 0 else MAJORITY_MARKERS[::-1]
    chars += [win] * major + [lose] * minor
    rng.shuffle(chars)
    return "".join(chars)


def _contains_sample(rng, length, label):
    while True:
        chars = "".join(rng.choice(list(PATTERN_ALPHABET), size=length))
        if label == 1 and PATTERN not in chars:
            pos = int(rng.integers(0, length - len(PATTERN) + 1))
            chars = chars[:pos] + PATTERN + chars[pos + len(PATTERN):]
        if contains_label(chars) == label:
            return chars


GENERATORS = {
    "majority": (_majority_sample, majority_label, MAJORITY_MARKERS[0] + MAJORITY_MARKERS[1] + MAJORITY_FILLER),
    "contains": (_contains_sample, contains_label, PATTERN_ALPHABET),
}


def make_classification_task(generator, seq_len, num_train, num_val, seed):
    """Balanced two-class dataset with disjoint train/validation sequences.

    Each row is ``[CLS]`` followed by ``seq_len - 1`` characters.
    """
    if generator not in GENERATORS:
        raise ValueError(f"unknown classification generator {generator!r}; known: {sorted(GENERATORS)}")
    sample, label_fn, alphabet = GENERATORS[generator]
    vocab = build_vocab(alphabet)
    rng = np.random.default_rng(seed)
    total = num_train + num_val
    labels = np.array([i % 2 for i in range(total)])
    rng.shuffle(labels)
    seen = set()
    texts = []
    for label in labels:
        for _ in range(1000):
            text = sample(rng, seq_len - 1, int(label))
            if text not in seen:
                break
        else:
            raise RuntimeError(f"could not draw {total} distinct sequences of length {seq_len - 1}")
        assert label_fn(text) == label
        seen.add(text)
        texts.append(text)
    ids = np.stack([np.concatenate([[CLS], vocab.encode(t)]) for t in texts])
    return ClassificationData(vocab, ids[:num_train], labels[:num_train], ids[num_train:], labels[num_train:])
