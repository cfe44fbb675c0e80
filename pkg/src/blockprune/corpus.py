"""Byte-level tokenisation, training batches and calibration sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DataError

BOS = 256
VOCAB_SIZE = 257


def tokenize(text):
    """Bytes (or str, encoded as UTF-8) -> int64 token ids, one per byte."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(tokens):
    """Inverse of :func:`tokenize`; BOS and any id above 255 are dropped."""
    arr = np.asarray(tokens, dtype=np.int64).ravel()
    return arr[(arr >= 0) & (arr < 256)].astype(np.uint8).tobytes()


@dataclass
class Corpus:
    name: str
    tokens: np.ndarray
    train_end: int
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if not 0 < self.train_end <= len(self.tokens):
            raise DataError(f"corpus {self.name!r}: bad train/val split at {self.train_end}")
        if len(self.tokens) and int(self.tokens.max()) >= self.vocab_size:
            raise DataError(f"corpus {self.name!r}: token id >= vocab size {self.vocab_size}")

    @classmethod
    def from_bytes(cls, data, name="corpus", val_fraction=0.1):
        toks = tokenize(data)
        if len(toks) < 2:
            raise DataError(f"corpus {name!r} is empty")
        n_val = int(len(toks) * val_fraction)
        return cls(name, toks, len(toks) - n_val)

    @classmethod
    def from_file(cls, path, val_fraction=0.1):
        try:
            with open(path, "rb") as f:
                data = f.read()
        except FileNotFoundError:
            raise DataError(f"corpus file not found: {path}") from None
        return cls.from_bytes(data, name=str(path), val_fraction=val_fraction)

    @property
    def train(self):
        return self.tokens[: self.train_end]

    @property
    def val(self):
        return self.tokens[self.train_end:]


def sample_corpus_path():
    return resources.files("blockprune") / "assets" / "sample_corpus.txt"


def load_sample_corpus(val_fraction=0.1, max_bytes=None):
    data = sample_corpus_path().read_bytes()
    if max_bytes is not None:
        data = data[:max_bytes]
    return Corpus.from_bytes(data, name="sample_corpus", val_fraction=val_fraction)


# --------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationSet:
    sequences: np.ndarray  # [S, L]
    seed: int
    source: str = ""
    starts: list = field(default_factory=list)

    @property
    def S(self):
        return self.sequences.shape[0]

    @property
    def L(self):
        return self.sequences.shape[1]

    def to_dict(self):
        return {"seed": self.seed, "S": self.S, "L": self.L, "source": self.source,
                "starts": [int(s) for s in self.starts],
                "sequences": self.sequences.tolist()}

    @classmethod
    def from_dict(cls, d):
        seqs = np.asarray(d["sequences"], dtype=np.int64)
        if seqs.ndim != 2 or seqs.shape != (d["S"], d["L"]):
            raise DataError(f"calibration set shape {seqs.shape} does not match S={d['S']}, L={d['L']}")
        return cls(seqs, d["seed"], d.get("source", ""), d.get("starts", []))

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def repeated(self, times):
        return CalibrationSet(np.tile(self.sequences, (times, 1)), self.seed, self.source,
                              list(self.starts) * times)


def sample_calibration(corpus, S=10, L=128, seed=0):
    """S non-overlapping length-L windows from the train split.

    The windows tile the split on a grid of stride L shifted by a random
    offset; S distinct grid slots are drawn without replacement.
    """
    if S < 1 or L < 1:
        raise DataError(f"calibration needs S >= 1 and L >= 1, got S={S}, L={L}")
    n = corpus.train_end
    if n < S * L:
        raise DataError(f"train split has {n} tokens, calibration needs S*L = {S * L}")
    rng = np.random.default_rng(seed)
    n_slots = n // L
    offset = int(rng.integers(0, n - n_slots * L + 1))
    slots = rng.choice(n_slots, size=S, replace=False)
    starts = [offset + int(s) * L for s in slots]
    seqs = np.stack([corpus.tokens[s: s + L] for s in starts])
    return CalibrationSet(seqs, seed, corpus.name, starts)


# --------------------------------------------------------------------------
# training batches


def window_starts(n_tokens, seq_len):
    """Starts of non-overlapping (seq_len + 1)-token windows, stride seq_len."""
    if seq_len + 1 > n_tokens:
        raise DataError(f"seq_len {seq_len} needs {seq_len + 1} tokens, split has {n_tokens}")
    return np.arange(0, n_tokens - seq_len, seq_len)


def batch_iter(corpus, batch, seq_len, seed=0, split="train", epochs=None):
    """Yield (inputs, targets) arrays of shape [batch, seq_len] forever (or for ``epochs``).

    Targets are inputs shifted by one. Window order is reshuffled each epoch
    from ``(seed, epoch)``; a trailing partial batch is dropped.
    """
    toks = corpus.train if split == "train" else corpus.val
    starts = window_starts(len(toks), seq_len)
    if len(starts) < batch:
        raise DataError(f"{split} split has {len(starts)} windows, fewer than batch={batch}")
    idx = np.arange(seq_len + 1)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = np.random.default_rng([seed, epoch]).permutation(starts)
        for i in range(0, len(order) - batch + 1, batch):
            win = toks[order[i: i + batch, None] + idx]
            yield win[:, :-1], win[:, 1:]
        epoch += 1


# --------------------------------------------------------------------------
# synthetic sample text

_NAMES = ["Ada", "Basil", "Clara", "Dorian", "Edith", "Felix", "Greta", "Hugo", "Iris", "Jonas",
          "Kira", "Lionel", "Mira", "Nestor", "Olive", "Piet", "Quinn", "Rosa", "Silas", "Tilda"]
_PLACES = ["the harbour", "the old mill", "the market", "the northern road", "the library",
           "the orchard", "the river bank", "the lighthouse", "the station", "the bakery",
           "the hill farm", "the chapel", "the forest edge", "the quay", "the schoolhouse"]
_NOUNS = ["lantern", "letter", "basket", "ledger", "compass", "kettle", "violin", "map", "coat",
          "garden", "boat", "clock", "window", "ribbon", "hammer", "bottle", "candle", "book"]
_ADJ = ["small", "heavy", "bright", "quiet", "broken", "green", "patient", "curious", "old",
        "careful", "wet", "golden", "narrow", "gentle", "stubborn", "pale"]
_VERBS = [("carried", "carry"), ("mended", "mend"), ("found", "find"), ("opened", "open"),
          ("painted", "paint"), ("counted", "count"), ("hid", "hide"), ("sold", "sell"),
          ("cleaned", "clean"), ("borrowed", "borrow"), ("wrapped", "wrap"), ("lost", "lose")]
_TIMES = ["In the morning", "Before noon", "Late that evening", "On the third day",
          "After the storm", "When the bells rang", "At dawn", "Every winter"]
_WEATHER = ["rain", "fog", "wind", "snow", "sunlight", "thunder"]


def synthetic_text(n_bytes=1_200_000, seed=0):
    """Deterministic English-like prose from a small stochastic grammar.

    Used for the shipped sample corpus: entities recur across sentences, so a
    model gains from context well beyond a few bytes.
    """
    rng = np.random.default_rng(seed)

    def pick(xs):
        return xs[int(rng.integers(len(xs)))]

    parts = []
    total = 0
    while total < n_bytes:
        who, other = rng.choice(len(_NAMES), 2, replace=False)
        who, other = _NAMES[who], _NAMES[other]
        where, thing, adj = pick(_PLACES), pick(_NOUNS), pick(_ADJ)
        past, base = pick(_VERBS)
        sents = [f"{pick(_TIMES)}, {who} went to {where} with a {adj} {thing}."]
        for _ in range(int(rng.integers(2, 6))):
            r = rng.random()
            if r < 0.25:
                sents.append(f"{who} {past} the {thing} while {other} watched from {where}.")
            elif r < 0.45:
                sents.append(f"The {thing} was {pick(_ADJ)}, and the {pick(_WEATHER)} "
                             f"did not stop {who}.")
            elif r < 0.6:
                sents.append(f'"Will you {base} the {thing}?" asked {other}. '
                             f'"I will," said {who}.')
            elif r < 0.75:
                n = int(rng.integers(2, 13))
                sents.append(f"{other} counted {n} {thing}s near {where}, "
                             f"then {n + 1}, then {n + 2}.")
            elif r < 0.9:
                past2, _ = pick(_VERBS)
                sents.append(f"Later {other} {past2} a {pick(_ADJ)} {pick(_NOUNS)} for {who}.")
            else:
                sents.append(f"Nobody at {where} forgot the {adj} {thing} of {who}.")
        para = " ".join(sents) + "\n\n"
        parts.append(para)
        total += len(para)
    return "".join(parts)[:n_bytes]
