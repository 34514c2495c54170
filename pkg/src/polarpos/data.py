"""Indirect-indexing task generation and character/byte-level data plumbing.

Each diagnostic example is a string of distinct letters, a source character
inside it, and a signed shift; the label is the character at that offset.
Generation is counter-based: example i of a split is derived from
(seed, split, i) alone, so any example can be regenerated independently and
splits from different stream ids are disjoint.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

LETTERS = string.ascii_uppercase + string.ascii_lowercase
MIN_LEN, MAX_LEN = 20, 40
MAX_SHIFT = 15
# Worst-case tokenized input: 40 letters + 3 commas + source char + sign
# + 2 digits = 47; pad to 48.
PADDED_LEN = 48

SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


class CharVocabulary:
    """Fixed 66-symbol vocabulary: letters, digits, ',', '+', '-', PAD."""

    def __init__(self):
        self.symbols = LETTERS + string.digits + ",+-"
        self.pad_id = len(self.symbols)
        self._to_id = {ch: i for i, ch in enumerate(self.symbols)}

    @property
    def size(self) -> int:
        return len(self.symbols) + 1  # + PAD

    def encode(self, text: str) -> list[int]:
        try:
            return [self._to_id[ch] for ch in text]
        except KeyError as e:
            raise ValueError(f"symbol not in vocabulary: {e.args[0]!r}") from None

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if i == self.pad_id:
                continue
            if not 0 <= i < len(self.symbols):
                raise ValueError(f"token id out of range: {i}")
            out.append(self.symbols[i])
        return "".join(out)


@dataclass(frozen=True)
class IndirectIndexExample:
    source_string: str
    source_char: str
    shift: int
    target_char: str


class ExampleInvalid(ValueError):
    pass


def validate_example(ex: IndirectIndexExample) -> None:
    """Independent checker: re-derives the target by plain string indexing."""
    n = len(ex.source_string)
    if not MIN_LEN <= n <= MAX_LEN:
        raise ExampleInvalid(f"source length {n} outside [{MIN_LEN}, {MAX_LEN}]")
    if len(set(ex.source_string)) != n:
        raise ExampleInvalid("source string has repeated characters")
    if ex.source_string.count(ex.source_char) != 1:
        raise ExampleInvalid("source char must occur exactly once")
    if ex.shift == 0 or abs(ex.shift) > MAX_SHIFT:
        raise ExampleInvalid(f"shift {ex.shift} outside allowed range")
    idx = ex.source_string.index(ex.source_char) + ex.shift
    if not 0 <= idx < n:
        raise ExampleInvalid("shifted index out of bounds")
    if ex.source_string[idx] != ex.target_char:
        raise ExampleInvalid(
            f"target {ex.target_char!r} != string[{idx}] = {ex.source_string[idx]!r}"
        )


def generate_example(seed: int, index: int, split: str = "train") -> IndirectIndexExample:
    """Deterministically generate example `index` of a split."""
    rng = np.random.default_rng([seed, SPLIT_IDS[split], index])
    length = int(rng.integers(MIN_LEN, MAX_LEN + 1))
    chars = rng.choice(len(LETTERS), size=length, replace=False)
    source_string = "".join(LETTERS[i] for i in chars)
    pos = int(rng.integers(0, length))
    # Sample shifts uniformly and reject zero / out-of-bounds targets.
    while True:
        shift = int(rng.integers(-MAX_SHIFT, MAX_SHIFT + 1))
        if shift != 0 and 0 <= pos + shift < length:
            break
    return IndirectIndexExample(
        source_string=source_string,
        source_char=source_string[pos],
        shift=shift,
        target_char=source_string[pos + shift],
    )


def generate(seed: int, n: int, split: str = "train") -> list[IndirectIndexExample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_example(seed, i, split) for i in range(n)]


def format_line(ex: IndirectIndexExample) -> str:
    return f"{ex.source_string}, {ex.source_char}, {ex.shift:+d}, {ex.target_char}"


class ParseError(ValueError):
    def __init__(self, position: int, message: str):
        super().__init__(f"column {position}: {message}")
        self.position = position


def parse_line(line: str) -> IndirectIndexExample:
    """Inverse of format_line; reports the column of the first violation."""
    parts = line.split(", ")
    if len(parts) != 4:
        raise ParseError(len(line), "expected 4 comma-separated fields")
    src, src_char, shift_str, tgt = parts
    pos = 0
    for i, ch in enumerate(src):
        if ch not in LETTERS:
            raise ParseError(i, f"invalid source character {ch!r}")
    pos += len(src) + 2
    if len(src_char) != 1 or src_char not in LETTERS:
        raise ParseError(pos, f"invalid source char field {src_char!r}")
    pos += len(src_char) + 2
    if (len(shift_str) < 2 or shift_str[0] not in "+-"
            or not shift_str[1:].isdigit() or shift_str[1] == "0"):
        raise ParseError(pos, f"invalid shift field {shift_str!r}")
    pos += len(shift_str) + 2
    if len(tgt) != 1 or tgt not in LETTERS:
        raise ParseError(pos, f"invalid target field {tgt!r}")
    ex = IndirectIndexExample(source_string=src, source_char=src_char,
                              shift=int(shift_str), target_char=tgt)
    try:
        validate_example(ex)
    except ExampleInvalid as e:
        raise ParseError(0, str(e)) from None
    return ex


def tokenize(line: str, vocab: CharVocabulary, pad_to: int = PADDED_LEN):
    """Character-tokenize one formatted line.

    Spaces are stripped; the final (target) character becomes the label and
    everything before it the model input, right-padded with PAD. Returns
    (tokens, target_position, label): the model predicts the label from its
    logits at target_position.
    """
    ids = vocab.encode(line.replace(" ", ""))
    if len(ids) < 2:
        raise ValueError("line too short to tokenize")
    inputs, label = ids[:-1], ids[-1]
    if len(inputs) > pad_to:
        raise ValueError(f"line tokenizes to {len(inputs)} > pad_to {pad_to}")
    target_pos = len(inputs) - 1
    tokens = np.full(pad_to, vocab.pad_id, dtype=np.int64)
    tokens[: len(inputs)] = inputs
    return tokens, target_pos, label


def detokenize(tokens, vocab: CharVocabulary) -> str:
    return vocab.decode(tokens)


def tokenize_split(examples, vocab: CharVocabulary, pad_to: int = PADDED_LEN):
    """Tokenize a list of examples into (N, pad_to) tokens + positions + labels."""
    n = len(examples)
    tokens = np.empty((n, pad_to), dtype=np.int64)
    target_pos = np.empty(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    for i, ex in enumerate(examples):
        tokens[i], target_pos[i], labels[i] = tokenize(format_line(ex), vocab, pad_to)
    return tokens, target_pos, labels


class ByteVocabulary:
    """Bijective map between the distinct bytes of a corpus and dense ids."""

    def __init__(self, byte_values):
        self.byte_values = sorted(set(int(b) for b in byte_values))
        self._to_id = {b: i for i, b in enumerate(self.byte_values)}

    @property
    def size(self) -> int:
        return len(self.byte_values)

    def encode_bytes(self, data: bytes) -> np.ndarray:
        try:
            return np.array([self._to_id[b] for b in data], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"byte not in vocabulary: {e.args[0]}") from None

    def decode(self, ids) -> bytes:
        return bytes(self.byte_values[i] for i in ids)


def load_char_corpus_bytes(data: bytes) -> tuple[np.ndarray, ByteVocabulary]:
    """Turn raw corpus bytes into a contiguous token stream over distinct bytes."""
    if not data:
        raise ValueError("empty corpus")
    vocab = ByteVocabulary(set(data))
    lut = np.full(256, -1, dtype=np.int64)
    for b, i in vocab._to_id.items():
        lut[b] = i
    stream = lut[np.frombuffer(data, dtype=np.uint8)]
    return stream, vocab


def load_char_corpus(path) -> tuple[np.ndarray, ByteVocabulary]:
    """Load a text file as a contiguous token stream over its distinct bytes."""
    with open(path, "rb") as f:
        data = f.read()
    if not data:
        raise ValueError(f"empty corpus file: {path}")
    return load_char_corpus_bytes(data)


def split_stream(stream: np.ndarray, val_fraction: float = 0.1):
    """Fixed train/val split by offset."""
    cut = int(len(stream) * (1.0 - val_fraction))
    return stream[:cut], stream[cut:]


# Pseudo-English corpus synthesis. There is no bundled natural-language
# corpus, so extrapolation experiments use a deterministic generated text
# with word-, sentence-, and paragraph-level structure.

_ONSETS = ["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r",
           "s", "t", "v", "w", "z", "st", "tr", "ch", "sh", "pl", "br", "gr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ou"]
_CODAS = ["", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ck"]


def _make_lexicon(rng: np.random.Generator, n_words: int = 2000) -> list[str]:
    words = set()
    while len(words) < n_words:
        n_syll = int(rng.integers(1, 4))
        word = "".join(
            _ONSETS[rng.integers(len(_ONSETS))]
            + _VOWELS[rng.integers(len(_VOWELS))]
            + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(n_syll)
        )
        if 2 <= len(word) <= 14:
            words.add(word)
    return sorted(words)


def synthesize_corpus(seed: int, n_bytes: int) -> bytes:
    """Generate deterministic English-like text of at least n_bytes."""
    rng = np.random.default_rng([seed, 0xC0])
    lexicon = _make_lexicon(rng)
    lexicon = [lexicon[i] for i in rng.permutation(len(lexicon))]
    # Zipf-like word distribution over the lexicon.
    ranks = np.arange(1, len(lexicon) + 1, dtype=np.float64)
    probs = 1.0 / ranks
    probs /= probs.sum()
    out = []
    total = 0
    words_in_par = 0
    while total < n_bytes:
        n_words = int(rng.integers(4, 13))
        idx = rng.choice(len(lexicon), size=n_words, p=probs)
        sent_words = [lexicon[i] for i in idx]
        sent_words[0] = sent_words[0].capitalize()
        if n_words >= 8 and rng.random() < 0.5:
            comma_at = int(rng.integers(2, n_words - 2))
            sent_words[comma_at] = sent_words[comma_at] + ","
        sentence = " ".join(sent_words) + ". "
        words_in_par += n_words
        if words_in_par > 80:
            sentence = sentence.rstrip() + "\n\n"
            words_in_par = 0
        out.append(sentence)
        total += len(sentence)
    return "".join(out).encode("ascii")[:n_bytes]
