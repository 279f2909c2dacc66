from __future__ import annotations

from collections import Counter

from ..errors import FormatError, ValidationError
from ..text import tokenize

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")


class Vocab:
    """Token <-> id table; ids 0-3 are reserved, the rest sorted by
    frequency (descending) then lexicographically."""

    def __init__(self, counts, min_frequency=1):
        self.min_frequency = min_frequency
        kept = sorted(
            ((tok, c) for tok, c in counts.items() if c >= min_frequency and tok not in RESERVED),
            key=lambda tc: (-tc[1], tc[0]),
        )
        self.itos = list(RESERVED) + [tok for tok, _ in kept]
        self.freqs = [0] * len(RESERVED) + [c for _, c in kept]
        self.token_to_id = {tok: i for i, tok in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos and self.freqs == other.freqs

    def id(self, token):
        return self.token_to_id.get(token, UNK)

    def encode(self, text):
        return [self.id(tok) for tok in tokenize(text)]

    def to_lines(self):
        return [f"{tok}\t{freq}" for tok, freq in zip(self.itos, self.freqs)]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")

    @classmethod
    def from_lines(cls, lines, min_frequency=1):
        counts = {}
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                tok, freq = line.rstrip("\n").split("\t")
                counts[tok] = int(freq)
            except ValueError as exc:
                raise FormatError(f"vocab line {lineno}: expected 'token<TAB>freq'") from exc
        vocab = cls(counts, min_frequency)
        if vocab.itos[: len(RESERVED)] != list(RESERVED):
            raise FormatError("vocab file lacks the reserved tokens")
        return vocab

    @classmethod
    def load(cls, path, min_frequency=1):
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh.readlines(), min_frequency)


def fit_vocab(texts, min_frequency=1):
    texts = list(texts)
    if not texts:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text in texts:
        counts.update(tokenize(text))
    return Vocab(counts, min_frequency)
