"""Whitespace tokenizer with the special-token layout used by the encoder.

The vocabulary is built once from the union of all training splits
(lowercased, whitespace-split, min frequency 1) so that the relevance
measures and the model share a single definition of "token". Specials
occupy the first four ids in fixed order.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
PAD, UNK, CLS, SEP = range(4)

INPUT_MODES = ("single", "pair", "qa-triple")


def split_text(text: str) -> list[str]:
    """Lowercase + whitespace tokenization, shared by model and relevance."""
    return text.lower().split()


@dataclass
class Tokenizer:
    vocab: dict[str, int]
    max_len: int = 64
    _inverse: dict[int, str] = field(init=False, repr=False)

    def __post_init__(self):
        for i, tok in enumerate(SPECIALS):
            if self.vocab.get(tok) != i:
                raise ValueError(f"vocabulary must map {tok!r} to id {i}")
        self._inverse = {i: t for t, i in self.vocab.items()}

    def __len__(self) -> int:
        return len(self.vocab)

    @classmethod
    def build(cls, corpora, max_len: int = 64) -> "Tokenizer":
        """Build from an iterable of raw strings (all training texts)."""
        counts = Counter()
        for text in corpora:
            counts.update(split_text(text))
        vocab = {tok: i for i, tok in enumerate(SPECIALS)}
        for tok in sorted(counts):
            if tok not in vocab:
                vocab[tok] = len(vocab)
        return cls(vocab=vocab, max_len=max_len)

    def token_id(self, token: str) -> int:
        return self.vocab.get(token, UNK)

    def encode(self, text_a: str, text_b: str | None = None,
               text_c: str | None = None, mode: str = "single") -> list[int]:
        """Encode one example into ids.

        single:    [CLS] a
        pair:      [CLS] a [SEP] b [SEP]
        qa-triple: [CLS] a [SEP] b [SEP] c

        Over-long encodings are truncated from text_b first, then text_c,
        then text_a, so the layout above is preserved.
        """
        if mode not in INPUT_MODES:
            raise ValueError(f"unknown input mode {mode!r}")
        if not text_a or not split_text(text_a):
            raise ValueError("text_a must be non-empty")
        a = split_text(text_a)
        b = split_text(text_b) if text_b is not None else None
        c = split_text(text_c) if text_c is not None else None
        if mode == "single":
            b = c = None
        elif mode == "pair":
            if b is None:
                raise ValueError("pair mode requires text_b")
            c = None
        else:
            if b is None or c is None:
                raise ValueError("qa-triple mode requires text_b and text_c")

        def length():
            n = 1 + len(a)
            if b is not None:
                n += 1 + len(b)
            if c is not None:
                n += 1 + len(c)
            if mode == "pair":
                n += 1  # trailing [SEP]
            return n

        for segment in (b, c, a):
            while segment and length() > self.max_len:
                segment.pop()
        if length() > self.max_len:
            raise ValueError(f"cannot fit example into max_len={self.max_len}")

        ids = [CLS] + [self.token_id(t) for t in a]
        if b is not None:
            ids += [SEP] + [self.token_id(t) for t in b]
        if c is not None:
            ids += [SEP] + [self.token_id(t) for t in c]
        if mode == "pair":
            ids.append(SEP)
        return ids

    def encode_batch(self, examples, mode: str) -> tuple[np.ndarray, np.ndarray]:
        """Encode examples and pad to the batch max length.

        Returns (ids, mask): int64 (B, L) and float64 (B, L) with 1 on
        real positions, 0 on padding.
        """
        encoded = [self.encode(e.text_a, e.text_b, e.text_c, mode) for e in examples]
        width = max(len(ids) for ids in encoded)
        ids = np.full((len(encoded), width), PAD, dtype=np.int64)
        mask = np.zeros((len(encoded), width), dtype=np.float64)
        for row, seq in enumerate(encoded):
            ids[row, : len(seq)] = seq
            mask[row, : len(seq)] = 1.0
        return ids, mask

    def decode(self, ids) -> list[str]:
        return [self._inverse.get(int(i), "[UNK]") for i in ids]

    def save(self, path) -> None:
        """One token per line; line number = id; specials first."""
        ordered = sorted(self.vocab, key=self.vocab.get)
        with open(path, "w", encoding="utf-8") as f:
            for tok in ordered:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path, max_len: int = 64) -> "Tokenizer":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(vocab={tok: i for i, tok in enumerate(tokens)}, max_len=max_len)
