"""Byte-level toy tokenizer bundled with the synthetic vocabulary.

Ids 0-255 are raw bytes, 256 is ``<bos>``, 257 is ``<eos>``; any further
ids are inert ``<extra_i>`` slots.  Printable ASCII, newline and ``<eos>``
are the real tokens.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

BOS = "<bos>"
EOS = "<eos>"
N_BYTES = 256
MIN_VOCAB = 258


def byte_vocab(vocab_size: int) -> tuple[list[str], np.ndarray]:
    if vocab_size < MIN_VOCAB:
        raise ValidationError(f"byte vocabulary needs at least {MIN_VOCAB} entries")
    vocab = []
    for b in range(N_BYTES):
        vocab.append(chr(b) if 32 <= b < 127 else f"<0x{b:02X}>")
    vocab += [BOS, EOS]
    vocab += [f"<extra_{i}>" for i in range(vocab_size - MIN_VOCAB)]
    mask = np.zeros(vocab_size, dtype=bool)
    mask[32:127] = True
    mask[10] = True
    mask[N_BYTES + 1] = True
    return vocab, mask


class ByteTokenizer:
    def __init__(self, vocab: list[str]):
        if len(vocab) < MIN_VOCAB or vocab[N_BYTES] != BOS or vocab[N_BYTES + 1] != EOS:
            raise ValidationError("vocabulary is not a byte-level toy vocabulary")
        self.vocab = vocab
        self.bos_id = N_BYTES
        self.eos_id = N_BYTES + 1

    def encode(self, text: str, add_bos: bool = True) -> list[int]:
        ids = list(text.encode("utf-8"))
        return [self.bos_id, *ids] if add_bos else ids

    def decode(self, ids) -> str:
        raw = bytes(int(i) for i in ids if int(i) < N_BYTES)
        return raw.decode("utf-8", errors="replace")

    def token_class(self, token_id: int) -> str:
        """Coarse text class: alpha, numeric, space-leading, punct or special."""
        if token_id >= N_BYTES:
            return "special"
        ch = chr(token_id)
        if ch.isspace():
            return "space"
        if ch.isalpha():
            return "alpha"
        if ch.isdigit():
            return "numeric"
        return "punct"
