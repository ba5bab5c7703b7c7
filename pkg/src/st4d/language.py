"""Instruction tokenization and coordinate-aligned text embedding.

Instructions are plain words plus explicit ``<loc x y z>`` and ``<time t>``
markers. Words hash into a learnable embedding table; coordinate and time
literals are encoded by the same Fourier encoder the vision path uses,
mapped into the language width, scaled by learnable per-dimension vectors,
and added onto a learned placeholder row.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .encoding import (
    FourierEncoder,
    encode_position,
    encode_position_bwd,
    encode_time,
    encode_time_bwd,
)
from .numerics import Array, linear_bwd, linear_fwd

TEXT_COORD_MODES = ("none", "raw", "encoded")

PLACEHOLDER_ID = 0


class ParseError(ValueError):
    """Malformed instruction text; carries the character offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Token:
    """One parsed token: a word, a coordinate literal, or a time literal."""

    kind: str                      # "word" | "loc" | "time"
    word: str = ""
    values: tuple = ()


@dataclass
class TokenSequence:
    tokens: list[Token] = field(default_factory=list)

    def render(self) -> str:
        parts = []
        for t in self.tokens:
            if t.kind == "word":
                parts.append(t.word)
            elif t.kind == "loc":
                parts.append("<loc " + " ".join(repr(v) for v in t.values) + ">")
            else:
                parts.append("<time " + repr(t.values[0]) + ">")
        return " ".join(parts)

    def strip_literals(self) -> "TokenSequence":
        """Drop coordinate and time markers (the no-coordinate text condition)."""
        return TokenSequence([t for t in self.tokens if t.kind == "word"])

    def literals(self, kind: str) -> list[tuple]:
        return [t.values for t in self.tokens if t.kind == kind]


def parse_instruction(text: str) -> TokenSequence:
    """Split an instruction into word tokens and coordinate/time literals.

    Words are lowercased and split on whitespace. Markers must be
    ``<loc x y z>`` or ``<time t>`` with decimal literals; anything else
    inside angle brackets is a parse error with its character offset.
    """
    tokens: list[Token] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "<":
            end = text.find(">", i)
            if end < 0:
                raise ParseError("unclosed marker", i)
            body = text[i + 1:end].split()
            if not body:
                raise ParseError("empty marker", i)
            name, args = body[0], body[1:]
            if name == "loc":
                want = 3
            elif name == "time":
                want = 1
            else:
                raise ParseError(f"unknown marker {name!r}", i)
            if len(args) != want:
                raise ParseError(f"marker {name!r} expects {want} literals, got {len(args)}", i)
            try:
                values = tuple(float(a) for a in args)
            except ValueError:
                raise ParseError(f"non-numeric literal in {name!r} marker", i) from None
            tokens.append(Token(kind=name, values=values))
            i = end + 1
            continue
        j = i
        while j < n and not text[j].isspace() and text[j] != "<":
            j += 1
        word = text[i:j].lower()
        # Strip trailing punctuation so "0.5>?" style text cannot arise and
        # plain prose parses cleanly.
        word = word.strip(".,!?;:")
        if word:
            tokens.append(Token(kind="word", word=word))
        i = j
    return TokenSequence(tokens)


@dataclass
class Vocab:
    """Hash-addressed word embedding table; row 0 is the literal placeholder."""

    table: Array

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def word_id(self, word: str) -> int:
        digest = hashlib.sha256(word.encode("utf-8")).digest()
        return 1 + int.from_bytes(digest[:8], "big") % (self.size - 1)


def embed_sequence(seq: TokenSequence, vocab: Vocab, enc: FourierEncoder,
                   scale_pos: Array, scale_time: Array, align: Array,
                   raw_pos: Array = None, raw_time: Array = None,
                   mode: str = "encoded"):
    """Embed a token sequence into (L, d_l) rows.

    Word rows come straight from the table. A ``<loc>`` literal contributes
    ``placeholder + scale_pos * (align @ PE(xyz))``; a ``<time>`` literal
    contributes ``placeholder + scale_time * (align @ TE(t))`` with motion
    modulation disabled. In ``raw`` mode the Fourier encoder is bypassed
    and the literal's numbers go through a plain linear map instead.
    Returns ``(embeddings, cache)``.
    """
    if mode not in TEXT_COORD_MODES:
        raise ValueError(f"unknown text coordinate mode {mode!r}")
    d_l = vocab.table.shape[1]
    rows = []
    steps = []
    for tok in seq.tokens:
        if tok.kind == "word" or mode == "none":
            wid = vocab.word_id(tok.word) if tok.kind == "word" else PLACEHOLDER_ID
            rows.append(vocab.table[wid])
            steps.append(("word", wid, None))
            continue
        if tok.kind == "loc":
            xyz = np.array(tok.values, dtype=np.float64).reshape(1, 3)
            if mode == "raw":
                encoded, cache = linear_fwd(xyz, raw_pos)
                kind = "loc_raw"
            else:
                encoded, cache = encode_position(enc, xyz)
                kind = "loc_enc"
            aligned, a_cache = linear_fwd(encoded, align)
            row = vocab.table[PLACEHOLDER_ID] + (scale_pos * aligned).ravel()
            rows.append(row)
            steps.append((kind, (cache, a_cache), aligned))
        else:
            t = np.array([[tok.values[0]]])
            if mode == "raw":
                encoded, cache = linear_fwd(t, raw_time)
                kind = "time_raw"
            else:
                encoded, cache = encode_time(enc, t, np.zeros(1), frame_groups=None)
                kind = "time_enc"
            aligned, a_cache = linear_fwd(encoded, align)
            row = vocab.table[PLACEHOLDER_ID] + (scale_time * aligned).ravel()
            rows.append(row)
            steps.append((kind, (cache, a_cache), aligned))
    emb = np.stack(rows) if rows else np.zeros((0, d_l))
    return emb, (steps, vocab.table.shape, scale_pos, scale_time, align.shape)


def embed_sequence_bwd(grad_out: Array, cache):
    """Returns a dict of gradients keyed like the language parameter names.

    Keys: ``vocab``, ``scale_pos``, ``scale_time``, ``align``, ``raw_pos``,
    ``raw_time``, ``pos_freq``, ``time_freq`` (only those touched appear).
    """
    steps, table_shape, scale_pos, scale_time, align_shape = cache
    grads: dict[str, Array] = {}

    def bump(name, value):
        grads[name] = grads.get(name, 0) + value

    for i, (kind, info, aligned) in enumerate(steps):
        g = grad_out[i:i + 1]
        if kind == "word":
            dt = np.zeros(table_shape)
            dt[info] = g.ravel()
            bump("vocab", dt)
            continue
        dt = np.zeros(table_shape)
        dt[PLACEHOLDER_ID] = g.ravel()
        bump("vocab", dt)
        scale = scale_pos if kind.startswith("loc") else scale_time
        bump("scale_pos" if kind.startswith("loc") else "scale_time", g * aligned)
        d_aligned = g * scale
        enc_cache, a_cache = info
        d_encoded, d_align, _ = linear_bwd(d_aligned, a_cache)
        bump("align", d_align)
        if kind == "loc_raw":
            _, d_raw, _ = linear_bwd(d_encoded, enc_cache)
            bump("raw_pos", d_raw)
        elif kind == "time_raw":
            _, d_raw, _ = linear_bwd(d_encoded, enc_cache)
            bump("raw_time", d_raw)
        elif kind == "loc_enc":
            d_freq, _ = encode_position_bwd(d_encoded, enc_cache)
            bump("pos_freq", d_freq)
        else:
            d_freq = encode_time_bwd(d_encoded, enc_cache)
            bump("time_freq", d_freq)
    return grads
