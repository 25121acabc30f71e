"""Tokenization (anonymization), corpus management with length filtering,
and concretization of token sequences back into executable strings.

File formats (all UTF-8):

* Corpus: one input per line, token names separated by single spaces.
* Tokenizer spec: one rule per line, ``TOKEN<TAB>regex<TAB>pattern`` or
  ``-<TAB>skip<TAB>pattern``. Rules are tried at each offset and the
  longest match wins; ties go to the earliest rule.
* Concretizer spec: one rule per line, ``TOKEN<TAB>kind<TAB>payload`` with
  kind in {fixed, punct, choice, int, ident}. ``punct`` is fixed text that
  attaches without a preceding space. choice/ident payloads are comma
  separated pools; entries prefixed with '!' are tagged sensitive.
  ``int`` takes an inclusive ``lo..hi`` range.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import (
    EmptyCorpusError,
    MissingDescriptorError,
    SpecFormatError,
    TokenizeError,
    UnknownTokenError,
)
from .grammar import END_MARKER


@dataclass
class TokenizerSpec:
    """Ordered longest-match lexer rules: (compiled pattern, token or None)."""

    rules: list

    @staticmethod
    def parse(text):
        rules = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = raw.split("\t")
            if len(parts) != 3:
                raise SpecFormatError(
                    f"tokenizer line {lineno}: expected TOKEN<TAB>kind<TAB>pattern")
            name, kind, pattern = (p.strip() for p in parts)
            try:
                compiled = re.compile(pattern)
            except re.error as exc:
                raise SpecFormatError(
                    f"tokenizer line {lineno}: bad pattern: {exc}") from None
            if kind == "skip":
                rules.append((compiled, None))
            elif kind == "regex":
                rules.append((compiled, name))
            else:
                raise SpecFormatError(
                    f"tokenizer line {lineno}: unknown kind {kind!r}")
        if not rules:
            raise SpecFormatError("tokenizer spec has no rules")
        return TokenizerSpec(rules)

    def check_vocabulary(self, vocab):
        for _, name in self.rules:
            if name is not None and name not in vocab:
                raise UnknownTokenError(
                    f"tokenizer emits {name!r} which is not in the vocabulary")


def tokenize(spec: TokenizerSpec, text):
    """Split raw text into token names; skipped lexemes are dropped but the
    matched lexemes jointly cover the text exactly."""
    out = []
    pos = 0
    n = len(text)
    while pos < n:
        best_len = 0
        best_name = None
        for pattern, name in spec.rules:
            m = pattern.match(text, pos)
            if m is not None and m.end() - pos > best_len:
                best_len = m.end() - pos
                best_name = name
        if best_len == 0:
            raise TokenizeError(f"no rule matches {text[pos:pos + 12]!r}", pos)
        if best_name is not None:
            out.append(best_name)
        pos += best_len
    return out


@dataclass
class Corpus:
    items: list            # token name tuples
    source: str = ""
    max_length: int = 0
    discarded: int = 0

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def total_tokens(self):
        return sum(len(w) for w in self.items)


def filter_by_length(items, n, source=""):
    """Keep sequences of length 1..n; longer ones are dropped, not truncated."""
    if n < 1:
        raise ValueError("max length must be >= 1")
    items = [tuple(w) for w in items]
    kept = [w for w in items if 1 <= len(w) <= n]
    discarded = len(items) - len(kept)
    if not kept:
        raise EmptyCorpusError(
            f"no items of length 1..{n} in {source or 'input'}")
    return Corpus(items=kept, source=source, max_length=n, discarded=discarded)


def read_corpus_file(path, n=None):
    with open(path, "r", encoding="utf-8") as fh:
        items = [tuple(line.split()) for line in fh if line.strip()]
    if n is None:
        n = max((len(w) for w in items), default=1)
    return filter_by_length(items, n, source=str(path))


def write_corpus_file(path, items):
    with open(path, "w", encoding="utf-8") as fh:
        for w in items:
            fh.write(" ".join(w) + "\n")


# --- concretization ---

@dataclass
class _Descriptor:
    kind: str               # fixed | punct | choice | int | ident
    texts: tuple = ()       # pool for fixed/punct/choice/ident
    sensitive: frozenset = frozenset()
    lo: int = 0
    hi: int = 0


@dataclass
class ConcretizerSpec:
    descriptors: dict = field(default_factory=dict)

    @staticmethod
    def parse(text):
        descriptors = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = raw.split("\t")
            if len(parts) != 3:
                raise SpecFormatError(
                    f"concretizer line {lineno}: expected TOKEN<TAB>kind<TAB>payload")
            name, kind, payload = (p.strip() for p in parts)
            if name in descriptors:
                raise SpecFormatError(
                    f"concretizer line {lineno}: duplicate descriptor for {name}")
            if kind in ("fixed", "punct"):
                descriptors[name] = _Descriptor(kind=kind, texts=(payload,))
            elif kind in ("choice", "ident"):
                entries = [e.strip() for e in payload.split(",") if e.strip()]
                if not entries:
                    raise SpecFormatError(
                        f"concretizer line {lineno}: empty pool for {name}")
                sensitive = frozenset(e[1:] for e in entries if e.startswith("!"))
                pool = tuple(e[1:] if e.startswith("!") else e for e in entries)
                descriptors[name] = _Descriptor(kind=kind, texts=pool,
                                                sensitive=sensitive)
            elif kind == "int":
                m = re.fullmatch(r"(-?\d+)\.\.(-?\d+)", payload)
                if not m:
                    raise SpecFormatError(
                        f"concretizer line {lineno}: int payload must be lo..hi")
                lo, hi = int(m.group(1)), int(m.group(2))
                if lo > hi:
                    raise SpecFormatError(
                        f"concretizer line {lineno}: empty range {payload}")
                descriptors[name] = _Descriptor(kind="int", lo=lo, hi=hi)
            else:
                raise SpecFormatError(
                    f"concretizer line {lineno}: unknown kind {kind!r}")
        return ConcretizerSpec(descriptors)

    def covers(self, tokens):
        return all(t in self.descriptors for t in tokens)

    def sensitive_texts(self, token):
        d = self.descriptors.get(token)
        return d.sensitive if d else frozenset()

    def check_vocabulary(self, vocab):
        missing = [n for n in vocab if n not in self.descriptors
                   and n != vocab.end_marker]
        if missing:
            raise MissingDescriptorError(
                "no concretizer descriptor for: " + ", ".join(missing))


def concretize(tokens, spec: ConcretizerSpec, rng):
    """Render a token sequence as a concrete string.

    Tokens are joined with single spaces, except punct descriptors attach
    directly to the preceding text. The end marker renders as nothing.
    """
    parts = []
    for name in tokens:
        if name == END_MARKER:
            continue
        d = spec.descriptors.get(name)
        if d is None:
            raise MissingDescriptorError(f"no descriptor for token {name!r}")
        if d.kind in ("fixed", "punct"):
            text = d.texts[0]
        elif d.kind in ("choice", "ident"):
            text = d.texts[int(rng.integers(len(d.texts)))]
        else:
            text = str(int(rng.integers(d.lo, d.hi + 1)))
        glue = "" if d.kind == "punct" else " "
        if parts:
            parts.append(glue)
        parts.append(text)
    return "".join(parts)
