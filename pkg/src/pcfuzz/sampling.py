"""Ancestral sampling from the circuit, plain or conditioned on structural
constraints.

Evidence-shaped constraints (token at a position, span at a position) are
conditioned exactly: one upward evaluation, then a top-down descent that
reweights each sum edge by weight * child evidence value. "Contains token"
is also exact via the first-occurrence partition: the event is split by
the earliest position holding the token, a position is drawn from those
masses, and the corresponding composite evidence drives the descent.
Cardinality constraints (at least k occurrences) fall back to rejection
over the k=1 conditioned sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuit import (
    KIND_LEAF,
    KIND_PROD,
    Evidence,
    forward,
    leaf_values,
    length_mask,
)
from .errors import (
    RejectionBudgetError,
    UnknownTokenError,
    ZeroProbabilityConstraintError,
)

REJECTION_CAP = 200  # attempts per accepted sample for cardinality constraints


# --- constraints ---

@dataclass(frozen=True)
class ContainsToken:
    token: int


@dataclass(frozen=True)
class TokenAt:
    token: int
    pos: int


@dataclass(frozen=True)
class SpanAt:
    tokens: tuple
    pos: int


@dataclass(frozen=True)
class ContainsAtLeast:
    token: int
    count: int


def parse_constraint(text, vocab):
    """Grammar: 'contains T' | 'at P T' | 'span P T1 T2 ...' | 'atleast K T'."""
    parts = text.split()
    if not parts:
        raise ValueError("empty constraint")
    op = parts[0].lower()
    if op == "contains" and len(parts) == 2:
        return ContainsToken(vocab.id(parts[1]))
    if op == "at" and len(parts) == 3:
        return TokenAt(vocab.id(parts[2]), int(parts[1]))
    if op == "span" and len(parts) >= 3:
        return SpanAt(tuple(vocab.id(t) for t in parts[2:]), int(parts[1]))
    if op == "atleast" and len(parts) == 3:
        return ContainsAtLeast(vocab.id(parts[2]), int(parts[1]))
    raise ValueError(f"cannot parse constraint {text!r}")


def constraint_satisfied(q, seq):
    seq = list(seq)
    if q is None:
        return True
    if isinstance(q, ContainsToken):
        return q.token in seq
    if isinstance(q, TokenAt):
        return q.pos < len(seq) and seq[q.pos] == q.token
    if isinstance(q, SpanAt):
        return tuple(seq[q.pos: q.pos + len(q.tokens)]) == q.tokens
    if isinstance(q, ContainsAtLeast):
        return seq.count(q.token) >= q.count
    raise TypeError(f"unknown constraint {q!r}")


def _resolve_token(c, t):
    if isinstance(t, str):
        return c.vocab.id(t)
    if not 0 <= int(t) < len(c.vocab):
        raise UnknownTokenError(f"token id {t} out of range")
    return int(t)


def _evidence_for(c, q):
    if isinstance(q, TokenAt):
        return Evidence.free().observe(q.pos, _resolve_token(c, q.token))
    if isinstance(q, SpanAt):
        e = Evidence.free()
        for off, t in enumerate(q.tokens):
            e = e.observe(q.pos + off, _resolve_token(c, t))
        return e
    raise TypeError(f"constraint {q!r} is not evidence shaped")


# --- descent ---

def _descend(c, values, len_mask, rng):
    """Top-down pass; at each sum choose a child proportional to
    weight * child value (times the length mask at the root), descend into
    both product children, collect the leaf tokens. `values` may be None
    for an unconditioned draw."""
    out = {}
    stack = [c.root]
    while stack:
        node = stack.pop()
        kind = c.kind[node]
        if kind == KIND_LEAF:
            out[int(c.node_i[node])] = int(c.node_sym[node])
        elif kind == KIND_PROD:
            stack.append(int(c.prod_left[node]))
            stack.append(int(c.prod_right[node]))
        else:
            lo, hi = c.edge_offsets[node], c.edge_offsets[node + 1]
            w = c.weights[lo:hi]
            if values is not None:
                children = c.edge_child[lo:hi]
                w = w * values[children]
                if node == c.root:
                    w = w * len_mask[c.node_j[children]]
                total = w.sum()
                # the upward pass guaranteed nonzero mass at the root, so a
                # dead sum node mid-descent is an internal inconsistency
                assert total > 0, "conditioned descent reached a zero-mass sum"
                w = w / total
            cum = np.cumsum(w)
            pick = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            pick = min(pick, hi - lo - 1)
            stack.append(int(c.edge_child[lo + pick]))
    seq = [out[p] for p in sorted(out)]
    assert sorted(out) == list(range(len(seq))), "emitted positions not contiguous"
    return seq


def sample(c, rng):
    """One unconditioned draw; the root choice fixes the length first."""
    return _descend(c, None, None, rng)


class _ConditionedSampler:
    """Caches the upward pass(es) needed to draw from P(. | constraint)."""

    def __init__(self, c, q):
        self.c = c
        self.q = q
        self.first_values = None
        if q is None:
            self.kind = "free"
        elif isinstance(q, (TokenAt, SpanAt)):
            self.kind = "evidence"
            e = _evidence_for(c, q)
            self.len_mask = length_mask(c, e)
            vals = forward(c, leaf_values(c, e), self.len_mask)
            if vals[c.root] <= 0.0:
                raise ZeroProbabilityConstraintError(
                    f"constraint {q} has zero probability")
            self.values = vals
        elif isinstance(q, ContainsToken):
            self.kind = "contains"
            t = _resolve_token(c, q.token)
            masses = np.zeros(c.n)
            self._evidences = []
            self._masks = []
            for p in range(c.n):
                e = Evidence.free()
                for earlier in range(p):
                    e = e.exclude(earlier, [t])
                e = e.observe(p, t)
                self._evidences.append(e)
                self._masks.append(length_mask(c, e))
                masses[p] = forward(c, leaf_values(c, e),
                                    self._masks[-1])[c.root]
            total = masses.sum()
            if total <= 0.0:
                raise ZeroProbabilityConstraintError(
                    f"token {c.vocab.name(t)!r} has zero marginal probability")
            self.masses = masses / total
            self._value_cache = {}
        elif isinstance(q, ContainsAtLeast):
            self.kind = "rejection"
            if q.count < 1:
                raise ValueError("cardinality constraints need count >= 1")
            self.inner = _ConditionedSampler(c, ContainsToken(q.token))
            self.token = _resolve_token(c, q.token)
            self.attempts = 0
            self.accepted = 0
        else:
            raise TypeError(f"unknown constraint {q!r}")

    def draw(self, rng):
        if self.kind == "free":
            return _descend(self.c, None, None, rng)
        if self.kind == "evidence":
            return _descend(self.c, self.values, self.len_mask, rng)
        if self.kind == "contains":
            p = int(rng.choice(self.c.n, p=self.masses))
            if p not in self._value_cache:
                e = self._evidences[p]
                self._value_cache[p] = forward(
                    self.c, leaf_values(self.c, e), self._masks[p])
            return _descend(self.c, self._value_cache[p], self._masks[p], rng)
        # rejection over the contains-one sampler
        for _ in range(REJECTION_CAP):
            self.attempts += 1
            seq = self.inner.draw(rng)
            if seq.count(self.token) >= self.q.count:
                self.accepted += 1
                return seq
        raise RejectionBudgetError(
            f"no sample with >= {self.q.count} occurrences in "
            f"{REJECTION_CAP} attempts",
            acceptance_estimate=self.accepted / self.attempts)


def sample_conditioned(c, q, rng):
    """One draw from the exact conditional distribution P(. | q)."""
    return _ConditionedSampler(c, q).draw(rng)


@dataclass
class BatchStats:
    requested: int
    produced: int
    distinct: int
    satisfaction_rate: float
    rejection_failures: int

    def to_tsv(self):
        return ("requested\t{0.requested}\nproduced\t{0.produced}\n"
                "distinct\t{0.distinct}\nsatisfaction_rate\t"
                "{0.satisfaction_rate:.6f}\nrejection_failures\t"
                "{0.rejection_failures}\n").format(self)


def sample_batch(c, q, count, rng):
    """Draw `count` samples (fewer if rejection budgets run out).

    Per-draw random streams are derived from the incoming generator by
    counter, so a fixed seed yields the same batch regardless of execution
    interleaving. Returns (sequences, BatchStats).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    sampler = _ConditionedSampler(c, q)
    seeds = rng.integers(0, 2**63 - 1, size=count)
    out = []
    failures = 0
    satisfied = 0
    for i in range(count):
        draw_rng = np.random.default_rng(int(seeds[i]))
        try:
            seq = sampler.draw(draw_rng)
        except RejectionBudgetError:
            failures += 1
            continue
        out.append(tuple(seq))
        if constraint_satisfied(q, seq):
            satisfied += 1
    stats = BatchStats(requested=count, produced=len(out),
                       distinct=len(set(out)),
                       satisfaction_rate=satisfied / len(out) if out else 0.0,
                       rejection_failures=failures)
    return out, stats
