"""Exact inference over a circuit: complete evidence, marginal, conditional
and restricted most-likely-token queries.

Every query reduces to a constant number of single bottom-up passes.
"Contains token" events are computed through exclusion evidence
(P = 1 - P(token nowhere)); joint containment uses inclusion-exclusion;
"after the first occurrence" queries partition the containment event by
the earliest position holding the token, which keeps everything exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuit import Evidence, forward, forward_log, leaf_values, length_mask
from .errors import EvidenceError, UnknownTokenError, ZeroConditionError

LOG_DOMAIN_THRESHOLD = 10_000  # switch to log-space when n * |vocab| exceeds this


@dataclass
class QueryResult:
    query: str
    value: object            # probability, or a token name for MMAP queries
    trace: dict | None = None


@dataclass
class EvalStats:
    edge_visits: int = 0
    node_visits: int = 0


def _resolve(c, token):
    if isinstance(token, str):
        return c.vocab.id(token)
    if not 0 <= int(token) < len(c.vocab):
        raise UnknownTokenError(f"token id {token} out of range")
    return int(token)


def evaluate(c, e: Evidence, stats: EvalStats | None = None,
             with_trace=False):
    """Probability of the evidence under the circuit distribution."""
    lv = leaf_values(c, e)
    lm = length_mask(c, e)
    if c.n * len(c.vocab) > LOG_DOMAIN_THRESHOLD and not with_trace:
        logs = forward_log(c, lv, lm)
        if stats is not None:
            stats.edge_visits += c.num_edges
            stats.node_visits += c.num_nodes
        return float(np.exp(logs[c.root]))
    counter = {}
    values = forward(c, lv, lm, counter=counter)
    if stats is not None:
        stats.edge_visits += counter["edge_visits"]
        stats.node_visits += counter["node_visits"]
    if with_trace:
        trace = {label: float(values[node])
                 for label, node in c.sum_label.items() if values[node] > 0}
        return float(values[c.root]), trace
    return float(values[c.root])


def evi(c, w):
    """Probability of the exact token sequence w (names or ids)."""
    ids = [_resolve(c, t) for t in w]
    if len(ids) > c.n:
        raise EvidenceError(
            f"sequence length {len(ids)} exceeds circuit capacity {c.n}")
    if not ids:
        raise EvidenceError("empty sequence has no probability (lengths >= 1)")
    return evaluate(c, Evidence.of_sequence(ids))


def _exclude_everywhere(c, token_ids, upto=None):
    e = Evidence.free()
    for pos in range(c.n if upto is None else upto):
        e = e.exclude(pos, token_ids)
    return e


def mar_contains(c, t):
    """P(token appears at least once), any length."""
    t = _resolve(c, t)
    return 1.0 - evaluate(c, _exclude_everywhere(c, [t]))


def mar_span(c, seq, p):
    """P(the token sequence seq starts at position p), any length that fits."""
    ids = [_resolve(c, t) for t in seq]
    if not ids:
        return 1.0
    if p < 0 or p + len(ids) > c.n:
        raise EvidenceError(
            f"span of {len(ids)} at position {p} does not fit in n={c.n}")
    e = Evidence.free()
    for off, t in enumerate(ids):
        e = e.observe(p + off, t)
    return evaluate(c, e)


def cond(c, target: Evidence, given: Evidence):
    """P(target | given); the conjunction must be consistent."""
    denom = evaluate(c, given)
    if denom <= 0.0:
        raise ZeroConditionError("conditioning evidence has zero probability")
    joint = evaluate(c, target.merge(given))
    return joint / denom


def cond_contains(c, t2, t1):
    """P(contains t2 | contains t1) via inclusion-exclusion."""
    t1 = _resolve(c, t1)
    t2 = _resolve(c, t2)
    p_not1 = evaluate(c, _exclude_everywhere(c, [t1]))
    p_t1 = 1.0 - p_not1
    if p_t1 <= 0.0:
        raise ZeroConditionError("conditioning token never occurs")
    if t1 == t2:
        return 1.0
    p_not2 = evaluate(c, _exclude_everywhere(c, [t2]))
    p_not_both = evaluate(c, _exclude_everywhere(c, [t1, t2]))
    joint = 1.0 - p_not1 - p_not2 + p_not_both
    return min(max(joint, 0.0), p_t1) / p_t1


def mmap_next_at(c, t, p):
    """Most likely token at position p+1 given token t at position p."""
    t = _resolve(c, t)
    if p < 0 or p + 1 >= c.n:
        raise EvidenceError(f"position {p}+1 outside circuit (n={c.n})")
    base = mar_span(c, [t], p)
    if base <= 0.0:
        raise ZeroConditionError(f"token at position {p} has zero probability")
    best_tok, best_val = None, -1.0
    for v in range(len(c.vocab)):
        val = evaluate(c, Evidence.free().observe(p, t).observe(p + 1, v))
        if val > best_val + 1e-15:  # ties break to the lowest token id
            best_tok, best_val = v, val
    return best_tok


def first_occurrence_masses(c, t):
    """m[p] = P(first occurrence of token t is at position p)."""
    t = _resolve(c, t)
    masses = np.zeros(c.n)
    for p in range(c.n):
        e = _exclude_everywhere(c, [t], upto=p).observe(p, t)
        masses[p] = evaluate(c, e)
    return masses


def mmap_after(c, t):
    """Most likely token to occur anywhere after the first occurrence of t.

    Scores v by sum over p of P(first occurrence at p) * P(v somewhere
    after p | first occurrence at p); strings where t only ever sits at the
    final position make the query undefined.
    """
    t = _resolve(c, t)
    masses = first_occurrence_masses(c, t)
    if masses.sum() <= 0.0:
        raise ZeroConditionError("token never occurs")
    non_final = 0.0
    firsts = []
    for p in range(c.n):
        if masses[p] <= 0.0:
            firsts.append(None)
            continue
        e = _exclude_everywhere(c, [t], upto=p).observe(p, t)
        firsts.append(e)
        if p + 1 < c.n:
            ended_here = evaluate(c, e.with_length(p + 1)) if p + 1 <= c.n else 0.0
            non_final += masses[p] - ended_here
    if non_final <= 0.0:
        raise ZeroConditionError(f"no position after {c.vocab.name(t)!r}")
    best_tok, best_val = None, -1.0
    for v in range(len(c.vocab)):
        score = 0.0
        for p in range(c.n):
            if firsts[p] is None or p + 1 >= c.n:
                continue
            e = firsts[p]
            without_v = e
            for q in range(p + 1, c.n):
                without_v = without_v.exclude(q, [v])
            score += masses[p] - evaluate(c, without_v)
        if score > best_val + 1e-15:
            best_tok, best_val = v, score
    return best_tok


def cond_follows(c, span, p, t):
    """P(token t occurs somewhere after the span | span at position p)."""
    ids = [_resolve(c, x) for x in span]
    t = _resolve(c, t)
    base = mar_span(c, ids, p)
    if base <= 0.0:
        raise ZeroConditionError("span has zero probability")
    e = Evidence.free()
    for off, x in enumerate(ids):
        e = e.observe(p + off, x)
    without = e
    for q in range(p + len(ids), c.n):
        without = without.exclude(q, [t])
    return (base - evaluate(c, without)) / base


# --- CLI query language ---

def run_query(c, line, with_trace=False):
    """Parse and run one query line; see the README for the syntax."""
    parts = line.split()
    if not parts:
        raise EvidenceError("empty query")
    op = parts[0].upper()
    trace = None
    if op == "EVI":
        if with_trace:
            value, trace = evaluate(
                c, Evidence.of_sequence([_resolve(c, t) for t in parts[1:]]),
                with_trace=True)
        else:
            value = evi(c, parts[1:])
    elif op == "MAR":
        if len(parts) != 2:
            raise EvidenceError("usage: MAR <token>")
        value = mar_contains(c, parts[1])
    elif op == "MARSPAN":
        if len(parts) < 3:
            raise EvidenceError("usage: MARSPAN <pos> <tokens...>")
        value = mar_span(c, parts[2:], int(parts[1]))
    elif op == "COND":
        if len(parts) != 4 or parts[2].upper() != "GIVEN":
            raise EvidenceError("usage: COND <token2> GIVEN <token1>")
        value = cond_contains(c, parts[1], parts[3])
    elif op == "CONDAT":
        # P(span continues as given | first token of span at position p)
        if len(parts) < 4:
            raise EvidenceError("usage: CONDAT <pos> <token1> <tokens...>")
        p = int(parts[1])
        base = mar_span(c, [parts[2]], p)
        if base <= 0.0:
            raise ZeroConditionError("conditioning token has zero probability")
        value = mar_span(c, parts[2:], p) / base
    elif op == "CONDAFTER":
        # CONDAFTER <pos> <span...> THEN <token>
        if "THEN" not in [x.upper() for x in parts]:
            raise EvidenceError("usage: CONDAFTER <pos> <span...> THEN <token>")
        sep = [x.upper() for x in parts].index("THEN")
        value = cond_follows(c, parts[2:sep], int(parts[1]), parts[sep + 1])
    elif op == "MMAP":
        if len(parts) == 3 and parts[1].upper() == "AFTER":
            value = c.vocab.name(mmap_after(c, parts[2]))
        elif len(parts) == 4 and parts[1].upper() == "AT":
            value = c.vocab.name(mmap_next_at(c, parts[3], int(parts[2])))
        else:
            raise EvidenceError("usage: MMAP AFTER <token> | MMAP AT <pos> <token>")
    else:
        raise EvidenceError(f"unknown query {op!r}")
    return QueryResult(query=line.strip(), value=value, trace=trace)
