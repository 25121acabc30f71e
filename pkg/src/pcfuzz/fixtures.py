"""Bundled fixture grammars, lexer/concretizer specs, bug oracles, and the
ground-truth corpus samplers behind the shipped seed sets.

Each fixture grammar ships with four seed corpora (homogeneous structure,
homogeneous token, very small, diverse) drawn from a biased generative
process with injected cross-rule correlations: token choices depend on the
slot they fill and on choices made elsewhere in the same item. The SQL
seed samplers additionally enforce that no seed item triggers any bundled
bug oracle, which the test suite re-checks.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .corpus import ConcretizerSpec, TokenizerSpec
from .grammar import parse_grammar, replace_literals, to_bnf, to_cnf
from .learning import Pcfg
from .testbed import parse_oracles

FIXTURE_N = {"arith": 9, "json": 8, "sql": 21, "finite": 4}
CORPUS_KINDS = ("homogeneous_structure", "homogeneous_token",
                "very_small", "diverse")

# conditioning-token to target-oracle mapping used by alignment reports
SQL_TARGETS = {
    "SSN": ("BUG1_order_ssn", "BUG2_proj_ssn_where",
            "BUG4_star_where_ssn", "BUG5_ssn_email"),
    "SALARY": ("BUG3_group_having_salary",),
}
SQL_DEPENDENCY_ORACLE = "BUG1_order_ssn"


def fixture_text(filename):
    return (resources.files("pcfuzz") / "fixtures" / "data" / filename) \
        .read_text("utf-8")


def fixture_path(filename):
    return str(resources.files("pcfuzz") / "fixtures" / "data" / filename)


def load_grammar(name):
    """Parse a fixture grammar and replace its literals; returns
    (ebnf grammar, vocabulary)."""
    return replace_literals(parse_grammar(fixture_text(f"{name}.g")))


def build_cnf(name):
    g, vocab = load_grammar(name)
    return to_cnf(to_bnf(g), vocab)


def load_tokenizer(name):
    return TokenizerSpec.parse(fixture_text(f"{name}.lex"))


def load_concretizer(name):
    return ConcretizerSpec.parse(fixture_text(f"{name}.conc"))


def load_oracles(name="sql"):
    return parse_oracles(fixture_text(f"{name}.oracles"))


# --- ground-truth samplers ---

def _pick(rng, pool):
    names = [n for n, _ in pool]
    probs = np.array([p for _, p in pool], dtype=float)
    return names[int(rng.choice(len(names), p=probs / probs.sum()))]


def make_arith_corpus(kind, size, seed):
    """Digit choice depends on the digit slot: the first digit is usually
    ONE, later digits usually TWO. A plain pCFG must pool these."""
    rng = np.random.default_rng([seed, 101])
    first = [("ONE", 0.85), ("TWO", 0.15)]
    later = [("ONE", 0.25), ("TWO", 0.75)]
    if kind == "homogeneous_token":
        first = later = [("ONE", 0.9), ("TWO", 0.1)]
    lengths = [(1, 0.15), (2, 0.3), (3, 0.25), (4, 0.2), (5, 0.1)]
    if kind == "homogeneous_structure":
        lengths = [(3, 1.0)]
    if kind == "very_small":
        size = min(size, 10)
    items = []
    for _ in range(size):
        digits = int(_pick(rng, [(str(d), p) for d, p in lengths]))
        seq = [_pick(rng, first)]
        for _ in range(digits - 1):
            seq += ["PLUS", _pick(rng, later)]
        items.append(tuple(seq))
    return items


def make_json_corpus(kind, size, seed):
    """Value kind depends on nesting depth: containers at the top, scalars
    below. Items longer than the fixture bound are resampled."""
    rng = np.random.default_rng([seed, 202])
    top = [("obj", 0.45), ("arr", 0.3), ("STRING", 0.15), ("NUMBER", 0.1)]
    deep = [("obj", 0.08), ("arr", 0.08), ("STRING", 0.44), ("NUMBER", 0.4)]
    if kind == "homogeneous_token":
        top = [("obj", 0.9), ("STRING", 0.1)]
        deep = [("STRING", 0.9), ("NUMBER", 0.1)]
    if kind == "very_small":
        size = min(size, 10)

    def value(depth):
        pool = top if depth == 0 else deep
        choice = _pick(rng, pool)
        if choice == "obj":
            pairs = int(rng.choice([0, 1, 2], p=[0.25, 0.55, 0.2]))
            seq = ["LBRACE"]
            for i in range(pairs):
                if i:
                    seq.append("COMMA")
                seq += ["STRING", "COLON"] + value(depth + 1)
            return seq + ["RBRACE"]
        if choice == "arr":
            vals = int(rng.choice([0, 1, 2], p=[0.3, 0.5, 0.2]))
            seq = ["LBRACK"]
            for i in range(vals):
                if i:
                    seq.append("COMMA")
                seq += value(depth + 1)
            return seq + ["RBRACK"]
        return [choice]

    items = []
    while len(items) < size:
        if kind == "homogeneous_structure":
            seq = ["LBRACE", "STRING", "COLON",
                   _pick(rng, [("STRING", 0.5), ("NUMBER", 0.5)]), "RBRACE"]
        else:
            seq = value(0)
        if 1 <= len(seq) <= FIXTURE_N["json"]:
            items.append(tuple(seq))
    return items


# SQL slot pools. SSN never appears in a slot where it would complete a bug
# pattern together with the co-occurrence bans below, so no seed triggers
# any bundled oracle; the circuit's position-shared weights deliberately
# cannot represent those bans. The GROUP BY column sits at the position the
# ORDER BY column takes in sibling structures, which is the sharing channel
# a trained circuit generalizes through.
_PROJ_NO_W = [("NAME", 0.26), ("EMAIL", 0.2), ("ID", 0.15),
              ("SALARY", 0.12), ("SSN", 0.15), ("ROLE", 0.06), ("PHONE", 0.06)]
_PROJ_W = [("NAME", 0.3), ("EMAIL", 0.24), ("ID", 0.18), ("SALARY", 0.14),
           ("ROLE", 0.07), ("PHONE", 0.07)]
_WHERE_COL = [("SALARY", 0.32), ("SSN", 0.4), ("SCORE", 0.2), ("HIRE", 0.08)]
_WHERE_COL_STAR = [("SALARY", 0.5), ("SCORE", 0.38), ("HIRE", 0.12)]
_GROUP_COL = [("SSN", 0.6), ("DEPT", 0.22), ("CITY", 0.18)]
_GROUP_COL_SAFE = [("DEPT", 0.5), ("CITY", 0.3), ("ROLE", 0.2)]
_HAVING_COL = [("SCORE", 0.45), ("DEPT", 0.2), ("SSN", 0.35)]
_ORDER_COL = [("EMAIL", 0.38), ("SALARY", 0.38), ("NAME", 0.14), ("BUDGET", 0.1)]
_VAL_COL = [("SCORE", 0.5), ("DEPT", 0.3), ("BUDGET", 0.2)]


def _ban(pool, banned):
    kept = [(n, p) for n, p in pool if n not in banned]
    return kept if kept else [("NAME", 1.0)]


def _sql_item(rng, style):
    if style == "homogeneous_structure":
        where, group, having, order, star, ncols = True, False, False, True, False, 1
    else:
        where = rng.random() < 0.5
        group = rng.random() < (0.55 if where else 0.45)
        having = (not where) and rng.random() < 0.45
        order = rng.random() < 0.85
        star = rng.random() < 0.18
        ncols = int(rng.choice([1, 2], p=[0.55, 0.45]))

    banned = set()
    if group and having:
        banned.add("SALARY")  # keep clear of the group/having oracle

    def draw(pool):
        tok = _pick(rng, _ban(pool, banned))
        if tok == "SSN":
            banned.add("EMAIL")
        if tok == "EMAIL":
            banned.add("SSN")
        return tok

    def cond(pool):
        col = draw(pool)
        cmp_tok = "GT" if rng.random() < 0.55 else "EQ"
        val = "NUM" if rng.random() < 0.8 else draw(_VAL_COL)
        return [col, cmp_tok, val]

    seq = ["SELECT"]
    if star:
        seq.append("STAR")
    else:
        pool = _PROJ_W if where else _PROJ_NO_W
        if style == "homogeneous_token":
            pool = [("EMAIL", 0.5), ("NAME", 0.3), ("ID", 0.2)] if where \
                else [("SSN", 0.5), ("NAME", 0.3), ("ID", 0.2)]
        cols = [draw(pool)]
        for _ in range(ncols - 1):
            cols += ["COMMA", draw(pool)]
        seq += cols
    seq += ["FROM", "ID"]
    if where:
        seq += ["WHERE"] + cond(_WHERE_COL_STAR if star else _WHERE_COL)
    if group:
        if style == "homogeneous_token":
            pool = [("SSN", 0.7), ("DEPT", 0.3)]
        else:
            pool = _GROUP_COL
        if star and where:
            pool = _GROUP_COL_SAFE  # SSN after STAR + WHERE would complete a bug
        seq += ["GROUP", "BY", draw(pool)]
    if having:
        seq += ["HAVING"] + cond(_HAVING_COL)
    if order:
        seq += ["ORDER", "BY", draw(_ORDER_COL)]
    seq.append("SEMI")
    return tuple(seq)


def make_sql_corpus(kind, size, seed):
    rng = np.random.default_rng([seed, 303])
    if kind == "very_small":
        size = min(size, 10)
    return [_sql_item(rng, kind) for _ in range(size)]


CORPUS_MAKERS = {"arith": make_arith_corpus, "json": make_json_corpus,
                 "sql": make_sql_corpus}
CORPUS_SIZES = {"homogeneous_structure": 50, "homogeneous_token": 50,
                "very_small": 10, "diverse": 200}
CORPUS_SEED = 20240501


def seed_corpus(fixture, kind):
    """The shipped seed corpus for a fixture grammar, regenerated
    deterministically from its ground-truth sampler."""
    return CORPUS_MAKERS[fixture](kind, CORPUS_SIZES[kind], CORPUS_SEED)


def write_seed_corpora(directory):
    """Regenerate the committed corpus files (used once at build time)."""
    from pathlib import Path
    from .corpus import write_corpus_file
    for fixture in CORPUS_MAKERS:
        for kind in CORPUS_KINDS:
            path = Path(directory) / f"{fixture}_{kind}.corpus"
            write_corpus_file(path, seed_corpus(fixture, kind))


def finite_pcfg():
    """A deterministic non-uniform pCFG over the finite fixture grammar."""
    g = build_cnf("finite")
    by_lhs = {}
    for rule in g.binary_rules:
        by_lhs.setdefault(rule[0], []).append(("b", rule))
    for rule in g.terminal_rules:
        by_lhs.setdefault(rule[0], []).append(("t", rule))
    binary, terminal = {}, {}
    for lhs in sorted(by_lhs):
        rules = sorted(by_lhs[lhs])
        weights = np.arange(1, len(rules) + 1, dtype=float)
        weights /= weights.sum()
        for (tag, rule), w in zip(rules, weights):
            (binary if tag == "b" else terminal)[rule] = float(w)
    return Pcfg(base=g, binary_probs=binary, terminal_probs=terminal)
