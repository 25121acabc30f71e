"""Grammar handling: parsing, literal replacement, EBNF to BNF refactoring,
Chomsky normal form, CYK membership, and a uniform stochastic derivation
baseline generator.

Grammar file format (one rule may span lines, terminated by ';'):

    name : alt ( '|' alt )* ';'

An alternative is a whitespace separated sequence of nonterminal names
(lowercase initial), token names (uppercase initial), quoted literals
('+', 'select'), or parenthesized groups. Any single item or group may be
suffixed with '*', '+' or '?'. The first rule is the entry symbol.
Comments run from '//' to end of line.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DerivationBudgetError,
    DuplicateRuleError,
    GrammarError,
    GrammarSyntaxError,
    UndefinedSymbolError,
    UnknownTokenError,
    UnproductiveGrammarError,
)

END_MARKER = "EOF"


# --- items appearing on a rule's right-hand side ---

@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class Tok:
    name: str


@dataclass(frozen=True)
class Lit:
    text: str


@dataclass(frozen=True)
class Group:
    """Parenthesized alternatives with a repetition marker.

    rep is one of 'star', 'plus', 'opt', 'none'. Suffixing a single item
    is represented as a one alternative, one item group.
    """

    alts: tuple  # tuple of alternatives, each a tuple of items
    rep: str


class Vocabulary:
    """Ordered token alphabet. The end marker is always present exactly once."""

    def __init__(self, names, end_marker=END_MARKER):
        names = list(names)
        if names.count(end_marker) > 1:
            raise GrammarError(f"end marker {end_marker!r} listed more than once")
        if end_marker not in names:
            names.append(end_marker)
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise GrammarError(f"duplicate token names: {', '.join(dupes)}")
        self.names = tuple(names)
        self.end_marker = end_marker
        self._index = {n: i for i, n in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name):
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.names == other.names \
            and self.end_marker == other.end_marker

    def id(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise UnknownTokenError(f"unknown token {name!r}") from None

    def name(self, token_id):
        if not 0 <= token_id < len(self.names):
            raise UnknownTokenError(f"token id {token_id} out of range")
        return self.names[token_id]

    def encode(self, names):
        return [self.id(n) for n in names]

    def decode(self, ids):
        return [self.name(i) for i in ids]


@dataclass
class Grammar:
    """EBNF-style grammar: rules map nonterminal name to alternatives."""

    rules: dict
    entry: str
    positions: dict = field(default_factory=dict)  # rule name -> (line, col)

    def nonterminals(self):
        return list(self.rules)

    def walk_items(self):
        """Yield every item in rule definition order, descending into groups."""
        def rec(items):
            for it in items:
                if isinstance(it, Group):
                    for alt in it.alts:
                        yield from rec(alt)
                else:
                    yield it
        for name in self.rules:
            for alt in self.rules[name]:
                yield from rec(alt)

    def token_names(self):
        seen = []
        for it in self.walk_items():
            if isinstance(it, Tok) and it.name not in seen:
                seen.append(it.name)
        return seen


@dataclass
class CnfGrammar:
    """Chomsky normal form grammar over a token vocabulary.

    binary_rules holds (A, B, C) triples, terminal_rules holds (A, token_id)
    pairs. Token wrapper nonterminals keep the token's own name, so a rule
    like ``eq -> ONE block`` stays a binary rule with nonterminal ONE whose
    single production is the ONE token.
    """

    nonterminals: tuple
    binary_rules: tuple
    terminal_rules: tuple
    entry: str
    vocab: Vocabulary

    def __post_init__(self):
        self._nt_index = {n: i for i, n in enumerate(self.nonterminals)}
        self._by_lhs_bin = {}
        self._by_lhs_term = {}
        for a, b, c in self.binary_rules:
            self._by_lhs_bin.setdefault(a, []).append((b, c))
        for a, t in self.terminal_rules:
            self._by_lhs_term.setdefault(a, []).append(t)

    def binary_for(self, name):
        return self._by_lhs_bin.get(name, [])

    def terminals_for(self, name):
        return self._by_lhs_term.get(name, [])

    def derivable_lengths(self, max_len):
        """Boolean table d[A][l]: A derives some token string of length l."""
        d = {a: np.zeros(max_len + 1, dtype=bool) for a in self.nonterminals}
        for a in self.nonterminals:
            if self.terminals_for(a):
                d[a][1] = True
        for length in range(2, max_len + 1):
            for a, b, c in self.binary_rules:
                if d[a][length]:
                    continue
                db, dc = d[b], d[c]
                if any(db[k] and dc[length - k] for k in range(1, length)):
                    d[a][length] = True
        # a single fixpoint sweep per length suffices because rules cannot
        # shorten: length-l derivability only consults lengths < l
        return d


# --- grammar file parsing ---

_PUNCT = {":": "colon", "|": "pipe", ";": "semi", "(": "lparen",
          ")": "rparen", "*": "star", "+": "plus", "?": "opt"}


def _lex_grammar(text):
    tokens = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if text.startswith("//", i):
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch in _PUNCT:
            tokens.append((_PUNCT[ch], ch, line, col))
            i += 1
            col += 1
            continue
        if ch == "'":
            j = i + 1
            buf = []
            while j < n and text[j] != "'":
                if text[j] == "\\" and j + 1 < n:
                    buf.append(text[j + 1])
                    j += 2
                else:
                    buf.append(text[j])
                    j += 1
            if j >= n:
                raise GrammarSyntaxError("unterminated literal", line, col)
            tokens.append(("literal", "".join(buf), line, col))
            col += j + 1 - i
            i = j + 1
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], line, col))
            col += j - i
            i = j
            continue
        raise GrammarSyntaxError(f"unsupported character {ch!r}", line, col)
    tokens.append(("eof", "", line, col))
    return tokens


class _GrammarParser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind, what):
        tok = self.next()
        if tok[0] != kind:
            raise GrammarSyntaxError(f"expected {what}, found {tok[1]!r}" if tok[1]
                                     else f"expected {what}, found end of input",
                                     tok[2], tok[3])
        return tok

    def parse(self):
        rules = {}
        positions = {}
        while self.peek()[0] != "eof":
            name_tok = self.expect("name", "rule name")
            name = name_tok[1]
            if not (name[0].islower() or name[0] == "_"):
                raise GrammarSyntaxError(
                    f"rule names must start lowercase: {name!r}",
                    name_tok[2], name_tok[3])
            if name in rules:
                raise DuplicateRuleError(
                    f"{name_tok[2]}:{name_tok[3]}: rule {name!r} already defined "
                    f"at line {positions[name][0]}")
            self.expect("colon", "':'")
            alts = self.parse_alts()
            self.expect("semi", "';'")
            rules[name] = alts
            positions[name] = (name_tok[2], name_tok[3])
        if not rules:
            tok = self.peek()
            raise GrammarSyntaxError("no rules defined (missing entry rule)",
                                     tok[2], tok[3])
        return rules, positions

    def parse_alts(self):
        alts = [self.parse_alt()]
        while self.peek()[0] == "pipe":
            self.next()
            alts.append(self.parse_alt())
        return alts

    def parse_alt(self):
        items = []
        while self.peek()[0] in ("name", "literal", "lparen"):
            items.append(self.parse_item())
        if not items:
            tok = self.peek()
            raise GrammarSyntaxError("empty alternative", tok[2], tok[3])
        return tuple(items)

    def parse_item(self):
        kind, value, line, col = self.next()
        if kind == "name":
            atom = Ref(value) if value[0].islower() or value[0] == "_" else Tok(value)
        elif kind == "literal":
            atom = Lit(value)
        else:  # lparen
            alts = self.parse_alts()
            self.expect("rparen", "')'")
            atom = Group(tuple(alts), "none")
        rep = self._suffix()
        if rep == "none":
            return atom
        if isinstance(atom, Group):
            return Group(atom.alts, rep)
        return Group(((atom,),), rep)

    def _suffix(self):
        kind = self.peek()[0]
        if kind in ("star", "plus", "opt"):
            self.next()
            return kind if kind != "opt" else "opt"
        return "none"


def parse_grammar(text):
    """Parse grammar file contents. The first rule is the entry symbol."""
    rules, positions = _GrammarParser(_lex_grammar(text)).parse()
    entry = next(iter(rules))
    g = Grammar(rules=rules, entry=entry, positions=positions)
    _check_references(g)
    return g


def _check_references(g):
    for name in g.rules:
        for alt in g.rules[name]:
            _check_alt(g, name, alt)


def _check_alt(g, rule_name, items):
    for it in items:
        if isinstance(it, Ref) and it.name not in g.rules:
            line, col = g.positions.get(rule_name, (0, 0))
            raise UndefinedSymbolError(
                f"rule {rule_name!r} (line {line}) references undefined "
                f"nonterminal {it.name!r}")
        if isinstance(it, Group):
            for alt in it.alts:
                _check_alt(g, rule_name, alt)


# --- literal replacement ---

_GLYPH_NAMES = {
    "+": "PLUS", "-": "MINUS", "*": "STAR", "/": "SLASH", "%": "PERCENT",
    "=": "EQUALS", "<": "LT", ">": "GT", "!": "BANG", "&": "AMP", "|": "BAR",
    ",": "COMMA", ";": "SEMI", ":": "COLON", ".": "DOT", "#": "HASH",
    "(": "LPAREN", ")": "RPAREN", "{": "LBRACE", "}": "RBRACE",
    "[": "LBRACK", "]": "RBRACK", "'": "QUOTE", '"': "DQUOTE",
    "?": "QMARK", "@": "AT", "^": "CARET", "~": "TILDE", "$": "DOLLAR",
    "_": "UNDERSCORE", " ": "SPACE", "\\": "BACKSLASH",
    "0": "ZERO", "1": "ONE", "2": "TWO", "3": "THREE", "4": "FOUR",
    "5": "FIVE", "6": "SIX", "7": "SEVEN", "8": "EIGHT", "9": "NINE",
}


def _literal_name(text, taken):
    if text.isalpha():
        base = text.upper()
    else:
        parts = [_GLYPH_NAMES.get(ch) for ch in text]
        base = "_".join(p for p in parts if p) if all(parts) else ""
    if not base:
        base = "LIT"
    name = base
    k = 2
    while name in taken:
        name = f"{base}_{k}"
        k += 1
    return name


def replace_literals(g):
    """Replace inline literals with fresh named tokens.

    Returns the rewritten grammar and the vocabulary of all tokens (named
    tokens first in order of appearance, then fresh literal tokens as they
    are encountered, then the end marker).
    """
    taken = set(g.rules)
    order = []
    mapping = {}

    def note_token(name):
        if name not in taken:
            taken.add(name)
            order.append(name)

    def rewrite(items):
        out = []
        for it in items:
            if isinstance(it, Lit):
                if it.text not in mapping:
                    mapping[it.text] = _literal_name(it.text, taken)
                    note_token(mapping[it.text])
                out.append(Tok(mapping[it.text]))
            elif isinstance(it, Group):
                out.append(Group(tuple(rewrite(a) for a in it.alts), it.rep))
            else:
                if isinstance(it, Tok):
                    note_token(it.name)
                out.append(it)
        return tuple(out)

    new_rules = {name: [rewrite(a) for a in g.rules[name]] for name in g.rules}
    vocab = Vocabulary(order)
    return Grammar(rules=new_rules, entry=g.entry, positions=dict(g.positions)), vocab


# --- EBNF -> BNF ---

def to_bnf(g):
    """Expand repetition markers and groups into plain BNF rules.

    One-or-more repetitions become left recursive accumulator rules so that
    repeated blocks share structure; optional parts split the alternative.
    The output may contain empty alternatives (from '*' or '?' filling a
    whole alternative); Chomsky normalization removes them.
    """
    for it in g.walk_items():
        if isinstance(it, Lit):
            raise GrammarError("literals must be replaced before BNF refactoring")

    new_rules = {}
    fresh_rules = {}
    rep_memo = {}
    counter = itertools.count(1)
    taken = set(g.rules)

    def fresh_name(host):
        while True:
            name = f"{host}_rep{next(counter)}"
            if name not in taken:
                taken.add(name)
                return name

    def expand_alt(host, items):
        """Return the list of flat alternatives (tuples of Ref/Tok)."""
        seqs = [()]
        for it in items:
            if isinstance(it, (Ref, Tok)):
                seqs = [s + (it,) for s in seqs]
                continue
            inner = []
            for alt in it.alts:
                inner.extend(expand_alt(host, alt))
            inner = list(dict.fromkeys(inner))
            if it.rep == "none":
                seqs = [s + tail for s in seqs for tail in inner]
            elif it.rep == "opt":
                seqs = [s + tail for s in seqs for tail in [()] + inner]
            else:  # star / plus share the one-or-more accumulator
                key = tuple(inner)
                if key not in rep_memo:
                    rep = fresh_name(host)
                    rep_memo[key] = rep
                    fresh_rules[rep] = [tail for tail in inner] + \
                        [(Ref(rep),) + tail for tail in inner]
                rep = rep_memo[key]
                tails = [(Ref(rep),)] if it.rep == "plus" else [(), (Ref(rep),)]
                seqs = [s + tail for s in seqs for tail in tails]
        return seqs

    for name in g.rules:
        alts = []
        for alt in g.rules[name]:
            alts.extend(expand_alt(name, alt))
        new_rules[name] = list(dict.fromkeys(alts))
    new_rules.update(fresh_rules)
    return Grammar(rules=new_rules, entry=g.entry, positions=dict(g.positions))


def remove_epsilon(g):
    """Expand nullable references and drop empty alternatives from a BNF
    grammar; the empty string leaves the language."""
    nullable = set()
    changed = True
    while changed:
        changed = False
        for name, alts in g.rules.items():
            if name in nullable:
                continue
            for alt in alts:
                if all(isinstance(it, Ref) and it.name in nullable for it in alt):
                    nullable.add(name)
                    changed = True
                    break
    new_rules = {}
    for name, alts in g.rules.items():
        out = []
        for alt in alts:
            optional = [i for i, it in enumerate(alt)
                        if isinstance(it, Ref) and it.name in nullable]
            for mask in range(1 << len(optional)):
                drop = {optional[b] for b in range(len(optional)) if mask >> b & 1}
                cand = tuple(x for i, x in enumerate(alt) if i not in drop)
                if cand:
                    out.append(cand)
        new_rules[name] = list(dict.fromkeys(out))
    return Grammar(rules=new_rules, entry=g.entry, positions=dict(g.positions))


def grammar_to_text(g):
    """Render a literal-free grammar in the rule file syntax."""
    def item(it):
        if isinstance(it, (Ref, Tok)):
            return it.name
        suffix = {"star": "*", "plus": "+", "opt": "?", "none": ""}[it.rep]
        inner = " | ".join(" ".join(item(x) for x in alt) for alt in it.alts)
        return f"({inner}){suffix}"

    lines = []
    for name, alts in g.rules.items():
        rendered = [" ".join(item(it) for it in alt) for alt in alts if alt]
        if rendered:
            lines.append(f"{name} : {' | '.join(rendered)} ;")
    return "\n".join(lines) + "\n"


def cnf_to_text(g):
    """Render a CNF grammar in the rule file syntax. Token wrapper rules
    (nonterminals named after their token) are left implicit; reparsing the
    output and normalizing again recreates them."""
    wrappers = {a for a, t in g.terminal_rules
                if a == g.vocab.name(t) and not a[0].islower()}
    lines = []
    for name in g.nonterminals:
        if name in wrappers:
            continue
        alts = [f"{b} {c}" for a, b, c in g.binary_rules if a == name]
        alts += [g.vocab.name(t) for a, t in g.terminal_rules if a == name]
        if alts:
            lines.append(f"{name} : {' | '.join(alts)} ;")
    return "\n".join(lines) + "\n"


def token_space_size(vocab_size, max_len):
    """Number of token strings of length 1..max_len, the uniform-mixture
    denominator used by evaluation smoothing."""
    return sum(vocab_size ** length for length in range(1, max_len + 1))


def save_vocab(vocab, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"endmarker {vocab.end_marker}\n")
        for name in vocab.names:
            fh.write(name + "\n")


def load_vocab(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("endmarker "):
        raise GrammarError(f"{path}: missing endmarker header")
    return Vocabulary(lines[1:], end_marker=lines[0].split()[1])


# --- BNF -> CNF ---

def to_cnf(g, vocab=None):
    """Normalize a BNF grammar to Chomsky normal form.

    The empty string is removed from the language; unit chains are inlined;
    tokens inside long rules gain wrapper nonterminals named after the
    token itself; long rules are binarized right to left with shared suffix
    chains. Unreachable and unproductive symbols are pruned.
    """
    for name in g.rules:
        for alt in g.rules[name]:
            for it in alt:
                if isinstance(it, Group):
                    raise GrammarError("EBNF operators must be expanded before CNF")
                if isinstance(it, Lit):
                    raise GrammarError("literals must be replaced before CNF")

    if vocab is None:
        vocab = Vocabulary(g.token_names())

    # symbolic alternatives: ("n", name) / ("t", token-name)
    alts = {name: [tuple(("n", it.name) if isinstance(it, Ref) else ("t", it.name)
                         for it in alt)
                   for alt in g.rules[name]]
            for name in g.rules}

    # 1. epsilon elimination
    nullable = set()
    changed = True
    while changed:
        changed = False
        for name, rule_alts in alts.items():
            if name in nullable:
                continue
            for alt in rule_alts:
                if all(kind == "n" and sym in nullable for kind, sym in alt):
                    nullable.add(name)
                    changed = True
                    break
    for name in alts:
        expanded = []
        for alt in alts[name]:
            opt_positions = [i for i, (kind, sym) in enumerate(alt)
                             if kind == "n" and sym in nullable]
            for mask in range(1 << len(opt_positions)):
                drop = {opt_positions[b] for b in range(len(opt_positions))
                        if mask >> b & 1}
                cand = tuple(x for i, x in enumerate(alt) if i not in drop)
                if cand:
                    expanded.append(cand)
        alts[name] = list(dict.fromkeys(expanded))

    # 2. unit rule elimination
    unit_reach = {name: {name} for name in alts}
    changed = True
    while changed:
        changed = False
        for name in alts:
            for alt in alts[name]:
                if len(alt) == 1 and alt[0][0] == "n":
                    target = alt[0][1]
                    new = unit_reach[target] - unit_reach[name]
                    if new:
                        unit_reach[name] |= new
                        changed = True
    for name in alts:
        merged = []
        for target in unit_reach[name]:
            for alt in alts[target]:
                if len(alt) == 1 and alt[0][0] == "n":
                    continue
                merged.append(alt)
        alts[name] = list(dict.fromkeys(merged))

    # 3. wrap tokens that appear inside long rules; wrapper keeps the token name
    taken = set(alts) | set(vocab.names)
    wrapped = {}

    def wrapper_for(tok_name):
        if tok_name not in wrapped:
            name = tok_name
            while name in alts:
                name += "_w"
            wrapped[tok_name] = name
        return wrapped[tok_name]

    for name in list(alts):
        fixed = []
        for alt in alts[name]:
            if len(alt) >= 2:
                alt = tuple(("n", wrapper_for(sym)) if kind == "t" else (kind, sym)
                            for kind, sym in alt)
            fixed.append(alt)
        alts[name] = fixed
    for tok_name, wrap_name in wrapped.items():
        alts[wrap_name] = [(("t", tok_name),)]

    # 4. binarize with shared suffix chains
    chain_memo = {}
    counter = itertools.count(1)

    def chain_for(suffix):
        if suffix not in chain_memo:
            while True:
                name = f"_seq{next(counter)}"
                if name not in taken:
                    taken.add(name)
                    break
            chain_memo[suffix] = name
            alts[name] = [_binarize(suffix)]
        return chain_memo[suffix]

    def _binarize(alt):
        if len(alt) <= 2:
            return alt
        return (alt[0], ("n", chain_for(alt[1:])))

    for name in list(alts):
        alts[name] = [_binarize(alt) for alt in alts[name]]

    # 5. collect rules, then prune unproductive / unreachable symbols
    binary = {}
    terminal = {}
    for name, rule_alts in alts.items():
        for alt in rule_alts:
            if len(alt) == 2:
                binary.setdefault(name, set()).add((alt[0][1], alt[1][1]))
            else:
                kind, sym = alt[0]
                if kind != "t":
                    raise GrammarError(
                        f"internal: unit rule {name} -> {sym} survived normalization")
                terminal.setdefault(name, set()).add(sym)

    productive = set(terminal)
    changed = True
    while changed:
        changed = False
        for name, pairs in binary.items():
            if name in productive:
                continue
            if any(b in productive and c in productive for b, c in pairs):
                productive.add(name)
                changed = True
    if g.entry not in productive:
        raise UnproductiveGrammarError(
            f"entry nonterminal {g.entry!r} cannot derive any token string")

    reachable = {g.entry}
    work = [g.entry]
    while work:
        name = work.pop()
        for b, c in binary.get(name, ()):
            if b not in productive or c not in productive:
                continue
            for child in (b, c):
                if child not in reachable:
                    reachable.add(child)
                    work.append(child)

    keep = reachable & productive
    order = [g.entry] + [n for n in alts if n in keep and n != g.entry]
    binary_rules = tuple(sorted(
        (a, b, c) for a in keep for b, c in binary.get(a, ())
        if b in keep and c in keep))
    terminal_rules = tuple(sorted(
        (a, vocab.id(t)) for a in keep for t in terminal.get(a, ())))
    used = {a for a, _, _ in binary_rules} | {b for _, b, _ in binary_rules} \
        | {c for _, _, c in binary_rules} | {a for a, _ in terminal_rules}
    order = [n for n in order if n in used or n == g.entry]
    return CnfGrammar(nonterminals=tuple(order), binary_rules=binary_rules,
                      terminal_rules=terminal_rules, entry=g.entry, vocab=vocab)


# --- CYK membership ---

def _encode_input(g, w):
    ids = []
    for tok in w:
        if isinstance(tok, str):
            ids.append(g.vocab.id(tok))
        else:
            if not 0 <= tok < len(g.vocab):
                raise UnknownTokenError(f"token id {tok} out of range")
            ids.append(int(tok))
    return ids


def cyk_accepts(g, w):
    """True iff the entry symbol derives the token sequence w (|w| >= 1)."""
    ids = _encode_input(g, w)
    n = len(ids)
    if n == 0:
        return False
    term_index = {}
    for a, t in g.terminal_rules:
        term_index.setdefault(t, set()).add(a)
    table = [[set() for _ in range(n + 1)] for _ in range(n)]
    for i, t in enumerate(ids):
        table[i][i + 1] = set(term_index.get(t, ()))
    for span in range(2, n + 1):
        for i in range(n - span + 1):
            j = i + span
            cell = table[i][j]
            for a, b, c in g.binary_rules:
                if a in cell:
                    continue
                for k in range(i + 1, j):
                    if b in table[i][k] and c in table[k][j]:
                        cell.add(a)
                        break
    return g.entry in table[0][n]


def cyk_accepts_batch(g, seqs, chunk=512):
    """Vectorized CYK over many sequences; returns a boolean array."""
    results = np.zeros(len(seqs), dtype=bool)
    nt_index = {n: i for i, n in enumerate(g.nonterminals)}
    nnt = len(g.nonterminals)
    by_length = {}
    for idx, w in enumerate(seqs):
        by_length.setdefault(len(w), []).append(idx)
    term_rows = {}
    for a, t in g.terminal_rules:
        term_rows.setdefault(t, []).append(nt_index[a])
    for length, idxs in by_length.items():
        if length == 0:
            continue
        for start in range(0, len(idxs), chunk):
            batch = idxs[start:start + chunk]
            ids = np.array([_encode_input(g, seqs[i]) for i in batch], dtype=np.int32)
            m = len(batch)
            # table[s][i] : bool[m, nnt] for span (i, i+s)
            table = [None] * (length + 1)
            base = np.zeros((length, m, nnt), dtype=bool)
            for t, rows in term_rows.items():
                hits = ids.T == t  # [length, m]
                for r in rows:
                    base[:, :, r] |= hits
            table[1] = base
            for span in range(2, length + 1):
                cur = np.zeros((length - span + 1, m, nnt), dtype=bool)
                for a, b, c in g.binary_rules:
                    ai, bi, ci = nt_index[a], nt_index[b], nt_index[c]
                    acc = cur[:, :, ai]
                    for k in range(1, span):
                        left = table[k][: length - span + 1, :, bi]
                        right = table[span - k][k: k + length - span + 1, :, ci]
                        acc |= left & right
                    cur[:, :, ai] = acc
                table[span] = cur
            ok = table[length][0, :, nt_index[g.entry]]
            results[np.array(batch)] = ok
    return results


# --- uniform stochastic derivation (baseline generator) ---

def random_derivation(g, max_len, rng, restarts=50):
    """Sample a token sequence by uniform expansion of CNF alternatives.

    Each pending nonterminal yields at least one token, which allows early
    abort once the emitted plus pending count exceeds max_len. The step
    budget per attempt is 10 * max_len; after `restarts` failed attempts a
    DerivationBudgetError is raised.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    choices = {}
    for a in g.nonterminals:
        opts = [("b", bc) for bc in g.binary_for(a)]
        opts += [("t", t) for t in g.terminals_for(a)]
        choices[a] = opts
    budget = 10 * max_len
    for _ in range(restarts):
        output = []
        pending = [g.entry]
        steps = 0
        while pending:
            steps += 1
            if steps > budget or len(output) + len(pending) > max_len:
                output = None
                break
            sym = pending.pop(0)
            opts = choices[sym]
            kind, payload = opts[int(rng.integers(len(opts)))]
            if kind == "t":
                output.append(payload)
            else:
                pending[:0] = payload
        if output is not None:
            return output
    raise DerivationBudgetError(
        f"no derivation of length <= {max_len} found in {restarts} attempts")


# --- language enumeration oracles ---

def enumerate_language(g, max_len):
    """All token name tuples of length <= max_len generated by an EBNF grammar.

    Independent of the BNF/CNF pipeline: repetition markers are desugared
    into right recursive epsilon rules and the languages are computed by
    Kleene fixpoint. The empty string is excluded from the result.
    """
    rules = {}
    counter = itertools.count(1)

    def desugar_alt(items):
        out = []
        for it in items:
            if isinstance(it, Lit):
                raise GrammarError("literals must be replaced before enumeration")
            if isinstance(it, Group):
                inner = [desugar_alt(a) for a in it.alts]
                name = f"~g{next(counter)}"
                if it.rep in ("star", "plus"):
                    once = f"~i{next(counter)}"
                    rules[once] = inner
                    rules[name] = [[], [("n", once), ("n", name)]]
                    if it.rep == "plus":
                        plus = f"~p{next(counter)}"
                        rules[plus] = [[("n", once), ("n", name)]]
                        name = plus
                elif it.rep == "opt":
                    rules[name] = [[]] + inner
                else:
                    rules[name] = inner
                out.append(("n", name))
            elif isinstance(it, Ref):
                out.append(("n", it.name))
            else:
                out.append(("t", it.name))
        return out

    for name in g.rules:
        rules[name] = [desugar_alt(a) for a in g.rules[name]]

    langs = {name: set() for name in rules}
    changed = True
    while changed:
        changed = False
        for name, alts in rules.items():
            acc = langs[name]
            before = len(acc)
            for alt in alts:
                partial = {()}
                for kind, sym in alt:
                    pieces = {(sym,)} if kind == "t" else langs[sym]
                    partial = {p + q for p in partial for q in pieces
                               if len(p) + len(q) <= max_len}
                    if not partial:
                        break
                acc |= partial
            if len(acc) != before:
                changed = True
    return {w for w in langs[g.entry] if w}


def enumerate_cnf_language(g, max_len):
    """All token name tuples of length <= max_len generated by a CNF grammar."""
    strings = {a: [set() for _ in range(max_len + 1)] for a in g.nonterminals}
    for a, t in g.terminal_rules:
        strings[a][1].add((g.vocab.name(t),))
    for length in range(2, max_len + 1):
        for a, b, c in g.binary_rules:
            acc = strings[a][length]
            for k in range(1, length):
                for left in strings[b][k]:
                    for right in strings[c][length - k]:
                        acc.add(left + right)
    out = set()
    for length in range(1, max_len + 1):
        out |= strings[g.entry][length]
    return out
