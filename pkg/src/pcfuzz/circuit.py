"""Grammar-aware probabilistic circuit: construction from a CNF grammar,
weight initialization, structural validation, evaluation kernels, and a
versioned text serialization.

The circuit is a DAG of leaf, product and sum nodes stored in flat arrays
in bottom-up topological order: all leaves first, then for each span
length the product nodes followed by the sum nodes, and the root (a sum
over the entry spans of every reachable length) last. A sum node (A, i, j)
carries the probability mass that symbol A spans positions [i, j); each of
its product children fixes one rule A -> B C and one split point k; leaves
are (token, position) indicators. Only the root mixes lengths, so every
per-length subcircuit is smooth and decomposable by construction.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    CircuitCapacityError,
    CircuitFormatError,
    CircuitVersionError,
    ConflictingEvidenceError,
    EvidenceError,
    UnknownTokenError,
    UnproductiveGrammarError,
)
from .grammar import CnfGrammar, Vocabulary

FORMAT_HEADER = "pcfuzz-circuit"
FORMAT_VERSION = 1

KIND_LEAF = 0
KIND_PROD = 1
KIND_SUM = 2

DEFAULT_CAPACITY = 50_000_000
WEIGHT_TOL = 1e-9


# --- evidence ---

@dataclass(frozen=True)
class Evidence:
    """Partial observation of a token sequence.

    `length` pins the exact sequence length, or None for unconstrained.
    `observed` maps position -> required token id; `excluded` maps
    position -> token ids that must not appear there. Sequences shorter
    than an observed position have probability zero; exclusions beyond the
    sequence length hold vacuously.
    """

    length: int | None = None
    observed: tuple = ()  # sorted ((pos, token_id), ...)
    excluded: tuple = ()  # sorted ((pos, frozenset(token_ids)), ...)

    @staticmethod
    def free():
        return Evidence()

    @staticmethod
    def of_sequence(token_ids):
        ids = tuple(int(t) for t in token_ids)
        return Evidence(length=len(ids),
                        observed=tuple(enumerate(ids)))

    def observe(self, pos, token_id):
        cur = dict(self.observed)
        if pos in cur and cur[pos] != token_id:
            raise ConflictingEvidenceError(
                f"position {pos} already observed as token {cur[pos]}")
        for p, s in self.excluded:
            if p == pos and token_id in s:
                raise ConflictingEvidenceError(
                    f"token {token_id} is excluded at position {pos}")
        cur[pos] = int(token_id)
        return replace(self, observed=tuple(sorted(cur.items())))

    def exclude(self, pos, token_ids):
        extra = frozenset(int(t) for t in token_ids)
        for p, t in self.observed:
            if p == pos and t in extra:
                raise ConflictingEvidenceError(
                    f"token {t} is observed at position {pos}")
        cur = dict(self.excluded)
        cur[pos] = cur.get(pos, frozenset()) | extra
        return replace(self, excluded=tuple(sorted(cur.items())))

    def with_length(self, length):
        return replace(self, length=length)

    def merge(self, other):
        """Conjunction of two evidences; direct conflicts raise."""
        if self.length is not None and other.length is not None \
                and self.length != other.length:
            raise ConflictingEvidenceError(
                f"conflicting lengths {self.length} and {other.length}")
        out = self if self.length is not None else \
            replace(self, length=other.length)
        for p, t in other.observed:
            out = out.observe(p, t)
        for p, s in other.excluded:
            out = out.exclude(p, s)
        return out

    def max_observed(self):
        return max((p for p, _ in self.observed), default=-1)


# --- circuit ---

@dataclass
class Circuit:
    n: int
    vocab: Vocabulary
    entry: str
    symbols: tuple          # nonterminal names; sums reference by index
    rules: tuple            # binary (A, B, C) name triples; products reference by index
    kind: np.ndarray        # int8 [N]
    node_sym: np.ndarray    # int32 [N]: symbol idx (sum), rule idx (prod), token id (leaf)
    node_i: np.ndarray      # int32 [N]
    node_k: np.ndarray      # int32 [N]; split for products, -1 otherwise
    node_j: np.ndarray      # int32 [N]
    prod_left: np.ndarray   # int32 [N]; -1 for non-products
    prod_right: np.ndarray
    edge_offsets: np.ndarray  # int64 [N+1]; empty range for non-sums
    edge_child: np.ndarray    # int32 [E]
    weights: np.ndarray       # float64 [E]
    root: int
    num_leaves: int
    levels: tuple           # ((span, prod_lo, prod_hi, sum_lo, sum_hi), ...)
    sum_label: dict = field(repr=False, default_factory=dict)
    _derived: dict = field(repr=False, default_factory=dict, compare=False)

    @property
    def num_nodes(self):
        return len(self.kind)

    @property
    def num_edges(self):
        return len(self.edge_child)

    def node_children(self, node):
        if self.kind[node] == KIND_PROD:
            return [int(self.prod_left[node]), int(self.prod_right[node])]
        lo, hi = self.edge_offsets[node], self.edge_offsets[node + 1]
        return [int(c) for c in self.edge_child[lo:hi]]

    def node_weights(self, node):
        lo, hi = self.edge_offsets[node], self.edge_offsets[node + 1]
        return self.weights[lo:hi]

    def describe_node(self, node):
        k = self.kind[node]
        if node == self.root:
            return "root"
        if k == KIND_LEAF:
            return f"leaf({self.vocab.name(int(self.node_sym[node]))},{self.node_i[node]})"
        if k == KIND_PROD:
            a, b, c = self.rules[self.node_sym[node]]
            return (f"prod({a}->{b} {c},{self.node_i[node]},"
                    f"{self.node_k[node]},{self.node_j[node]})")
        return (f"sum({self.symbols[self.node_sym[node]]},"
                f"{self.node_i[node]},{self.node_j[node]})")

    # derived index structures, rebuilt on construction and load
    def finalize(self):
        edge_parent = np.empty(self.num_edges, dtype=np.int32)
        for node in range(self.num_nodes):
            lo, hi = self.edge_offsets[node], self.edge_offsets[node + 1]
            if hi > lo:
                edge_parent[lo:hi] = node
        is_prod = self.kind == KIND_PROD
        prods = np.nonzero(is_prod)[0].astype(np.int32)
        link_child = np.concatenate([self.prod_left[prods], self.prod_right[prods]]) \
            if len(prods) else np.empty(0, dtype=np.int32)
        link_parent = np.concatenate([prods, prods]) if len(prods) \
            else np.empty(0, dtype=np.int32)
        order = np.argsort(link_child, kind="stable")
        link_child = link_child[order]
        link_parent = link_parent[order]
        link_offsets = np.searchsorted(link_child, np.arange(self.num_nodes + 1))
        self._derived = {
            "edge_parent": edge_parent,
            "in_prod_parent": link_parent,
            "in_prod_offsets": link_offsets,
        }
        return self

    def d(self, key):
        if not self._derived:
            self.finalize()
        return self._derived[key]


def compile_circuit(g: CnfGrammar, n, capacity=DEFAULT_CAPACITY):
    """Build the circuit for all token sequences of length 1..n.

    Sum nodes exist exactly for the (symbol, i, j) spans that both derive
    some string of length j - i and occur inside a complete entry
    derivation of length <= n, so the construction never creates nodes
    that pruning would remove. Product and sum node counts grow as
    O(|rules| * n^3); exceeding `capacity` raises before allocation.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    derivable = g.derivable_lengths(n)
    root_lengths = [j for j in range(1, n + 1) if derivable[g.entry][j]]
    if not root_lengths:
        raise UnproductiveGrammarError(
            f"entry {g.entry!r} derives no string of length <= {n}")

    # top-down reachable spans
    reachable = set()
    stack = [(g.entry, 0, j) for j in root_lengths]
    reachable.update(stack)
    splits = {}  # (sym, i, j) -> [(rule_idx, k), ...]
    rules = tuple(g.binary_rules)
    rules_by_lhs = {}
    for idx, (a, b, c) in enumerate(rules):
        rules_by_lhs.setdefault(a, []).append((idx, b, c))
    n_products = 0
    while stack:
        a, i, j = stack.pop()
        if j - i < 2:
            continue
        here = []
        for idx, b, c in rules_by_lhs.get(a, ()):
            db, dc = derivable[b], derivable[c]
            for k in range(i + 1, j):
                if db[k - i] and dc[j - k]:
                    here.append((idx, k))
                    for child in ((b, i, k), (c, k, j)):
                        if child not in reachable:
                            reachable.add(child)
                            stack.append(child)
        splits[(a, i, j)] = here
        n_products += len(here)

    leaf_set = set()
    term_by_lhs = {}
    for a, t in g.terminal_rules:
        term_by_lhs.setdefault(a, []).append(t)
    for a, i, j in reachable:
        if j - i == 1:
            for t in sorted(term_by_lhs.get(a, ())):
                leaf_set.add((t, i))

    n_sums = len(reachable)
    n_nodes = len(leaf_set) + n_products + n_sums + 1
    if n_nodes > capacity:
        raise CircuitCapacityError(
            f"circuit would need {n_nodes} nodes (> capacity {capacity}); "
            f"node count grows as O(|rules| * n^3), lower n or raise capacity")

    sym_index = {s: i for i, s in enumerate(g.nonterminals)}
    kind = np.empty(n_nodes, dtype=np.int8)
    node_sym = np.full(n_nodes, -1, dtype=np.int32)
    node_i = np.full(n_nodes, -1, dtype=np.int32)
    node_k = np.full(n_nodes, -1, dtype=np.int32)
    node_j = np.full(n_nodes, -1, dtype=np.int32)
    prod_left = np.full(n_nodes, -1, dtype=np.int32)
    prod_right = np.full(n_nodes, -1, dtype=np.int32)
    edge_offsets = np.zeros(n_nodes + 1, dtype=np.int64)
    edge_child = []
    sum_label = {}
    leaf_id = {}

    nid = 0
    for t, pos in sorted(leaf_set, key=lambda x: (x[1], x[0])):
        kind[nid] = KIND_LEAF
        node_sym[nid] = t
        node_i[nid] = pos
        node_j[nid] = pos + 1
        leaf_id[(t, pos)] = nid
        nid += 1
    num_leaves = nid

    spans_by_len = {}
    for a, i, j in reachable:
        spans_by_len.setdefault(j - i, []).append((a, i, j))

    levels = []
    for span in range(1, n + 1):
        spans = sorted(spans_by_len.get(span, ()),
                       key=lambda x: (sym_index[x[0]], x[1]))
        prod_lo = nid
        sum_children = []
        if span == 1:
            for a, i, j in spans:
                sum_children.append([leaf_id[(t, i)]
                                     for t in sorted(term_by_lhs.get(a, ()))])
        else:
            for a, i, j in spans:
                children = []
                for rule_idx, k in splits[(a, i, j)]:
                    _, b, c = rules[rule_idx]
                    kind[nid] = KIND_PROD
                    node_sym[nid] = rule_idx
                    node_i[nid] = i
                    node_k[nid] = k
                    node_j[nid] = j
                    prod_left[nid] = sum_label[(b, i, k)]
                    prod_right[nid] = sum_label[(c, k, j)]
                    children.append(nid)
                    nid += 1
                sum_children.append(children)
        prod_hi = nid
        sum_lo = nid
        for (a, i, j), children in zip(spans, sum_children):
            kind[nid] = KIND_SUM
            node_sym[nid] = sym_index[a]
            node_i[nid] = i
            node_j[nid] = j
            edge_offsets[nid + 1] = len(children)
            edge_child.extend(children)
            sum_label[(a, i, j)] = nid
            nid += 1
        sum_hi = nid
        levels.append((span, prod_lo, prod_hi, sum_lo, sum_hi))

    root = nid
    kind[root] = KIND_SUM
    node_sym[root] = -1
    node_i[root] = 0
    root_children = [sum_label[(g.entry, 0, j)] for j in root_lengths]
    edge_offsets[root + 1] = len(root_children)
    edge_child.extend(root_children)
    nid += 1
    assert nid == n_nodes

    np.cumsum(edge_offsets, out=edge_offsets)
    edge_child = np.array(edge_child, dtype=np.int32)
    weights = np.zeros(len(edge_child), dtype=np.float64)
    c = Circuit(n=n, vocab=g.vocab, entry=g.entry, symbols=tuple(g.nonterminals),
                rules=rules, kind=kind, node_sym=node_sym, node_i=node_i,
                node_k=node_k, node_j=node_j, prod_left=prod_left,
                prod_right=prod_right, edge_offsets=edge_offsets,
                edge_child=edge_child, weights=weights, root=root,
                num_leaves=num_leaves, levels=tuple(levels),
                sum_label=sum_label)
    c.finalize()
    return init_weights(c, "uniform")


# --- weight initialization ---

def _normalize_per_node(c, raw):
    weights = np.array(raw, dtype=np.float64)
    for node in range(c.num_nodes):
        lo, hi = c.edge_offsets[node], c.edge_offsets[node + 1]
        if hi > lo:
            total = weights[lo:hi].sum()
            if total <= 0:
                weights[lo:hi] = 1.0 / (hi - lo)
            else:
                weights[lo:hi] /= total
    return weights


def init_weights(c, mode, seed=None, pcfg=None):
    """Return a circuit with fresh sum edge weights.

    Modes: 'uniform' (equal per child), 'random' (Dirichlet-style from
    `seed`), and 'tied' which reproduces the distribution of the given
    pCFG truncated to length <= n: each edge gets the pCFG's posterior
    probability of that rule and split given the parent span, and the
    root edges get the pCFG mass of each length renormalized over 1..n.
    """
    if mode == "uniform":
        weights = _normalize_per_node(c, np.ones(c.num_edges))
    elif mode == "random":
        rng = np.random.default_rng(seed)
        weights = _normalize_per_node(c, rng.gamma(1.0, size=c.num_edges))
    elif mode == "tied":
        if pcfg is None:
            raise ValueError("tied mode requires a pcfg")
        weights = _tied_weights(c, pcfg)
    else:
        raise ValueError(f"unknown weight mode {mode!r}")
    out = replace(c, weights=weights, sum_label=c.sum_label)
    out._derived = c._derived
    return out


def _tied_weights(c, pcfg):
    # inside mass per (symbol, span length), position independent
    mass = {s: np.zeros(c.n + 1) for s in c.symbols}
    term_p = {}
    for (a, t), p in pcfg.terminal_probs.items():
        mass[a][1] += p
        term_p[(a, t)] = p
    bin_p = dict(pcfg.binary_probs)
    for length in range(2, c.n + 1):
        for (a, b, c2), p in bin_p.items():
            mb, mc = mass[b], mass[c2]
            mass[a][length] += p * sum(mb[k] * mc[length - k]
                                       for k in range(1, length))
    weights = np.zeros(c.num_edges)
    for node in range(c.num_nodes):
        lo, hi = c.edge_offsets[node], c.edge_offsets[node + 1]
        if hi <= lo:
            continue
        if node == c.root:
            for e in range(lo, hi):
                child = c.edge_child[e]
                weights[e] = mass[c.entry][c.node_j[child]]
        else:
            a = c.symbols[c.node_sym[node]]
            i, j = c.node_i[node], c.node_j[node]
            denom = mass[a][j - i]
            if denom <= 0:
                weights[lo:hi] = 1.0 / (hi - lo)
                continue
            for e in range(lo, hi):
                child = c.edge_child[e]
                if c.kind[child] == KIND_LEAF:
                    weights[e] = term_p.get((a, int(c.node_sym[child])), 0.0) / denom
                else:
                    rule = c.rules[c.node_sym[child]]
                    k = c.node_k[child]
                    weights[e] = (bin_p.get(rule, 0.0)
                                  * mass[rule[1]][k - i]
                                  * mass[rule[2]][j - k]) / denom
    total = weights[c.edge_offsets[c.root]:c.edge_offsets[c.root + 1]].sum()
    if total <= 0:
        raise UnproductiveGrammarError("pCFG assigns zero mass to lengths <= n")
    weights[c.edge_offsets[c.root]:c.edge_offsets[c.root + 1]] /= total
    return weights


# --- evaluation kernels ---

def leaf_values(c, e: Evidence, dtype=np.float64):
    vals = np.ones(c.num_leaves, dtype=dtype)
    leaf_tok = c.node_sym[:c.num_leaves]
    leaf_pos = c.node_i[:c.num_leaves]
    for pos, tok in e.observed:
        if pos >= c.n:
            raise EvidenceError(f"observed position {pos} outside circuit (n={c.n})")
        vals[(leaf_pos == pos) & (leaf_tok != tok)] = 0.0
    for pos, toks in e.excluded:
        if pos >= c.n:
            continue  # vacuous beyond capacity
        vals[(leaf_pos == pos) & np.isin(leaf_tok, list(toks))] = 0.0
    return vals


def length_mask(c, e: Evidence):
    mask = np.ones(c.n + 1, dtype=np.float64)
    mask[0] = 0.0
    if e.length is not None:
        if not 1 <= e.length <= c.n:
            raise EvidenceError(f"length {e.length} outside 1..{c.n}")
        for pos, _ in e.observed:
            if pos >= e.length:
                raise EvidenceError(
                    f"observed position {pos} >= fixed length {e.length}")
        for pos, _ in e.excluded:
            if pos >= e.length:
                raise EvidenceError(
                    f"excluded position {pos} >= fixed length {e.length}")
        mask[:] = 0.0
        mask[e.length] = 1.0
    else:
        hi = e.max_observed()
        if hi >= 0:
            mask[: hi + 1] = 0.0
    return mask


def forward(c, leaf_vals, len_mask, counter=None):
    """Bottom-up evaluation. leaf_vals is [B, num_leaves] (or 1-D for a
    single evidence), len_mask is [B, n+1]; returns values [B, N]."""
    single = leaf_vals.ndim == 1
    if single:
        leaf_vals = leaf_vals[None, :]
        len_mask = len_mask[None, :]
    batch = leaf_vals.shape[0]
    values = np.zeros((batch, c.num_nodes), dtype=np.float64)
    values[:, :c.num_leaves] = leaf_vals
    off = c.edge_offsets
    for _, plo, phi, slo, shi in c.levels:
        if phi > plo:
            values[:, plo:phi] = values[:, c.prod_left[plo:phi]] \
                * values[:, c.prod_right[plo:phi]]
        if shi > slo:
            e0, e1 = off[slo], off[shi]
            contrib = c.weights[e0:e1] * values[:, c.edge_child[e0:e1]]
            values[:, slo:shi] = np.add.reduceat(
                contrib, (off[slo:shi] - e0).astype(np.intp), axis=1)
    e0, e1 = off[c.root], off[c.root + 1]
    ch = c.edge_child[e0:e1]
    contrib = c.weights[e0:e1] * values[:, ch] * len_mask[:, c.node_j[ch]]
    values[:, c.root] = contrib.sum(axis=1)
    if counter is not None:
        counter["edge_visits"] = counter.get("edge_visits", 0) + c.num_edges
        counter["node_visits"] = counter.get("node_visits", 0) + c.num_nodes
    return values[0] if single else values


def forward_log(c, leaf_vals, len_mask):
    """Log-domain bottom-up evaluation for one evidence vector; returns
    log values [N] with -inf for zero mass."""
    with np.errstate(divide="ignore"):
        logw = np.log(c.weights)
        logmask = np.log(len_mask)
        values = np.full(c.num_nodes, -np.inf)
        values[:c.num_leaves] = np.log(leaf_vals)
    off = c.edge_offsets
    for _, plo, phi, slo, shi in c.levels:
        if phi > plo:
            values[plo:phi] = values[c.prod_left[plo:phi]] \
                + values[c.prod_right[plo:phi]]
        if shi > slo:
            e0, e1 = off[slo], off[shi]
            contrib = logw[e0:e1] + values[c.edge_child[e0:e1]]
            segs = (off[slo:shi] - e0).astype(np.intp)
            values[slo:shi] = _segment_logsumexp(contrib, segs)
    e0, e1 = off[c.root], off[c.root + 1]
    ch = c.edge_child[e0:e1]
    contrib = logw[e0:e1] + values[ch] + logmask[c.node_j[ch]]
    values[c.root] = _logsumexp(contrib)
    return values


def _logsumexp(a):
    hi = np.max(a, initial=-np.inf)
    if hi == -np.inf:
        return -np.inf
    return hi + np.log(np.exp(a - hi).sum())


def _segment_logsumexp(contrib, seg_starts):
    if len(contrib) == 0:
        return np.empty(0)
    his = np.maximum.reduceat(contrib, seg_starts)
    his_safe = np.where(np.isfinite(his), his, 0.0)
    shifted = np.exp(contrib - np.repeat(
        his_safe, np.diff(np.append(seg_starts, len(contrib)))))
    sums = np.add.reduceat(shifted, seg_starts)
    with np.errstate(divide="ignore"):
        out = his_safe + np.log(sums)
    return np.where(np.isfinite(his), out, -np.inf)


def flows(c, values, len_mask):
    """Top-down expected edge flow pass, batched.

    `values` is the [B, N] array from forward() for the same evidences.
    Returns (edge_flow [E] summed over the batch, root_ok [B] bool).
    Items with zero root value contribute nothing.
    """
    batch = values.shape[0]
    off = c.edge_offsets
    flow = np.zeros((batch, c.num_nodes))
    rv = values[:, c.root]
    ok = rv > 0
    flow[ok, c.root] = 1.0
    edge_flow = np.zeros(c.num_edges)
    inv_rv = np.zeros(batch)
    inv_rv[ok] = 1.0 / rv[ok]

    e0, e1 = off[c.root], off[c.root + 1]
    ch = c.edge_child[e0:e1]
    ef = (c.weights[e0:e1] * values[:, ch] * len_mask[:, c.node_j[ch]]
          * inv_rv[:, None])
    flow[:, ch] += ef  # root children are distinct sums
    edge_flow[e0:e1] += ef.sum(axis=0)

    in_parent = c.d("in_prod_parent")
    in_off = c.d("in_prod_offsets")
    for _, plo, phi, slo, shi in reversed(c.levels):
        if shi > slo:
            # finish sum flows with product parent contributions
            l0, l1 = in_off[slo], in_off[shi]
            if l1 > l0:
                contrib = flow[:, in_parent[l0:l1]]
                segs = (in_off[slo:shi] - l0).astype(np.intp)
                add = np.add.reduceat(contrib, segs, axis=1)
                # reduceat yields garbage for empty segments; zero them out
                empty = np.diff(in_off[slo:shi + 1]) == 0
                if empty.any():
                    add[:, empty] = 0.0
                flow[:, slo:shi] += add
            # edge flows out of this level's sums
            e0, e1 = off[slo], off[shi]
            parents = c.d("edge_parent")[e0:e1]
            pv = values[:, parents]
            with np.errstate(divide="ignore", invalid="ignore"):
                ef = np.where(pv > 0,
                              flow[:, parents] * c.weights[e0:e1]
                              * values[:, c.edge_child[e0:e1]] / pv,
                              0.0)
            edge_flow[e0:e1] += ef.sum(axis=0)
            if phi > plo:
                # each product has exactly one parent sum; its flow is the
                # flow of its unique incoming edge
                child = c.edge_child[e0:e1]
                is_prod_child = c.kind[child] == KIND_PROD
                flow[:, child[is_prod_child]] = ef[:, is_prod_child]
    return edge_flow, ok


# --- validation ---

def validate(c):
    """Structural check; returns a list of violation descriptions."""
    issues = []
    off = c.edge_offsets
    for node in range(c.num_nodes):
        lo, hi = off[node], off[node + 1]
        k = c.kind[node]
        if k == KIND_SUM:
            if hi <= lo:
                issues.append(f"{c.describe_node(node)}: sum node has no children")
                continue
            w = c.weights[lo:hi]
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                issues.append(f"{c.describe_node(node)}: non-finite or negative weight")
            elif abs(w.sum() - 1.0) > WEIGHT_TOL:
                issues.append(
                    f"{c.describe_node(node)}: weights sum to {w.sum():.12g}")
            children = c.edge_child[lo:hi]
            if np.any(children >= node):
                issues.append(f"{c.describe_node(node)}: child id >= node id "
                              "(topological order violated)")
            if node != c.root:
                i, j = c.node_i[node], c.node_j[node]
                for ch in children:
                    if c.node_i[ch] != i or c.node_j[ch] != j:
                        issues.append(
                            f"{c.describe_node(node)}: child {c.describe_node(int(ch))} "
                            f"spans a different interval (smoothness violated)")
            else:
                for ch in children:
                    if c.kind[ch] != KIND_SUM or c.node_i[ch] != 0 \
                            or c.symbols[c.node_sym[ch]] != c.entry:
                        issues.append(
                            f"root child {c.describe_node(int(ch))} is not an "
                            f"entry span starting at 0")
        elif k == KIND_PROD:
            left, right = c.prod_left[node], c.prod_right[node]
            if left < 0 or right < 0:
                issues.append(f"{c.describe_node(node)}: missing product child")
                continue
            if left >= node or right >= node:
                issues.append(f"{c.describe_node(node)}: child id >= node id "
                              "(topological order violated)")
                continue
            i, k_, j = c.node_i[node], c.node_k[node], c.node_j[node]
            if not (c.node_i[left] == i and c.node_j[left] == k_
                    and c.node_i[right] == k_ and c.node_j[right] == j):
                issues.append(
                    f"{c.describe_node(node)}: children do not partition "
                    f"[{i},{k_}) + [{k_},{j}) (decomposability violated)")
        else:
            pos = c.node_i[node]
            if not 0 <= pos < c.n:
                issues.append(f"leaf {node}: position {pos} outside [0, {c.n})")

    seen = np.zeros(c.num_nodes, dtype=bool)
    stack = [c.root]
    seen[c.root] = True
    while stack:
        node = stack.pop()
        for ch in c.node_children(node):
            if not seen[ch]:
                seen[ch] = True
                stack.append(ch)
    unreachable = np.nonzero(~seen)[0]
    for node in unreachable[:20]:
        issues.append(f"{c.describe_node(int(node))}: unreachable from root")
    if len(unreachable) > 20:
        issues.append(f"... {len(unreachable) - 20} more unreachable nodes")
    return issues


# --- serialization ---

def save(c, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{FORMAT_HEADER} {FORMAT_VERSION}\n")
        fh.write(f"n {c.n}\n")
        fh.write(f"entry {c.entry}\n")
        fh.write(f"endmarker {c.vocab.end_marker}\n")
        fh.write("vocab " + " ".join(c.vocab.names) + "\n")
        fh.write("symbols " + " ".join(c.symbols) + "\n")
        fh.write(f"rules {len(c.rules)}\n")
        for a, b, c2 in c.rules:
            fh.write(f"rule {a} {b} {c2}\n")
        fh.write(f"nodes {c.num_nodes} edges {c.num_edges} root {c.root} "
                 f"leaves {c.num_leaves}\n")
        for node in range(c.num_nodes):
            k = c.kind[node]
            if k == KIND_LEAF:
                fh.write(f"{node} leaf {c.node_sym[node]} {c.node_i[node]}\n")
            elif k == KIND_PROD:
                fh.write(f"{node} prod {c.node_sym[node]} {c.node_i[node]} "
                         f"{c.node_k[node]} {c.node_j[node]} "
                         f"{c.prod_left[node]} {c.prod_right[node]}\n")
            else:
                lo, hi = c.edge_offsets[node], c.edge_offsets[node + 1]
                payload = " ".join(
                    f"{c.edge_child[e]}:{c.weights[e]:.17g}" for e in range(lo, hi))
                sym = c.node_sym[node]
                fh.write(f"{node} sum {sym} {c.node_i[node]} {c.node_j[node]} "
                         f"{payload}\n")
        fh.write("labels\n")
        for (a, i, j), node in sorted(c.sum_label.items(),
                                      key=lambda kv: kv[1]):
            fh.write(f"label {a} {i} {j} {node}\n")
        fh.write("end\n")


def load(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    def fail(msg, lineno):
        raise CircuitFormatError(msg, lineno + 1)

    if not lines:
        raise CircuitFormatError("empty circuit file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != FORMAT_HEADER:
        fail("not a circuit file (bad header)", 0)
    if head[1] != str(FORMAT_VERSION):
        raise CircuitVersionError(
            f"incompatible circuit format version {head[1]} "
            f"(this build reads version {FORMAT_VERSION})")

    idx = 1
    fields = {}
    try:
        for key in ("n", "entry", "endmarker"):
            name, value = lines[idx].split(maxsplit=1)
            if name != key:
                fail(f"expected {key!r} line", idx)
            fields[key] = value
            idx += 1
        vparts = lines[idx].split()
        if vparts[0] != "vocab" or len(vparts) < 2:
            fail("expected vocab line", idx)
        vocab = Vocabulary(vparts[1:], end_marker=fields["endmarker"])
        idx += 1
        sparts = lines[idx].split()
        if sparts[0] != "symbols":
            fail("expected symbols line", idx)
        symbols = tuple(sparts[1:])
        idx += 1
        nrules = int(lines[idx].split()[1])
        idx += 1
        rules = []
        for _ in range(nrules):
            parts = lines[idx].split()
            if parts[0] != "rule" or len(parts) != 4:
                fail("malformed rule line", idx)
            rules.append((parts[1], parts[2], parts[3]))
            idx += 1
        counts = lines[idx].split()
        if counts[0] != "nodes":
            fail("expected node count line", idx)
        n_nodes = int(counts[1])
        n_edges = int(counts[3])
        root = int(counts[5])
        num_leaves = int(counts[7])
        idx += 1
    except (IndexError, ValueError) as exc:
        raise CircuitFormatError(f"malformed header: {exc}", idx + 1) from None

    n = int(fields["n"])
    kind = np.empty(n_nodes, dtype=np.int8)
    node_sym = np.full(n_nodes, -1, dtype=np.int32)
    node_i = np.full(n_nodes, -1, dtype=np.int32)
    node_k = np.full(n_nodes, -1, dtype=np.int32)
    node_j = np.full(n_nodes, -1, dtype=np.int32)
    prod_left = np.full(n_nodes, -1, dtype=np.int32)
    prod_right = np.full(n_nodes, -1, dtype=np.int32)
    edge_offsets = np.zeros(n_nodes + 1, dtype=np.int64)
    edge_child = np.empty(n_edges, dtype=np.int32)
    weights = np.empty(n_edges, dtype=np.float64)
    edge_at = 0
    for node in range(n_nodes):
        lineno = idx + node
        if lineno >= len(lines):
            raise CircuitFormatError(
                f"truncated file: expected {n_nodes} node lines", lineno)
        parts = lines[lineno].split()
        try:
            if int(parts[0]) != node:
                fail(f"node line out of order (expected {node})", lineno)
            tag = parts[1]
            if tag == "leaf":
                kind[node] = KIND_LEAF
                node_sym[node] = int(parts[2])
                node_i[node] = int(parts[3])
                node_j[node] = node_i[node] + 1
            elif tag == "prod":
                kind[node] = KIND_PROD
                node_sym[node] = int(parts[2])
                node_i[node] = int(parts[3])
                node_k[node] = int(parts[4])
                node_j[node] = int(parts[5])
                prod_left[node] = int(parts[6])
                prod_right[node] = int(parts[7])
            elif tag == "sum":
                kind[node] = KIND_SUM
                node_sym[node] = int(parts[2])
                node_i[node] = int(parts[3])
                node_j[node] = int(parts[4])
                for spec in parts[5:]:
                    child, w = spec.split(":")
                    edge_child[edge_at] = int(child)
                    weights[edge_at] = float(w)
                    edge_at += 1
                edge_offsets[node + 1] = edge_at
                continue
            else:
                fail(f"unknown node kind {tag!r}", lineno)
            edge_offsets[node + 1] = edge_at
        except (IndexError, ValueError) as exc:
            raise CircuitFormatError(f"malformed node line: {exc}",
                                     lineno + 1) from None
    idx += n_nodes
    if edge_at != n_edges:
        raise CircuitFormatError(
            f"edge count mismatch: header says {n_edges}, found {edge_at}")
    if idx >= len(lines) or lines[idx] != "labels":
        raise CircuitFormatError("missing labels section", idx + 1)
    idx += 1
    sum_label = {}
    while idx < len(lines) and lines[idx] != "end":
        parts = lines[idx].split()
        if parts[0] != "label" or len(parts) != 5:
            fail("malformed label line", idx)
        sum_label[(parts[1], int(parts[2]), int(parts[3]))] = int(parts[4])
        idx += 1
    if idx >= len(lines):
        raise CircuitFormatError("truncated file: missing end marker")

    levels = _rebuild_levels(kind, node_i, node_j, n, root, num_leaves)
    c = Circuit(n=n, vocab=vocab, entry=fields["entry"], symbols=symbols,
                rules=tuple(rules), kind=kind, node_sym=node_sym,
                node_i=node_i, node_k=node_k, node_j=node_j,
                prod_left=prod_left, prod_right=prod_right,
                edge_offsets=edge_offsets, edge_child=edge_child,
                weights=weights, root=root, num_leaves=num_leaves,
                levels=levels, sum_label=sum_label)
    return c.finalize()


def _rebuild_levels(kind, node_i, node_j, n, root, num_leaves):
    levels = []
    at = num_leaves
    for span in range(1, n + 1):
        plo = at
        while at < root and kind[at] == KIND_PROD \
                and node_j[at] - node_i[at] == span:
            at += 1
        phi = at
        slo = at
        while at < root and kind[at] == KIND_SUM \
                and node_j[at] - node_i[at] == span:
            at += 1
        levels.append((span, plo, phi, slo, at))
    if at != root:
        raise CircuitFormatError(
            "node ordering is not leaves/products/sums by span length")
    return tuple(levels)


def structurally_equal(a, b):
    """Deep equality including weights; used by round-trip tests."""
    return (a.n == b.n and a.entry == b.entry and a.symbols == b.symbols
            and a.rules == b.rules and a.vocab == b.vocab
            and a.root == b.root and a.num_leaves == b.num_leaves
            and np.array_equal(a.kind, b.kind)
            and np.array_equal(a.node_sym, b.node_sym)
            and np.array_equal(a.node_i, b.node_i)
            and np.array_equal(a.node_k, b.node_k)
            and np.array_equal(a.node_j, b.node_j)
            and np.array_equal(a.prod_left, b.prod_left)
            and np.array_equal(a.prod_right, b.prod_right)
            and np.array_equal(a.edge_offsets, b.edge_offsets)
            and np.array_equal(a.edge_child, b.edge_child)
            and np.array_equal(a.weights, b.weights)
            and a.sum_label == b.sum_label)
