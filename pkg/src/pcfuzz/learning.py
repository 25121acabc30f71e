"""Weight learning and baselines: expected-flow EM for the circuit,
inside-outside EM for a pCFG over the same CNF grammar, Baum-Welch for a
token-level HMM with explicit termination, and held-out perplexity.

All three learners run full-batch EM with Laplace smoothing, which keeps
per-epoch corpus log-likelihood non-decreasing in practice; the reported
trace records the likelihood under the weights in effect at the start of
each epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .circuit import Evidence, flows, forward, leaf_values, length_mask
from .errors import (
    DegenerateModelError,
    SpecFormatError,
    UnparseableItemError,
    ZeroLikelihoodError,
    ZeroProbabilityError,
)
from .grammar import CnfGrammar, Vocabulary

DEFAULT_SMOOTHING = 1e-4


@dataclass
class TrainReport:
    loglik: list
    perplexity: float
    epochs: int
    smoothing: float

    def to_tsv(self):
        lines = ["epoch\tloglik"]
        lines += [f"{i}\t{ll:.17g}" for i, ll in enumerate(self.loglik)]
        lines.append(f"perplexity\t{self.perplexity:.17g}")
        return "\n".join(lines) + "\n"


def _encode_corpus(vocab, corpus, n, what="item"):
    items = []
    for idx, w in enumerate(corpus):
        ids = [vocab.id(t) if isinstance(t, str) else int(t) for t in w]
        if not 1 <= len(ids) <= n:
            raise ValueError(
                f"{what} {idx} has length {len(ids)}, outside 1..{n}")
        items.append(ids)
    return items


# --- circuit EM ---

def _batch_leaf_inputs(c, batch_items):
    batch = len(batch_items)
    obs = np.full((batch, c.n), -2, dtype=np.int32)
    lm = np.zeros((batch, c.n + 1))
    for row, ids in enumerate(batch_items):
        obs[row, : len(ids)] = ids
        lm[row, len(ids)] = 1.0
    leaf_pos = c.node_i[:c.num_leaves]
    leaf_tok = c.node_sym[:c.num_leaves]
    lv = (obs[:, leaf_pos] == leaf_tok[None, :]).astype(np.float64)
    return lv, lm


def _chunks(seq, size):
    for start in range(0, len(seq), size):
        yield start, seq[start:start + size]


def train_pc_em(c, corpus, epochs, smoothing=DEFAULT_SMOOTHING):
    """Expected-flow EM on the circuit's sum edge weights.

    Each epoch runs one upward evaluation and one downward flow pass per
    item (batched), then renormalizes every sum node's weights to
    (flow + smoothing) / (total flow + smoothing * fanout).
    Returns the trained circuit and a TrainReport.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    items = _encode_corpus(c.vocab, corpus, c.n)
    chunk = max(1, int(4_000_000 // max(1, c.num_nodes)))
    weights = c.weights.copy()
    work = replace(c, weights=weights)
    work._derived = c._derived
    loglik_trace = []
    for epoch in range(epochs):
        edge_flow = np.zeros(c.num_edges)
        total_ll = 0.0
        for start, batch in _chunks(items, chunk):
            lv, lm = _batch_leaf_inputs(work, batch)
            values = forward(work, lv, lm)
            rv = values[:, work.root]
            if epoch == 0:
                bad = np.nonzero(rv <= 0)[0]
                if len(bad):
                    idx = start + int(bad[0])
                    name = " ".join(c.vocab.decode(items[idx]))
                    raise ZeroLikelihoodError(
                        f"item {idx} has zero probability under the circuit "
                        f"support: {name!r}")
            total_ll += float(np.log(rv).sum())
            ef, _ = flows(work, values, lm)
            edge_flow += ef
        loglik_trace.append(total_ll)
        weights = _mstep_weights(work, edge_flow, smoothing)
        work = replace(work, weights=weights)
        work._derived = c._derived
    perp = perplexity(lambda w: pc_loglik(work, w),
                      corpus, smooth_eval=0.0)
    return work, TrainReport(loglik=loglik_trace, perplexity=perp,
                             epochs=epochs, smoothing=smoothing)


def _mstep_weights(c, edge_flow, smoothing):
    new_w = edge_flow + smoothing
    off = c.edge_offsets
    sums = np.nonzero(np.diff(off) > 0)[0]
    starts = off[sums].astype(np.intp)
    totals = np.add.reduceat(new_w, starts)
    denom = np.empty(c.num_edges)
    for node, total in zip(sums, totals):
        denom[off[node]:off[node + 1]] = total
    return new_w / denom


def pc_loglik(c, w):
    ids = [c.vocab.id(t) if isinstance(t, str) else int(t) for t in w]
    e = Evidence.of_sequence(ids)
    value = forward(c, leaf_values(c, e), length_mask(c, e))[c.root]
    return math.log(value) if value > 0 else -math.inf


# --- pCFG (inside-outside) ---

@dataclass
class Pcfg:
    base: CnfGrammar
    binary_probs: dict   # (A, B, C) -> prob
    terminal_probs: dict  # (A, token_id) -> prob

    def rules_for(self, name):
        out = [(("b",) + r, self.binary_probs[r])
               for r in self.base.binary_rules if r[0] == name]
        out += [(("t", a, t), self.terminal_probs[(a, t)])
                for a, t in self.base.terminal_rules if a == name]
        return out


def uniform_pcfg(g: CnfGrammar):
    counts = {}
    for a, _, _ in g.binary_rules:
        counts[a] = counts.get(a, 0) + 1
    for a, _ in g.terminal_rules:
        counts[a] = counts.get(a, 0) + 1
    return Pcfg(base=g,
                binary_probs={r: 1.0 / counts[r[0]] for r in g.binary_rules},
                terminal_probs={r: 1.0 / counts[r[0]] for r in g.terminal_rules})


def make_pcfg(g: CnfGrammar, binary_probs, terminal_probs, tol=1e-9):
    p = Pcfg(base=g, binary_probs=dict(binary_probs),
             terminal_probs=dict(terminal_probs))
    totals = {}
    for (a, _, _), q in p.binary_probs.items():
        totals[a] = totals.get(a, 0.0) + q
    for (a, _), q in p.terminal_probs.items():
        totals[a] = totals.get(a, 0.0) + q
    for a, total in totals.items():
        if abs(total - 1.0) > tol:
            raise ValueError(f"rule probabilities for {a!r} sum to {total}")
    return p


class _PcfgTensors:
    """Index arrays shared by the batched inside / outside passes."""

    def __init__(self, g: CnfGrammar):
        self.g = g
        self.nt_index = {s: i for i, s in enumerate(g.nonterminals)}
        self.nnt = len(g.nonterminals)
        self.vsize = len(g.vocab)
        self.ruleA = np.array([self.nt_index[a] for a, _, _ in g.binary_rules],
                              dtype=np.int32)
        self.ruleB = np.array([self.nt_index[b] for _, b, _ in g.binary_rules],
                              dtype=np.int32)
        self.ruleC = np.array([self.nt_index[c] for _, _, c in g.binary_rules],
                              dtype=np.int32)
        self.term_rows = np.array([self.nt_index[a] for a, _ in g.terminal_rules],
                                  dtype=np.int32)
        self.term_toks = np.array([t for _, t in g.terminal_rules],
                                  dtype=np.int32)

    def term_matrix(self, pcfg):
        m = np.zeros((self.nnt, self.vsize + 1))  # last column: padding
        for (a, t), p in pcfg.terminal_probs.items():
            m[self.nt_index[a], t] = p
        return m

    def bin_vector(self, pcfg):
        return np.array([pcfg.binary_probs[r] for r in self.g.binary_rules])


def _inside_pass(tensors, term_m, bin_p, obs):
    """obs: padded [B, L] int matrix (pad id = vsize). Returns list ins
    where ins[l][b, A, i] covers span (i, i+l)."""
    batch, maxlen = obs.shape
    ins = [None] * (maxlen + 1)
    ins[1] = np.ascontiguousarray(term_m[:, obs].transpose(1, 0, 2))
    for span in range(2, maxlen + 1):
        cur = np.zeros((batch, tensors.nnt, maxlen - span + 1))
        for r in range(len(bin_p)):
            a, b, c = tensors.ruleA[r], tensors.ruleB[r], tensors.ruleC[r]
            p = bin_p[r]
            if p == 0.0:
                continue
            acc = cur[:, a, :]
            for m in range(1, span):
                acc += p * ins[m][:, b, : maxlen - span + 1] \
                    * ins[span - m][:, c, m: m + maxlen - span + 1]
        ins[span] = cur
    return ins


def pcfg_loglik(p: Pcfg, w):
    """Log of the summed derivation probability; -inf when unparseable."""
    g = p.base
    ids = [g.vocab.id(t) if isinstance(t, str) else int(t) for t in w]
    if not ids:
        raise ValueError("sequences must have length >= 1")
    tensors = _PcfgTensors(g)
    obs = np.array([ids], dtype=np.int32)
    ins = _inside_pass(tensors, tensors.term_matrix(p), tensors.bin_vector(p), obs)
    z = ins[len(ids)][0, tensors.nt_index[g.entry], 0]
    return math.log(z) if z > 0 else -math.inf


def train_pcfg(g: CnfGrammar, corpus, epochs, smoothing=DEFAULT_SMOOTHING):
    """Inside-outside EM for rule probabilities, starting from uniform."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    items = _encode_corpus(g.vocab, corpus, max(len(w) for w in corpus))
    tensors = _PcfgTensors(g)
    entry_idx = tensors.nt_index[g.entry]
    pcfg = uniform_pcfg(g)
    maxlen = max(len(w) for w in items)
    pad = tensors.vsize
    chunk = max(1, int(4_000_000 // max(1, tensors.nnt * maxlen * maxlen // 2)))
    trace = []
    for epoch in range(epochs):
        term_m = tensors.term_matrix(pcfg)
        bin_p = tensors.bin_vector(pcfg)
        cnt_bin = np.zeros(len(bin_p))
        cnt_term = np.zeros((tensors.nnt, tensors.vsize))
        total_ll = 0.0
        for start, batch in _chunks(items, chunk):
            obs = np.full((len(batch), maxlen), pad, dtype=np.int32)
            for row, ids in enumerate(batch):
                obs[row, : len(ids)] = ids
            ins = _inside_pass(tensors, term_m, bin_p, obs)
            z = np.zeros(len(batch))
            for row, ids in enumerate(batch):
                z[row] = ins[len(ids)][row, entry_idx, 0]
            bad = np.nonzero(z <= 0)[0]
            if len(bad):
                idx = start + int(bad[0])
                name = " ".join(g.vocab.decode(items[idx]))
                raise UnparseableItemError(
                    f"item {idx} is not generated by the grammar: {name!r}")
            total_ll += float(np.log(z).sum())
            inv_z = 1.0 / z
            out = [np.zeros_like(ins[l]) if l else None
                   for l in range(maxlen + 1)]
            for row, ids in enumerate(batch):
                out[len(ids)][row, entry_idx, 0] = 1.0
            for span in range(maxlen, 1, -1):
                width = maxlen - span + 1
                for r in range(len(bin_p)):
                    p = bin_p[r]
                    if p == 0.0:
                        continue
                    a, b, c = tensors.ruleA[r], tensors.ruleB[r], tensors.ruleC[r]
                    base = p * out[span][:, a, :]
                    if not base.any():
                        continue
                    for m in range(1, span):
                        left = ins[m][:, b, :width]
                        right = ins[span - m][:, c, m: m + width]
                        out[m][:, b, :width] += base * right
                        out[span - m][:, c, m: m + width] += base * left
                        cnt_bin[r] += float(
                            (base * left * right * inv_z[:, None]).sum())
            post1 = out[1] * ins[1] * inv_z[:, None, None]  # [B, NT, L]
            for v in range(tensors.vsize):
                hits = obs == v
                if hits.any():
                    cnt_term[:, v] += np.einsum("bal,bl->a", post1,
                                                hits.astype(np.float64))
        trace.append(total_ll)
        pcfg = _pcfg_mstep(g, tensors, cnt_bin, cnt_term, smoothing)
    return pcfg, TrainReport(loglik=trace, perplexity=float("nan"),
                             epochs=epochs, smoothing=smoothing)


def _pcfg_mstep(g, tensors, cnt_bin, cnt_term, smoothing):
    totals = {}
    fanout = {}
    for r, rule in enumerate(g.binary_rules):
        totals[rule[0]] = totals.get(rule[0], 0.0) + cnt_bin[r] + smoothing
        fanout[rule[0]] = fanout.get(rule[0], 0) + 1
    for a, t in g.terminal_rules:
        totals[a] = totals.get(a, 0.0) \
            + cnt_term[tensors.nt_index[a], t] + smoothing
        fanout[a] = fanout.get(a, 0) + 1

    def share(lhs, count):
        # nonterminals with no posterior mass keep a uniform distribution
        return (count + smoothing) / totals[lhs] if totals[lhs] > 0 \
            else 1.0 / fanout[lhs]

    binary = {rule: share(rule[0], cnt_bin[r])
              for r, rule in enumerate(g.binary_rules)}
    terminal = {(a, t): share(a, cnt_term[tensors.nt_index[a], t])
                for a, t in g.terminal_rules}
    return Pcfg(base=g, binary_probs=binary, terminal_probs=terminal)


def save_pcfg(p: Pcfg, path):
    g = p.base
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("pcfuzz-pcfg 1\n")
        fh.write(f"entry {g.entry}\n")
        fh.write("vocab " + " ".join(g.vocab.names) + "\n")
        fh.write(f"endmarker {g.vocab.end_marker}\n")
        for (a, b, c), q in sorted(p.binary_probs.items()):
            fh.write(f"bin {a} {b} {c} {q:.17g}\n")
        for (a, t), q in sorted(p.terminal_probs.items()):
            fh.write(f"term {a} {t} {q:.17g}\n")


def load_pcfg(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("pcfuzz-pcfg"):
        raise SpecFormatError("not a pcfg file")
    entry = lines[1].split()[1]
    names = lines[2].split()[1:]
    end_marker = lines[3].split()[1]
    vocab = Vocabulary(names, end_marker=end_marker)
    binary, terminal = {}, {}
    for line in lines[4:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "bin":
            binary[(parts[1], parts[2], parts[3])] = float(parts[4])
        elif parts[0] == "term":
            terminal[(parts[1], int(parts[2]))] = float(parts[3])
        else:
            raise SpecFormatError(f"bad pcfg line: {line!r}")
    nts = []
    for a, b, c in binary:
        for s in (a, b, c):
            if s not in nts:
                nts.append(s)
    for a, _ in terminal:
        if a not in nts:
            nts.append(a)
    if entry in nts:
        nts.remove(entry)
    g = CnfGrammar(nonterminals=tuple([entry] + nts),
                   binary_rules=tuple(sorted(binary)),
                   terminal_rules=tuple(sorted(terminal)),
                   entry=entry, vocab=vocab)
    return Pcfg(base=g, binary_probs=binary, terminal_probs=terminal)


# --- HMM with explicit termination ---

@dataclass
class Hmm:
    initial: np.ndarray      # [K]
    transition: np.ndarray   # [K, K]; rows sum to 1 - termination[k]
    emission: np.ndarray     # [K, V]
    termination: np.ndarray  # [K]
    vocab: Vocabulary

    @property
    def states(self):
        return len(self.initial)


def train_hmm(k, corpus, epochs, smoothing=DEFAULT_SMOOTHING, seed=0,
              vocab=None, guard_factor=4):
    """Baum-Welch with termination folded into the transition rows."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if vocab is None:
        raise ValueError("train_hmm requires the vocabulary")
    items = _encode_corpus(vocab, corpus, max(len(w) for w in corpus))
    distinct = len({t for w in items for t in w})
    if k > guard_factor * max(1, distinct):
        raise DegenerateModelError(
            f"K={k} exceeds {guard_factor} * {distinct} distinct corpus tokens")
    rng = np.random.default_rng(seed)
    vsize = len(vocab)
    initial = rng.gamma(1.0, size=k)
    initial /= initial.sum()
    trans_full = rng.gamma(1.0, size=(k, k + 1))
    trans_full /= trans_full.sum(axis=1, keepdims=True)
    transition, termination = trans_full[:, :k].copy(), trans_full[:, k].copy()
    emission = rng.gamma(1.0, size=(k, vsize))
    emission /= emission.sum(axis=1, keepdims=True)
    h = Hmm(initial=initial, transition=transition, emission=emission,
            termination=termination, vocab=vocab)

    by_length = {}
    for ids in items:
        by_length.setdefault(len(ids), []).append(ids)
    groups = {L: np.array(rows, dtype=np.int32) for L, rows in by_length.items()}

    trace = []
    for _ in range(epochs):
        pi_cnt = np.zeros(k)
        trans_cnt = np.zeros((k, k))
        term_cnt = np.zeros(k)
        emis_cnt = np.zeros((k, vsize))
        total_ll = 0.0
        for L, obs in groups.items():
            total_ll += _bw_accumulate(h, obs, pi_cnt, trans_cnt, term_cnt,
                                       emis_cnt)
        trace.append(total_ll)
        initial = pi_cnt + smoothing
        initial /= initial.sum()
        row = np.concatenate([trans_cnt, term_cnt[:, None]], axis=1) + smoothing
        row /= row.sum(axis=1, keepdims=True)
        emission = emis_cnt + smoothing
        emission /= emission.sum(axis=1, keepdims=True)
        h = Hmm(initial=initial, transition=row[:, :k].copy(),
                emission=emission, termination=row[:, k].copy(), vocab=vocab)
    return h, TrainReport(loglik=trace, perplexity=float("nan"),
                          epochs=epochs, smoothing=smoothing)


def _bw_accumulate(h, obs, pi_cnt, trans_cnt, term_cnt, emis_cnt):
    batch, L = obs.shape
    k = h.states
    f = np.zeros((L, batch, k))
    scale = np.zeros((L, batch))
    f[0] = h.initial[None, :] * h.emission[:, obs[:, 0]].T
    scale[0] = f[0].sum(axis=1)
    f[0] /= scale[0][:, None]
    for t in range(1, L):
        f[t] = (f[t - 1] @ h.transition) * h.emission[:, obs[:, t]].T
        scale[t] = f[t].sum(axis=1)
        zero = scale[t] <= 0
        if zero.any():
            scale[t][zero] = 1.0  # dead items keep zero forward mass
        f[t] /= scale[t][:, None]
    final = f[L - 1] * h.termination[None, :]
    s = final.sum(axis=1)
    ok = s > 0
    with np.errstate(divide="ignore"):
        ll = float((np.log(scale[:, ok]).sum() + np.log(s[ok]).sum()))

    b = np.zeros((L, batch, k))
    b[L - 1] = h.termination[None, :]
    for t in range(L - 2, -1, -1):
        nxt = h.emission[:, obs[:, t + 1]].T * b[t + 1]
        b[t] = nxt @ h.transition.T
        b[t] /= scale[t + 1][:, None]

    gamma = f * b
    norm = gamma.sum(axis=2, keepdims=True)
    norm[norm <= 0] = 1.0
    gamma /= norm
    gamma[:, ~ok, :] = 0.0

    pi_cnt += gamma[0].sum(axis=0)
    term_cnt += gamma[L - 1].sum(axis=0)
    for t in range(L):
        np.add.at(emis_cnt.T, obs[:, t], gamma[t])
    for t in range(L - 1):
        xi = f[t][:, :, None] * h.transition[None, :, :] \
            * (h.emission[:, obs[:, t + 1]].T * b[t + 1])[:, None, :]
        denom = xi.sum(axis=(1, 2), keepdims=True)
        denom[denom <= 0] = 1.0
        xi /= denom
        xi[~ok] = 0.0
        trans_cnt += xi.sum(axis=0)
    return ll


def hmm_loglik(h: Hmm, w):
    ids = [h.vocab.id(t) if isinstance(t, str) else int(t) for t in w]
    if not ids:
        raise ValueError("sequences must have length >= 1")
    f = h.initial * h.emission[:, ids[0]]
    ll = 0.0
    for t in ids[1:]:
        s = f.sum()
        if s <= 0:
            return -math.inf
        ll += math.log(s)
        f = (f / s) @ h.transition * h.emission[:, t]
    final = float((f * h.termination).sum())
    return ll + math.log(final) if final > 0 else -math.inf


def hmm_sample(h: Hmm, max_len, rng):
    """Ancestral sampling, truncated at max_len tokens."""
    k = h.states
    z = int(rng.choice(k, p=h.initial))
    out = []
    while True:
        out.append(int(rng.choice(len(h.vocab), p=h.emission[z])))
        if len(out) >= max_len:
            return out
        if rng.random() < h.termination[z]:
            return out
        row = h.transition[z]
        z = int(rng.choice(k, p=row / row.sum()))


def save_hmm(h: Hmm, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("pcfuzz-hmm 1\n")
        fh.write(f"states {h.states}\n")
        fh.write("vocab " + " ".join(h.vocab.names) + "\n")
        fh.write(f"endmarker {h.vocab.end_marker}\n")
        for tag, arr in (("initial", h.initial), ("termination", h.termination)):
            fh.write(tag + " " + " ".join(f"{x:.17g}" for x in arr) + "\n")
        for row in h.transition:
            fh.write("trans " + " ".join(f"{x:.17g}" for x in row) + "\n")
        for row in h.emission:
            fh.write("emit " + " ".join(f"{x:.17g}" for x in row) + "\n")


def load_hmm(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("pcfuzz-hmm"):
        raise SpecFormatError("not an hmm file")
    k = int(lines[1].split()[1])
    vocab = Vocabulary(lines[2].split()[1:], end_marker=lines[3].split()[1])
    initial = np.array([float(x) for x in lines[4].split()[1:]])
    termination = np.array([float(x) for x in lines[5].split()[1:]])
    trans, emit = [], []
    for line in lines[6:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "trans":
            trans.append([float(x) for x in parts[1:]])
        elif parts[0] == "emit":
            emit.append([float(x) for x in parts[1:]])
    if len(trans) != k or len(emit) != k:
        raise SpecFormatError("hmm file row count mismatch")
    return Hmm(initial=initial, transition=np.array(trans),
               emission=np.array(emit), termination=termination, vocab=vocab)


# --- perplexity ---

def perplexity(loglik_fn, test, smooth_eval=0.0, support_size=None):
    """Per-token perplexity exp(-(1/T) * sum log P(item)) over a held-out set.

    Items with zero probability raise unless smooth_eval > 0, in which case
    each item probability is mixed with smooth_eval of uniform mass over a
    support of `support_size` strings.
    """
    items = list(test)
    if not items:
        raise ValueError("empty test set")
    if smooth_eval and not support_size:
        raise ValueError("smooth_eval requires support_size")
    total_tokens = sum(len(w) for w in items)
    total_ll = 0.0
    for idx, w in enumerate(items):
        ll = loglik_fn(w)
        if smooth_eval:
            p = math.exp(ll) if ll > -math.inf else 0.0
            ll = math.log((1.0 - smooth_eval) * p + smooth_eval / support_size)
        elif ll == -math.inf:
            raise ZeroProbabilityError(
                f"test item {idx} has zero probability: "
                f"{' '.join(str(t) for t in w)!r}")
        total_ll += ll
    return math.exp(-total_ll / total_tokens)
