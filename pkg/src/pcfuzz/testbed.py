"""Synthetic bug oracles over token sequences and campaign measurement.

Oracle file format (tab separated, '#' comments):

    id<TAB>ordered=A,B,C<TAB>any=X,Y<TAB>min=T:5

Any of the three requirement fields may be omitted, but not all.
Directive lines declare token sets used by the explicit-sensitive metric:

    sensitive=SSN,EMAIL
    wildcard=STAR

A campaign feeds `count` generated inputs to every oracle, `repeats`
times, and averages the per-repeat metrics. Only inputs that parse and
concretize count as executable, and only executable inputs can trigger.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OracleSetMismatchError, PcfuzzError, SpecFormatError
from .grammar import cyk_accepts_batch


@dataclass(frozen=True)
class BugOracle:
    oracle_id: str
    required_ordered: tuple = ()
    required_any: frozenset = frozenset()
    min_count: tuple | None = None  # (token, k)

    def __post_init__(self):
        if not self.required_ordered and not self.required_any \
                and self.min_count is None:
            raise SpecFormatError(
                f"oracle {self.oracle_id!r} has an empty requirement set")
        if self.min_count is not None and self.min_count[1] < 1:
            raise SpecFormatError(
                f"oracle {self.oracle_id!r}: min count must be >= 1")


def check_oracle(oracle: BugOracle, seq):
    """True iff the ordered tokens appear as a subsequence, every required
    token occurs, and the cardinality requirement holds."""
    seq = list(seq)
    it = iter(seq)
    for needed in oracle.required_ordered:
        for tok in it:
            if tok == needed:
                break
        else:
            return False
    if not oracle.required_any <= set(seq):
        return False
    if oracle.min_count is not None:
        token, k = oracle.min_count
        if seq.count(token) < k:
            return False
    return True


def parse_oracles(text, vocab=None):
    """Returns (oracles, sensitive_tokens, wildcard_tokens)."""
    oracles = []
    sensitive, wildcard = set(), set()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("sensitive="):
            sensitive |= {t for t in line[len("sensitive="):].split(",") if t}
            continue
        if line.startswith("wildcard="):
            wildcard |= {t for t in line[len("wildcard="):].split(",") if t}
            continue
        parts = line.split("\t")
        oid = parts[0].strip()
        if oid in seen:
            raise SpecFormatError(f"oracle line {lineno}: duplicate id {oid!r}")
        seen.add(oid)
        ordered, anyset, mincount = (), frozenset(), None
        for fieldspec in parts[1:]:
            fieldspec = fieldspec.strip()
            if not fieldspec:
                continue
            if fieldspec.startswith("ordered="):
                ordered = tuple(t for t in fieldspec[8:].split(",") if t)
            elif fieldspec.startswith("any="):
                anyset = frozenset(t for t in fieldspec[4:].split(",") if t)
            elif fieldspec.startswith("min="):
                token, _, k = fieldspec[4:].partition(":")
                try:
                    mincount = (token, int(k))
                except ValueError:
                    raise SpecFormatError(
                        f"oracle line {lineno}: min wants TOKEN:k") from None
            else:
                raise SpecFormatError(
                    f"oracle line {lineno}: unknown field {fieldspec!r}")
        try:
            oracles.append(BugOracle(oracle_id=oid, required_ordered=ordered,
                                     required_any=anyset, min_count=mincount))
        except SpecFormatError as exc:
            raise SpecFormatError(f"oracle line {lineno}: {exc}") from None
    if not oracles:
        raise SpecFormatError("oracle file defines no oracles")
    if vocab is not None:
        names = set(vocab.names)
        for o in oracles:
            used = set(o.required_ordered) | set(o.required_any)
            if o.min_count:
                used.add(o.min_count[0])
            unknown = used - names
            if unknown:
                raise SpecFormatError(
                    f"oracle {o.oracle_id!r} uses unknown tokens: "
                    + ", ".join(sorted(unknown)))
    return oracles, sensitive, wildcard


def format_oracles(oracles, sensitive=(), wildcard=()):
    lines = []
    if sensitive:
        lines.append("sensitive=" + ",".join(sorted(sensitive)))
    if wildcard:
        lines.append("wildcard=" + ",".join(sorted(wildcard)))
    for o in oracles:
        parts = [o.oracle_id]
        if o.required_ordered:
            parts.append("ordered=" + ",".join(o.required_ordered))
        if o.required_any:
            parts.append("any=" + ",".join(sorted(o.required_any)))
        if o.min_count:
            parts.append(f"min={o.min_count[0]}:{o.min_count[1]}")
        lines.append("\t".join(parts))
    return "\n".join(lines) + "\n"


@dataclass
class CampaignMetrics:
    oracle_ids: tuple
    count: int
    repeats: int
    executable_rate: float
    bug_coverage: float
    total_triggers: float
    distinct_triggers: dict            # oracle id -> mean distinct inputs
    sensitive_rate: float | None = None
    per_repeat_distinct: dict = field(default_factory=dict)  # id -> list

    def to_tsv(self):
        lines = [f"count\t{self.count}", f"repeats\t{self.repeats}",
                 f"executable_rate\t{self.executable_rate:.4f}",
                 f"bug_coverage\t{self.bug_coverage:.4f}",
                 f"total_triggers\t{self.total_triggers:.1f}"]
        if self.sensitive_rate is not None:
            lines.append(f"sensitive_rate\t{self.sensitive_rate:.4f}")
        for oid in self.oracle_ids:
            lines.append(f"distinct\t{oid}\t{self.distinct_triggers[oid]:.1f}")
        return "\n".join(lines) + "\n"


def run_campaign(generator, oracles, count, repeats, rng, grammar=None,
                 concretizer=None, sensitive=(), wildcard=()):
    """Run `repeats` batches of `count` generated inputs against the oracles.

    `generator` is called with a per-draw random generator and returns a
    token name sequence; generator errors count as non-executable inputs.
    When `grammar` is given, inputs must be CYK-accepted to be executable;
    when `concretizer` is given they must also be fully concretizable.
    """
    if count < 1 or repeats < 1:
        raise ValueError("count and repeats must be >= 1")
    oracle_ids = tuple(o.oracle_id for o in oracles)
    exec_rates, coverages, totals = [], [], []
    distinct = {oid: [] for oid in oracle_ids}
    sens_rates = []
    repeat_seeds = rng.integers(0, 2**63 - 1, size=repeats)
    for r in range(repeats):
        rep_rng = np.random.default_rng(int(repeat_seeds[r]))
        draw_seeds = rep_rng.integers(0, 2**63 - 1, size=count)
        seqs = []
        failures = 0
        for i in range(count):
            try:
                seqs.append(tuple(generator(np.random.default_rng(int(draw_seeds[i])))))
            except PcfuzzError:
                failures += 1
        executable = np.ones(len(seqs), dtype=bool)
        if grammar is not None and seqs:
            executable &= cyk_accepts_batch(grammar, seqs)
        if concretizer is not None:
            executable &= np.array([concretizer.covers(s) for s in seqs])
        exec_rates.append(float(executable.sum()) / count)
        eligible = [s for s, ok in zip(seqs, executable) if ok]
        triggered_any = set()
        total_triggers = 0
        covered = 0
        for o in oracles:
            hits = [s for s in eligible if check_oracle(o, s)]
            total_triggers += len(hits)
            distinct[o.oracle_id].append(len(set(hits)))
            if hits:
                covered += 1
                triggered_any.update(hits)
        coverages.append(covered / len(oracles))
        totals.append(total_triggers)
        if sensitive:
            sens = [s for s in triggered_any
                    if set(s) & set(sensitive) and not set(s) & set(wildcard)]
            sens_rates.append(len(sens) / len(triggered_any)
                              if triggered_any else 0.0)
    return CampaignMetrics(
        oracle_ids=oracle_ids, count=count, repeats=repeats,
        executable_rate=float(np.mean(exec_rates)),
        bug_coverage=float(np.mean(coverages)),
        total_triggers=float(np.mean(totals)),
        distinct_triggers={oid: float(np.mean(vals))
                           for oid, vals in distinct.items()},
        sensitive_rate=float(np.mean(sens_rates)) if sensitive else None,
        per_repeat_distinct={oid: list(map(int, vals))
                             for oid, vals in distinct.items()})


@dataclass
class ComparisonReport:
    oracle_ids: tuple
    delta: dict               # oracle id -> D_M - D_B
    mean_diversity: float     # mu(Div.)
    new_bugs: tuple           # oracles triggered by M but not by the baseline
    alignment: float | None   # fraction of target oracles triggered by M

    def to_tsv(self):
        lines = []
        for oid in self.oracle_ids:
            lines.append(f"delta\t{oid}\t{self.delta[oid]:+.2f}")
        lines.append(f"mean_diversity\t{self.mean_diversity:+.2f}")
        lines.append("new_bugs\t" + (",".join(self.new_bugs) or "-"))
        if self.alignment is not None:
            lines.append(f"alignment\t{self.alignment:.4f}")
        return "\n".join(lines) + "\n"


def compare(metrics: CampaignMetrics, baseline: CampaignMetrics, targets=None):
    """Per-oracle diversity deltas, their mean, newly triggered oracles and,
    given a caller-declared target oracle set, the alignment fraction."""
    if metrics.oracle_ids != baseline.oracle_ids:
        raise OracleSetMismatchError(
            "campaigns measured different oracle sets: "
            f"{metrics.oracle_ids} vs {baseline.oracle_ids}")
    delta = {oid: metrics.distinct_triggers[oid] - baseline.distinct_triggers[oid]
             for oid in metrics.oracle_ids}
    mean_div = sum(delta.values()) / len(delta)
    new_bugs = tuple(oid for oid in metrics.oracle_ids
                     if metrics.distinct_triggers[oid] > 0
                     and baseline.distinct_triggers[oid] == 0)
    alignment = None
    if targets is not None:
        targets = list(targets)
        if not targets:
            raise ValueError("target oracle set must not be empty")
        unknown = set(targets) - set(metrics.oracle_ids)
        if unknown:
            raise OracleSetMismatchError(
                "unknown target oracles: " + ", ".join(sorted(unknown)))
        hit = sum(1 for oid in targets if metrics.distinct_triggers[oid] > 0)
        alignment = hit / len(targets)
    return ComparisonReport(oracle_ids=metrics.oracle_ids, delta=delta,
                            mean_diversity=mean_div, new_bugs=new_bugs,
                            alignment=alignment)


def format_heatmap(rows):
    """Textual per-oracle distinct-trigger grid; `rows` maps a model label
    to its CampaignMetrics (all over the same oracle set)."""
    labels = list(rows)
    if not labels:
        return ""
    oracle_ids = rows[labels[0]].oracle_ids
    for label in labels:
        if rows[label].oracle_ids != oracle_ids:
            raise OracleSetMismatchError("heatmap rows use different oracles")
    width = max(len(oid) for oid in oracle_ids)
    head = "model".ljust(24) + "  " + "  ".join(o.ljust(width) for o in oracle_ids)
    lines = [head]
    for label in labels:
        m = rows[label]
        cells = "  ".join(f"{m.distinct_triggers[o]:>{width}.1f}"
                          for o in oracle_ids)
        lines.append(label.ljust(24) + "  " + cells)
    return "\n".join(lines) + "\n"
