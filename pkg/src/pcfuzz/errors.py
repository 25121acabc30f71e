"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: usage errors (bad flags / bad parameter
values) exit 1, input errors (malformed or inconsistent data) exit 2,
capacity and budget exhaustion exit 3, numeric failures exit 4.
"""


class PcfuzzError(Exception):
    """Base class for all toolkit errors."""


class InputError(PcfuzzError):
    """Malformed or inconsistent input data (exit code 2)."""


class CapacityError(PcfuzzError):
    """A size or retry budget was exhausted (exit code 3)."""


class NumericError(PcfuzzError):
    """A probabilistic quantity degenerated (zero mass, no support) (exit code 4)."""


# --- grammar ---

class GrammarError(InputError):
    pass


class GrammarSyntaxError(GrammarError):
    def __init__(self, message, line, col):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


class UndefinedSymbolError(GrammarError):
    pass


class DuplicateRuleError(GrammarError):
    pass


class UnproductiveGrammarError(GrammarError):
    pass


class UnknownTokenError(InputError):
    pass


class DerivationBudgetError(CapacityError):
    """Stochastic derivation could not finish within its step/restart budget."""


# --- corpus ---

class TokenizeError(InputError):
    def __init__(self, message, offset):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


class SpecFormatError(InputError):
    """Malformed tokenizer / concretizer / oracle spec file."""


class MissingDescriptorError(InputError):
    pass


class EmptyCorpusError(InputError):
    pass


# --- circuit ---

class CircuitCapacityError(CapacityError):
    pass


class CircuitFormatError(InputError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CircuitVersionError(CircuitFormatError):
    pass


# --- inference / evidence ---

class EvidenceError(InputError):
    pass


class ConflictingEvidenceError(EvidenceError):
    pass


class ZeroConditionError(NumericError):
    """Conditioning event has zero probability."""


# --- learning ---

class ZeroLikelihoodError(NumericError):
    """A training item lies outside the model's support."""


class UnparseableItemError(InputError):
    """A training item is not generated by the grammar."""


class ZeroProbabilityError(NumericError):
    """A test item has zero model probability and eval smoothing is disabled."""


class DegenerateModelError(InputError):
    """Model shape guard tripped (e.g. far more HMM states than observed symbols)."""


# --- sampling ---

class ZeroProbabilityConstraintError(NumericError):
    pass


class RejectionBudgetError(CapacityError):
    def __init__(self, message, acceptance_estimate):
        super().__init__(message)
        self.acceptance_estimate = acceptance_estimate


# --- testbed ---

class OracleSetMismatchError(InputError):
    pass


class UsageError(PcfuzzError):
    """Bad command line or parameter combination (exit code 1)."""
