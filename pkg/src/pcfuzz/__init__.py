"""Grammar-aware probabilistic circuits for explainable, constraint-conditioned
test input generation: grammar refactoring, circuit compilation, EM training,
exact inference queries, conditioned sampling, and campaign measurement."""

__version__ = "0.1.0"
