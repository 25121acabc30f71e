import numpy as np
import pytest

from pcfuzz import fixtures as fx
from pcfuzz.circuit import compile_circuit, init_weights

FIG2_TEXT = """
eq : digit (PLUS digit)* ;
digit : ONE | TWO ;
"""


@pytest.fixture(scope="session")
def arith_cnf():
    return fx.build_cnf("arith")


@pytest.fixture(scope="session")
def arith_circuit(arith_cnf):
    return compile_circuit(arith_cnf, 5)


@pytest.fixture(scope="session")
def arith_circuit9(arith_cnf):
    return compile_circuit(arith_cnf, 9)


@pytest.fixture(scope="session")
def json_cnf():
    return fx.build_cnf("json")


@pytest.fixture(scope="session")
def json_circuit(json_cnf):
    return compile_circuit(json_cnf, 6)


@pytest.fixture(scope="session")
def sql_cnf():
    return fx.build_cnf("sql")


@pytest.fixture(scope="session")
def sql_circuit(sql_cnf):
    return compile_circuit(sql_cnf, 21)


@pytest.fixture(scope="session")
def sql_trained(sql_circuit):
    from pcfuzz.learning import train_pc_em
    trained, _ = train_pc_em(sql_circuit, fx.seed_corpus("sql", "diverse"),
                             epochs=30)
    return trained


@pytest.fixture(scope="session")
def finite_cnf():
    return fx.build_cnf("finite")


@pytest.fixture()
def rng():
    return np.random.default_rng(0xC0FFEE)
