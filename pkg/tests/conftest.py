import numpy as np
import pytest

from hamsr import systems


@pytest.fixture(scope="session")
def oscillator_ds1():
    return systems.generate(systems.paper_system("oscillator", 1))


@pytest.fixture(scope="session")
def pendulum_ds1():
    return systems.generate(systems.paper_system("pendulum", 1))


@pytest.fixture(scope="session")
def two_body_ds1():
    return systems.generate(systems.paper_system("two_body", 1))


def random_tree(rng, lib, max_ops=8, p_operator=0.4):
    """Random valid expression tree as a pre-order symbol list."""
    symbols = []
    ops = [t.symbol for t in lib.operators]
    terminals = [t.symbol for t in lib.variables] + (
        ["const"] if lib.has_const else []
    )
    open_slots = 1
    n_ops = 0
    first = True
    while open_slots:
        open_slots -= 1
        use_op = (first or rng.random() < p_operator) and n_ops < max_ops
        first = False
        if use_op:
            sym = ops[rng.integers(len(ops))]
            symbols.append(sym)
            n_ops += 1
            from hamsr.expressions import OPERATOR_ARITY

            open_slots += OPERATOR_ARITY[sym]
        else:
            symbols.append(terminals[rng.integers(len(terminals))])
    return symbols
