import numpy as np
import pytest

from molspan.data import generate_synthetic
from molspan.graph import Atom, MolGraph
from molspan.smiles import parse_smiles
from molspan.vocab import AtomToken, Vocab, default_seed_vocab, induce_vocab


@pytest.fixture
def methane():
    return MolGraph([Atom("C", 0, 4)], [])


@pytest.fixture
def water_atom():
    # water as a single O with two attached hydrogens
    return MolGraph([Atom("O", 0, 2)], [])


@pytest.fixture
def nacl():
    return parse_smiles("[Na+].[Cl-]")


@pytest.fixture
def benzene():
    return parse_smiles("C1=CC=CC=C1")


@pytest.fixture
def cyclohexane():
    return parse_smiles("C1CCCCC1")


@pytest.fixture
def ethanol():
    return parse_smiles("CCO")


@pytest.fixture
def dimethyl_ether():
    return parse_smiles("COC")


@pytest.fixture
def isobutane():
    return parse_smiles("CC(C)C")


@pytest.fixture
def carbonyl():
    return parse_smiles("O=C")


@pytest.fixture
def bicyclo():
    # two fused six-rings sharing an edge: 10 atoms, 11 bonds
    return parse_smiles("C1CCC2CCCCC2C1")


@pytest.fixture(scope="session")
def seed_vocab():
    return default_seed_vocab()


@pytest.fixture(scope="session")
def synth_corpus(seed_vocab):
    """1000 synthetic molecules with their surrogate properties."""
    rows = generate_synthetic(seed_vocab, 1000, 64, seed=11)
    graphs = [parse_smiles(s) for s, _ in rows]
    props = [p for _, p in rows]
    return graphs, props


@pytest.fixture(scope="session")
def induced_vocab(synth_corpus):
    graphs, _ = synth_corpus
    return induce_vocab(graphs, r_max=100)


@pytest.fixture(scope="session")
def toy_vocab():
    """Three atom tokens with valencies 4/2/1 and a tight ring cap."""
    return Vocab(
        [
            AtomToken("C", 0, 0, 4),
            AtomToken("O", 0, 0, 2),
            AtomToken("F", 0, 0, 1),
        ],
        r_max=2,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
