import json
from pathlib import Path

import numpy as np
import pytest

from meg.chem import parse_smiles

DATA = Path(__file__).parent / "data"


def load_corpus():
    lines = (DATA / "corpus.smi").read_text().split()
    return [(s, parse_smiles(s)) for s in lines]


@pytest.fixture(scope="session")
def corpus():
    return load_corpus()


@pytest.fixture(scope="session")
def golden():
    return json.loads((DATA / "golden.json").read_text())


def random_permutation(n, rng):
    return [int(x) for x in rng.permutation(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def nitrogen_data():
    from meg.data import split, synth_task

    data = synth_task("contains_nitrogen", 200, seed=0)
    return split(data, (0.8, 0.1, 0.1), seed=0)


@pytest.fixture(scope="session")
def nitrogen_model(nitrogen_data):
    """Small classifier trained on the synthetic nitrogen task; shared across modules."""
    from meg.gnn import TrainConfig, train_predictor

    train, val, _ = nitrogen_data
    cfg = TrainConfig(hidden_size=64, epochs=50, patience=15, seed=0)
    return train_predictor(train, val, cfg)
