from itertools import product

import numpy as np
import pytest

from meg.chem import Molecule, canonical_key, parse_smiles
from meg.fingerprint import (
    BothZero,
    EmptyMolecule,
    Fingerprint,
    WidthMismatch,
    morgan_fingerprint,
    tanimoto,
)

from conftest import random_permutation


def fp(s, radius=2, width=2048):
    return morgan_fingerprint(parse_smiles(s), radius, width)


class TestMorgan:
    def test_radius_zero_lone_carbon(self):
        assert fp("C", radius=0).popcount() == 1

    def test_distinguishes_ethanol_propane(self):
        assert fp("CCO") != fp("CCC")

    def test_deterministic(self):
        assert fp("CC(=O)N").bits == fp("CC(=O)N").bits

    def test_isomorphism_invariance(self, corpus, rng):
        for _, m in corpus:
            p = m.permute(random_permutation(len(m), rng))
            assert canonical_key(p) == canonical_key(m)
            assert morgan_fingerprint(p) == morgan_fingerprint(m)

    def test_radius_adds_bits(self):
        # larger radius only ever adds environments
        for r in range(3):
            small, big = fp("CC(C)C=O", radius=r), fp("CC(C)C=O", radius=r + 1)
            assert small.bits & big.bits == small.bits

    def test_empty(self):
        with pytest.raises(EmptyMolecule):
            morgan_fingerprint(Molecule((), ()))

    def test_width_must_be_power_of_two(self):
        with pytest.raises(ValueError):
            fp("CC", width=1000)

    def test_golden(self, corpus, golden):
        by_text = dict(corpus)
        for text, hexstr in golden["fingerprints_r2_w2048"].items():
            assert morgan_fingerprint(by_text[text]).to_hex() == hexstr


class TestHex:
    def test_length_and_order(self):
        f = Fingerprint.from_indices([0, 9], width=16)
        # bit 9 sits in the second hex digit from the left, bit 0 in the last
        assert f.to_hex() == "0201"
        assert Fingerprint.from_hex("0201") == f

    def test_round_trip(self):
        f = fp("CCN")
        assert len(f.to_hex()) == 512
        assert Fingerprint.from_hex(f.to_hex()) == f

    def test_array_matches_on_bits(self):
        f = fp("CC=CO")
        arr = f.to_array()
        assert list(np.flatnonzero(arr)) == f.on_bits()


class TestTanimoto:
    def test_hand_case(self):
        a = Fingerprint.from_indices([1, 2, 3], 8)
        b = Fingerprint.from_indices([2, 3, 4], 8)
        assert tanimoto(a, b) == 0.5

    def test_identity(self):
        assert tanimoto(fp("CCO"), fp("CCO")) == 1.0

    def test_disjoint(self):
        assert tanimoto(Fingerprint.from_indices([0], 8), Fingerprint.from_indices([1], 8)) == 0.0

    def test_width_mismatch(self):
        with pytest.raises(WidthMismatch):
            tanimoto(Fingerprint(1, 8), Fingerprint(1, 16))

    def test_both_zero(self):
        with pytest.raises(BothZero):
            tanimoto(Fingerprint(0, 8), Fingerprint(0, 8))

    def test_matches_set_formula(self, rng):
        for _ in range(200):
            a = set(rng.choice(64, rng.integers(1, 20), replace=False).tolist())
            b = set(rng.choice(64, rng.integers(1, 20), replace=False).tolist())
            expected = len(a & b) / len(a | b)
            assert tanimoto(Fingerprint.from_indices(a, 64), Fingerprint.from_indices(b, 64)) == expected

    def test_bounded_sensitivity(self):
        width = 8
        for abits, bbits in product(range(1, 1 << width), range(1 << width)):
            a = Fingerprint(abits, width)
            base = tanimoto(a, Fingerprint(bbits, width))
            for k in range(width):
                moved = tanimoto(a, Fingerprint(bbits ^ (1 << k), width))
                assert abs(moved - base) <= 1.0 / a.popcount() + 1e-12
