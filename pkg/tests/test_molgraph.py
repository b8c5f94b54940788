import numpy as np
import pytest

from meg.chem import (
    AddAtom,
    AromaticUnsupported,
    AtomOutOfRange,
    Element,
    IllegalAction,
    Molecule,
    NoOp,
    SetBond,
    UnbalancedParenthesis,
    UnclosedRing,
    UnknownSymbol,
    ValenceViolation,
    apply_edit,
    canonical_key,
    check_validity,
    enumerate_actions,
    free_valence,
    parse_smiles,
    write_smiles,
)
from meg.chem.actions import RemoveOrDowngradeBond

from conftest import random_permutation


def bond_set(m):
    return {(b.i, b.j, b.order) for b in m.bonds}


class TestParse:
    def test_single_carbon(self):
        m = parse_smiles("C")
        assert m.symbols() == ["C"]
        assert m.bonds == ()

    def test_double_bond(self):
        m = parse_smiles("C=O")
        assert m.symbols() == ["C", "O"]
        assert bond_set(m) == {(0, 1, 2)}

    def test_ring(self):
        m = parse_smiles("C1CCCCC1")
        assert len(m) == 6
        # every atom in a six-ring has exactly two ring neighbours
        assert bond_set(m) == {(i, i + 1, 1) for i in range(5)} | {(0, 5, 1)}

    def test_branch_and_halogens(self):
        m = parse_smiles("CC(Cl)(Br)C#N")
        assert m.symbols() == ["C", "C", "Cl", "Br", "C", "N"]
        assert bond_set(m) == {(0, 1, 1), (1, 2, 1), (1, 3, 1), (1, 4, 1), (4, 5, 3)}

    def test_ring_bond_order_on_digit(self):
        m = parse_smiles("C=1CCC1")
        assert m.bond_order(0, 3) == 2

    @pytest.mark.parametrize(
        "text, error",
        [
            ("c1ccccc1", AromaticUnsupported),
            ("CX", UnknownSymbol),
            ("C[NH4+]", UnknownSymbol),
            ("C.C", UnknownSymbol),
            ("C1CC", UnclosedRing),
            ("CC(C", UnbalancedParenthesis),
            ("CC)C", UnbalancedParenthesis),
            ("FC(F)(F)(F)F", ValenceViolation),
            ("O=O=O", ValenceViolation),
        ],
    )
    def test_errors(self, text, error):
        with pytest.raises(error):
            parse_smiles(text)

    def test_empty(self):
        with pytest.raises(ValueError):
            parse_smiles("")


class TestWrite:
    def test_single_carbon(self):
        assert write_smiles(Molecule.from_symbols(["C"])) == "C"

    def test_double_bond_round_trip(self):
        m = Molecule.from_symbols(["C", "O"], [(0, 1, 2)])
        assert canonical_key(parse_smiles(write_smiles(m))) == canonical_key(m)

    def test_corpus_round_trip(self, corpus):
        for text, m in corpus:
            again = parse_smiles(write_smiles(m))
            assert canonical_key(again) == canonical_key(m), text

    def test_round_trip_after_permutation(self, corpus, rng):
        for _, m in corpus[::7]:
            p = m.permute(random_permutation(len(m), rng))
            assert canonical_key(parse_smiles(write_smiles(p))) == canonical_key(m)


class TestValidity:
    def test_lone_carbon_valid(self):
        assert check_validity(Molecule.from_symbols(["C"])).valid

    def test_pentavalent_carbon(self):
        m = Molecule.from_symbols(["C"] + ["F"] * 5, [(0, k, 1) for k in range(1, 6)])
        report = check_validity(m)
        assert not report.valid
        assert (0, "ValenceViolation") in [(v.where, v.reason) for v in report.violations]

    def test_disconnected(self):
        report = check_validity(Molecule.from_symbols(["C", "C"]))
        assert [v.reason for v in report.violations] == ["Disconnected"]

    def test_every_violation_reported(self):
        # O has two triple bonds (valence) and the third atom is isolated
        m = Molecule.from_symbols(["O", "C", "C", "C"], [(0, 1, 3), (0, 2, 3)])
        reasons = sorted(v.reason for v in check_validity(m).violations)
        assert reasons == ["Disconnected", "ValenceViolation"]

    def test_corpus_all_valid(self, corpus):
        assert all(check_validity(m).valid for _, m in corpus)


class TestFreeValence:
    def test_lone_carbon(self):
        assert free_valence(parse_smiles("C"), 0) == 4

    def test_carbonyl_oxygen(self):
        assert free_valence(parse_smiles("C=O"), 1) == 0

    def test_amine_nitrogen(self):
        assert free_valence(parse_smiles("CN"), 1) == 2

    def test_out_of_range(self):
        with pytest.raises(AtomOutOfRange):
            free_valence(parse_smiles("C"), 3)

    def test_nonnegative_on_corpus(self, corpus):
        for _, m in corpus:
            assert all(free_valence(m, a) >= 0 for a in range(len(m)))


class TestApplyEdit:
    def test_add_atom(self):
        out = apply_edit(parse_smiles("C"), AddAtom(Element.O, 0))
        assert out.symbols() == ["C", "O"]
        assert bond_set(out) == {(0, 1, 1)}

    def test_upgrade(self):
        out = apply_edit(parse_smiles("CC"), SetBond(0, 1, 2))
        assert bond_set(out) == {(0, 1, 2)}

    def test_noop(self):
        m = parse_smiles("C=C")
        assert apply_edit(m, NoOp()) == m

    def test_disconnecting_removal_keeps_lower_fragment(self):
        # N(0)-C(1)-O(2): cutting 1-2 keeps the N-C side, cutting 0-1 keeps lone N
        m = parse_smiles("NCO")
        assert apply_edit(m, RemoveOrDowngradeBond(1, 2, 0)).symbols() == ["N", "C"]
        assert apply_edit(m, RemoveOrDowngradeBond(0, 1, 0)).symbols() == ["N"]

    def test_ring_opening_keeps_all_atoms(self):
        out = apply_edit(parse_smiles("C1CC1"), RemoveOrDowngradeBond(0, 2, 0))
        assert len(out) == 3 and len(out.bonds) == 2

    @pytest.mark.parametrize(
        "smiles, action",
        [
            ("C=O", AddAtom(Element.C, 1)),
            ("CC", SetBond(0, 1, 1)),
            ("CC", SetBond(0, 0, 2)),
            ("CC", RemoveOrDowngradeBond(0, 1, 1)),
            ("C", AddAtom(Element.C, 5)),
            ("CO", SetBond(0, 1, 3)),
        ],
    )
    def test_illegal(self, smiles, action):
        with pytest.raises(IllegalAction):
            apply_edit(parse_smiles(smiles), action)

    def test_purity(self, corpus):
        for _, m in corpus[:60]:
            snapshot = (m.elements, m.bonds)
            for a in enumerate_actions(m):
                apply_edit(m, a)
            assert (m.elements, m.bonds) == snapshot


class TestCanonicalKey:
    def test_reversed_order(self):
        a = Molecule.from_symbols(["C", "O"], [(0, 1, 1)])
        b = Molecule.from_symbols(["O", "C"], [(0, 1, 1)])
        assert canonical_key(a) == canonical_key(b)

    def test_bond_position_matters(self):
        assert canonical_key(parse_smiles("CC=O")) != canonical_key(parse_smiles("C=CO"))

    def test_golden(self, corpus, golden):
        for text, m in corpus:
            assert canonical_key(m) == golden["canonical_keys"][text], text

    def test_permutation_invariance(self, corpus, rng):
        for _, m in corpus:
            assert canonical_key(m.permute(random_permutation(len(m), rng))) == canonical_key(m)

    def test_keys_separate_corpus(self, corpus):
        # the corpus was deduplicated by isomorphism, so keys must all differ
        keys = [canonical_key(m) for _, m in corpus]
        assert len(set(keys)) == len(keys)

    def test_symmetric_graphs(self):
        # highly symmetric rings force the individualization tie-break
        hexagon = parse_smiles("C1CCCCC1")
        two_triangles_joined = parse_smiles("C1CC1C1CC1")
        assert canonical_key(hexagon) != canonical_key(two_triangles_joined)
        cyclohexane_perm = hexagon.permute([3, 1, 5, 0, 2, 4])
        assert canonical_key(cyclohexane_perm) == canonical_key(hexagon)
