"""Valence-legal edit actions: atom additions, bond raises, bond lowers/removals and no-op."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Union

from meg.chem.molgraph import ELEMENTS, Element, MolGraphError, Molecule, check_validity, free_valence


class InvalidMolecule(MolGraphError):
    pass


@dataclass(frozen=True)
class AddAtom:
    element: Element
    attach_to: int


@dataclass(frozen=True)
class SetBond:
    """Create a bond or raise its order to ``new_order``."""

    u: int
    v: int
    new_order: int

    @property
    def pair(self) -> tuple[int, int]:
        return (min(self.u, self.v), max(self.u, self.v))


@dataclass(frozen=True)
class RemoveOrDowngradeBond:
    """Lower a bond to ``new_order``; 0 deletes it."""

    u: int
    v: int
    new_order: int

    @property
    def pair(self) -> tuple[int, int]:
        return (min(self.u, self.v), max(self.u, self.v))


@dataclass(frozen=True)
class NoOp:
    pass


EditAction = Union[AddAtom, SetBond, RemoveOrDowngradeBond, NoOp]


def action_signature(a: EditAction) -> str:
    if isinstance(a, NoOp):
        return "noop"
    if isinstance(a, AddAtom):
        return f"add:{a.element.symbol}@{a.attach_to}"
    i, j = a.pair
    tag = "bond+" if isinstance(a, SetBond) else "bond-"
    return f"{tag}:{i}-{j}:{a.new_order}"


def enumerate_actions(
    m: Molecule,
    vocab: Iterable[Element] = ELEMENTS,
    include_noop: bool = False,
) -> list[EditAction]:
    """All legal edits of ``m``, sorted by signature.

    Atom additions always attach through a single bond. Bond raises are offered
    for every atom pair where the order increment fits both endpoints' free
    valence; every existing bond may be lowered to any smaller order.
    """
    report = check_validity(m)
    if not report.valid:
        raise InvalidMolecule(f"cannot enumerate edits of an invalid molecule: {report.violations}")
    n = len(m)
    free = [free_valence(m, a) for a in range(n)]
    out: list[EditAction] = []
    for element in dict.fromkeys(vocab):
        out.extend(AddAtom(element, a) for a in range(n) if free[a] >= 1)
    for u, v in combinations(range(n), 2):
        current = m.bond_order(u, v)
        room = min(free[u], free[v])
        out.extend(SetBond(u, v, k) for k in range(current + 1, 4) if k - current <= room)
        out.extend(RemoveOrDowngradeBond(u, v, k) for k in range(current))
    if include_noop:
        out.append(NoOp())
    return sorted(out, key=action_signature)
