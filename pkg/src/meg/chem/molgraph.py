"""Molecular graph model: typed heavy atoms, ordered bonds, valence checks and edits.

Hydrogens are implicit. An atom's free valence is whatever capacity is left after
its explicit bonds, and that remainder is read as attached hydrogens.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Iterable, NamedTuple

if TYPE_CHECKING:
    from meg.chem.actions import EditAction


class MolGraphError(ValueError):
    """Base class for molecule construction and editing errors."""


class AtomOutOfRange(MolGraphError, IndexError):
    pass


class IllegalAction(MolGraphError):
    pass


class Element(enum.Enum):
    C = ("C", 4)
    N = ("N", 3)
    O = ("O", 2)
    S = ("S", 2)
    F = ("F", 1)
    Cl = ("Cl", 1)
    Br = ("Br", 1)

    def __init__(self, symbol: str, max_valence: int) -> None:
        self.symbol = symbol
        self.max_valence = max_valence

    @classmethod
    def from_symbol(cls, symbol: str) -> "Element":
        try:
            return _BY_SYMBOL[symbol]
        except KeyError:
            raise KeyError(symbol) from None

    def __repr__(self) -> str:
        return f"Element.{self.symbol}"


_BY_SYMBOL = {e.symbol: e for e in Element}
ELEMENTS: tuple[Element, ...] = tuple(Element)


class Atom(NamedTuple):
    element: Element
    index: int


class Bond(NamedTuple):
    """An undirected bond stored with ``i < j``."""

    i: int
    j: int
    order: int

    @property
    def pair(self) -> tuple[int, int]:
        return (self.i, self.j)


def make_bond(u: int, v: int, order: int) -> Bond:
    return Bond(u, v, order) if u < v else Bond(v, u, order)


@dataclass(frozen=True)
class Molecule:
    """Immutable heavy-atom graph.

    Construction does not enforce chemistry; use :func:`check_validity` for that.
    Bonds are normalised to ``i < j`` and sorted so equal graphs under the same
    atom numbering compare (and hash) equal.
    """

    elements: tuple[Element, ...]
    bonds: tuple[Bond, ...] = ()
    _bond_index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        elements = tuple(self.elements)
        bonds = tuple(sorted(make_bond(*b) for b in self.bonds))
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "bonds", bonds)
        object.__setattr__(self, "_bond_index", {b.pair: b.order for b in bonds})

    @classmethod
    def from_symbols(cls, symbols: Iterable[str], bonds: Iterable[tuple[int, int, int]] = ()) -> "Molecule":
        return cls(tuple(Element.from_symbol(s) for s in symbols), tuple(Bond(*b) for b in bonds))

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def num_atoms(self) -> int:
        return len(self.elements)

    @property
    def atoms(self) -> tuple[Atom, ...]:
        return tuple(Atom(e, i) for i, e in enumerate(self.elements))

    @cached_property
    def neighbors(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom, the sorted ``(neighbor, order)`` pairs."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.elements]
        for i, j, order in self.bonds:
            if 0 <= i < len(adj) and 0 <= j < len(adj):
                adj[i].append((j, order))
                adj[j].append((i, order))
        return tuple(tuple(sorted(a)) for a in adj)

    def bond_order(self, u: int, v: int) -> int:
        """Order of the bond between ``u`` and ``v``; 0 when unbonded."""
        if u > v:
            u, v = v, u
        return self._bond_index.get((u, v), 0)

    def degree(self, atom: int) -> int:
        return len(self.neighbors[atom])

    def bond_order_sum(self, atom: int) -> int:
        return sum(order for _, order in self.neighbors[atom])

    def symbols(self) -> list[str]:
        return [e.symbol for e in self.elements]

    def count(self, element: Element) -> int:
        return sum(1 for e in self.elements if e is element)

    def with_bond(self, u: int, v: int, order: int) -> "Molecule":
        """Copy with the ``u``-``v`` bond set to ``order`` (0 deletes it). No validity checks."""
        bonds = [b for b in self.bonds if b.pair != tuple(sorted((u, v)))]
        if order > 0:
            bonds.append(make_bond(u, v, order))
        return Molecule(self.elements, tuple(bonds))

    def with_atom(self, element: Element, attach_to: int, order: int = 1) -> "Molecule":
        new = len(self.elements)
        return Molecule(self.elements + (element,), self.bonds + (Bond(attach_to, new, order),))

    def components(self) -> list[list[int]]:
        """Connected components as sorted atom-index lists, ordered by smallest member."""
        seen = [False] * len(self.elements)
        out = []
        for start in range(len(self.elements)):
            if seen[start]:
                continue
            seen[start] = True
            stack, comp = [start], []
            while stack:
                a = stack.pop()
                comp.append(a)
                for b, _ in self.neighbors[a]:
                    if not seen[b]:
                        seen[b] = True
                        stack.append(b)
            out.append(sorted(comp))
        return out

    def subgraph(self, keep: Iterable[int]) -> "Molecule":
        """Induced subgraph on ``keep``, renumbered in increasing original index order."""
        keep = sorted(set(keep))
        remap = {old: new for new, old in enumerate(keep)}
        bonds = tuple(
            Bond(remap[b.i], remap[b.j], b.order) for b in self.bonds if b.i in remap and b.j in remap
        )
        return Molecule(tuple(self.elements[i] for i in keep), bonds)

    def permute(self, perm: list[int]) -> "Molecule":
        """Renumber atoms so that old atom ``i`` becomes ``perm[i]``."""
        elements: list[Element | None] = [None] * len(perm)
        for old, new in enumerate(perm):
            elements[new] = self.elements[old]
        bonds = tuple(make_bond(perm[b.i], perm[b.j], b.order) for b in self.bonds)
        return Molecule(tuple(elements), bonds)  # type: ignore[arg-type]

    def __str__(self) -> str:
        from meg.chem.smiles import write_smiles

        try:
            return write_smiles(self)
        except MolGraphError:
            return repr(self)


class Violation(NamedTuple):
    where: int | tuple[int, int] | None
    reason: str


@dataclass(frozen=True)
class ValidityReport:
    violations: tuple[Violation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.valid


def check_validity(m: Molecule) -> ValidityReport:
    """Report every broken structural or valence invariant of ``m``.

    Reason codes: ``EmptyMolecule``, ``BadAtomIndex``, ``SelfLoop``, ``BadBondOrder``,
    ``DuplicateBond``, ``ValenceViolation``, ``Disconnected``.
    """
    out: list[Violation] = []
    n = len(m.elements)
    if n == 0:
        out.append(Violation(None, "EmptyMolecule"))
    seen: set[tuple[int, int]] = set()
    for b in m.bonds:
        if not (0 <= b.i < n and 0 <= b.j < n):
            out.append(Violation(b.pair, "BadAtomIndex"))
        if b.i == b.j:
            out.append(Violation(b.pair, "SelfLoop"))
        if b.order not in (1, 2, 3):
            out.append(Violation(b.pair, "BadBondOrder"))
        if b.pair in seen:
            out.append(Violation(b.pair, "DuplicateBond"))
        seen.add(b.pair)
    load = [0] * n
    for b in m.bonds:
        if 0 <= b.i < n and 0 <= b.j < n:
            load[b.i] += b.order
            if b.j != b.i:
                load[b.j] += b.order
    for a, element in enumerate(m.elements):
        if load[a] > element.max_valence:
            out.append(Violation(a, "ValenceViolation"))
    if n > 1 and len(m.components()) > 1:
        out.append(Violation(None, "Disconnected"))
    return ValidityReport(tuple(out))


def free_valence(m: Molecule, atom: int) -> int:
    if not 0 <= atom < len(m.elements):
        raise AtomOutOfRange(f"atom {atom} not in molecule of {len(m.elements)} atoms")
    return m.elements[atom].max_valence - m.bond_order_sum(atom)


def keep_fragment(m: Molecule, anchor: int) -> Molecule:
    """Drop every atom not connected to ``anchor``."""
    comps = m.components()
    if len(comps) == 1:
        return m
    for comp in comps:
        if anchor in comp:
            return m.subgraph(comp)
    raise AtomOutOfRange(anchor)


def apply_edit(m: Molecule, action: "EditAction") -> Molecule:
    """Return the molecule produced by ``action``; ``m`` itself is untouched.

    A bond deletion that splits the graph keeps only the fragment holding the
    lower-indexed endpoint.
    """
    from meg.chem.actions import AddAtom, NoOp, RemoveOrDowngradeBond, SetBond

    n = len(m.elements)
    if isinstance(action, NoOp):
        return m
    if isinstance(action, AddAtom):
        if not 0 <= action.attach_to < n:
            raise IllegalAction(f"{action}: no atom {action.attach_to}")
        if free_valence(m, action.attach_to) < 1:
            raise IllegalAction(f"{action}: atom {action.attach_to} has no free valence")
        return m.with_atom(action.element, action.attach_to, 1)
    if isinstance(action, (SetBond, RemoveOrDowngradeBond)):
        u, v = action.pair
        if not (0 <= u < n and 0 <= v < n) or u == v:
            raise IllegalAction(f"{action}: bad atom pair")
        current = m.bond_order(u, v)
        if isinstance(action, SetBond):
            delta = action.new_order - current
            if action.new_order > 3 or delta <= 0:
                raise IllegalAction(f"{action}: order must rise from {current}")
            if delta > min(free_valence(m, u), free_valence(m, v)):
                raise IllegalAction(f"{action}: exceeds free valence")
            return m.with_bond(u, v, action.new_order)
        if current == 0 or not 0 <= action.new_order < current:
            raise IllegalAction(f"{action}: order must fall from {current}")
        return keep_fragment(m.with_bond(u, v, action.new_order), min(u, v))
    raise IllegalAction(f"unknown action {action!r}")
