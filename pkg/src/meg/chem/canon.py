"""Canonical keys for small molecular graphs.

Colour refinement (1-WL over element, degree and bond orders) splits atoms into
classes; remaining ties are resolved by individualising each candidate atom in
turn and keeping the lexicographically smallest relabelled graph. Exhaustive,
so only meant for molecules of a few dozen atoms.
"""
from __future__ import annotations

from meg.chem.molgraph import Molecule


def _rank(signatures: list) -> list[int]:
    table = {s: r for r, s in enumerate(sorted(set(signatures)))}
    return [table[s] for s in signatures]


def _refine(m: Molecule, colors: list[int]) -> list[int]:
    while True:
        sigs = [
            (colors[a], tuple(sorted((order, colors[b]) for b, order in m.neighbors[a])))
            for a in range(len(colors))
        ]
        new = _rank(sigs)
        if len(set(new)) == len(set(colors)):
            return new
        colors = new


def _encode(m: Molecule, colors: list[int]) -> tuple:
    # colors is discrete here, so it is a relabelling 0..n-1
    elements = [""] * len(colors)
    for a, c in enumerate(colors):
        elements[c] = m.elements[a].symbol
    bonds = sorted(
        (min(colors[b.i], colors[b.j]), max(colors[b.i], colors[b.j]), b.order) for b in m.bonds
    )
    return (tuple(elements), tuple(bonds))


def _search(m: Molecule, colors: list[int]) -> tuple:
    colors = _refine(m, colors)
    n = len(colors)
    if len(set(colors)) == n:
        return _encode(m, colors)
    sizes: dict[int, int] = {}
    for c in colors:
        sizes[c] = sizes.get(c, 0) + 1
    target = min((size, c) for c, size in sizes.items() if size > 1)[1]
    best = None
    for v in (a for a in range(n) if colors[a] == target):
        split = [2 * c + (1 if (c == target and a != v) else 0) for a, c in enumerate(colors)]
        enc = _search(m, _rank(split))
        if best is None or enc < best:
            best = enc
    return best


def canonical_form(m: Molecule) -> tuple:
    """Isomorphism-invariant (elements, bonds) encoding of ``m``."""
    if len(m) == 0:
        return ((), ())
    initial = [(e.symbol, m.degree(a), m.bond_order_sum(a)) for a, e in enumerate(m.elements)]
    return _search(m, _rank(initial))


def canonical_key(m: Molecule) -> str:
    elements, bonds = canonical_form(m)
    return ".".join(elements) + "|" + ",".join(f"{i}-{j}:{o}" for i, j, o in bonds)
