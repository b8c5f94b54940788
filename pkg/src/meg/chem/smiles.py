"""Reader and writer for a kekulized SMILES subset (grammar in docs/smiles-subset.md)."""
from __future__ import annotations

from meg.chem.molgraph import Bond, Element, MolGraphError, Molecule, check_validity


class SmilesError(MolGraphError):
    """Raised when text falls outside the supported SMILES subset."""


class UnknownSymbol(SmilesError):
    pass


class UnclosedRing(SmilesError):
    pass


class UnbalancedParenthesis(SmilesError):
    pass


class ValenceViolation(SmilesError):
    pass


class AromaticUnsupported(SmilesError):
    pass


_BOND_SYMBOLS = {"-": 1, "=": 2, "#": 3}
_BOND_CHARS = {1: "", 2: "=", 3: "#"}
_AROMATIC = set("cnospb")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    """Split into (kind, value, position) tokens."""
    tokens = []
    pos = 0
    while pos < len(text):
        ch = text[pos]
        two = text[pos : pos + 2]
        if two in ("Cl", "Br"):
            tokens.append(("atom", two, pos))
            pos += 2
            continue
        if ch in "CNOSF":
            tokens.append(("atom", ch, pos))
        elif ch in _AROMATIC:
            raise AromaticUnsupported(f"aromatic atom {ch!r} at position {pos}")
        elif ch in _BOND_SYMBOLS:
            tokens.append(("bond", ch, pos))
        elif ch in "()":
            tokens.append((ch, ch, pos))
        elif ch.isdigit():
            tokens.append(("ring", ch, pos))
        else:
            raise UnknownSymbol(f"unsupported symbol {ch!r} at position {pos} in {text!r}")
        pos += 1
    return tokens


def parse_smiles(text: str) -> Molecule:
    text = text.strip()
    if not text:
        raise UnknownSymbol("empty SMILES")
    elements: list[Element] = []
    bonds: dict[tuple[int, int], int] = {}
    branch_stack: list[int] = []
    open_rings: dict[str, tuple[int, int | None]] = {}
    prev: int | None = None
    pending: int | None = None

    def add_bond(u: int, v: int, order: int, pos: int) -> None:
        key = (min(u, v), max(u, v))
        if u == v or key in bonds:
            raise UnclosedRing(f"ring closure at position {pos} duplicates a bond or loops on an atom")
        bonds[key] = order

    for kind, value, pos in _tokenize(text):
        if kind == "atom":
            elements.append(Element.from_symbol(value))
            idx = len(elements) - 1
            if prev is not None:
                add_bond(prev, idx, pending or 1, pos)
            elif pending is not None:
                raise UnknownSymbol(f"bond symbol without a preceding atom at position {pos}")
            prev, pending = idx, None
        elif kind == "bond":
            if prev is None or pending is not None:
                raise UnknownSymbol(f"misplaced bond symbol {value!r} at position {pos}")
            pending = _BOND_SYMBOLS[value]
        elif kind == "ring":
            if prev is None:
                raise UnknownSymbol(f"ring digit before any atom at position {pos}")
            if value in open_rings:
                other, order = open_rings.pop(value)
                if order is not None and pending is not None and order != pending:
                    raise UnclosedRing(f"ring {value} closed with conflicting bond orders")
                add_bond(other, prev, pending or order or 1, pos)
            else:
                open_rings[value] = (prev, pending)
            pending = None
        elif kind == "(":
            if prev is None or pending is not None:
                raise UnbalancedParenthesis(f"branch opened without an atom at position {pos}")
            branch_stack.append(prev)
        else:
            if not branch_stack or pending is not None:
                raise UnbalancedParenthesis(f"unmatched ')' at position {pos}")
            prev = branch_stack.pop()
    if pending is not None:
        raise UnknownSymbol("SMILES ends with a bond symbol")
    if branch_stack:
        raise UnbalancedParenthesis(f"{len(branch_stack)} unclosed branch(es)")
    if open_rings:
        raise UnclosedRing(f"unclosed ring label(s) {sorted(open_rings)}")

    mol = Molecule(tuple(elements), tuple(Bond(i, j, o) for (i, j), o in bonds.items()))
    bad = [v for v in check_validity(mol).violations if v.reason == "ValenceViolation"]
    if bad:
        raise ValenceViolation(f"atoms {[v.where for v in bad]} exceed their valence in {text!r}")
    return mol


def write_smiles(m: Molecule) -> str:
    """Depth-first SMILES from atom 0, visiting neighbours in index order.

    The output re-parses to the same graph, and atom 0 stays first.
    """
    report = check_validity(m)
    if not report.valid:
        raise MolGraphError(f"cannot write invalid molecule: {report.violations}")
    n = len(m.elements)
    parent = [-1] * n
    order: list[int] = []
    children: list[list[int]] = [[] for _ in range(n)]
    seen = [False] * n
    # First pass fixes the spanning tree so ring bonds are known before writing.
    stack = [(0, -1)]
    while stack:
        atom, par = stack.pop()
        if seen[atom]:
            continue
        seen[atom] = True
        parent[atom] = par
        order.append(atom)
        if par >= 0:
            children[par].append(atom)
        for nb, _ in reversed(m.neighbors[atom]):
            if not seen[nb]:
                stack.append((nb, atom))
    rank = {a: k for k, a in enumerate(order)}
    tree = {(min(a, p), max(a, p)) for a, p in enumerate(parent) if p >= 0}
    ring_bonds = [b for b in m.bonds if b.pair not in tree]
    # Each ring bond opens at its earlier-visited atom and closes at the later one.
    opens: dict[int, list[Bond]] = {}
    closes: dict[int, list[Bond]] = {}
    for b in ring_bonds:
        first, second = sorted(b.pair, key=rank.__getitem__)
        opens.setdefault(first, []).append(b)
        closes.setdefault(second, []).append(b)

    labels: dict[tuple[int, int], str] = {}
    free_labels = list("1234567890")
    out: list[str] = []

    def emit(atom: int) -> None:
        out.append(m.elements[atom].symbol)
        for b in sorted(closes.get(atom, []), key=lambda b: rank[b.i + b.j - atom]):
            label = labels.pop(b.pair)
            out.append(_BOND_CHARS[b.order] + label)
            free_labels.insert(0, label)
        for b in opens.get(atom, []):
            if not free_labels:
                raise MolGraphError("more than ten simultaneously open rings")
            label = free_labels.pop(0)
            labels[b.pair] = label
            out.append(_BOND_CHARS[b.order] + label)
        kids = sorted(children[atom], key=rank.__getitem__)
        for k, child in enumerate(kids):
            last = k == len(kids) - 1
            if not last:
                out.append("(")
            out.append(_BOND_CHARS[m.bond_order(atom, child)])
            emit(child)
            if not last:
                out.append(")")

    emit(0)
    return "".join(out)
