"""Binary Morgan (ECFP-style) fingerprints and Tanimoto similarity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from meg.chem.molgraph import ELEMENTS, MolGraphError, Molecule, free_valence

DEFAULT_RADIUS = 2
DEFAULT_WIDTH = 2048

_MASK = (1 << 64) - 1
_SEED = 0x4D45475F46505F31  # pinned so bit positions never move between runs


class EmptyMolecule(MolGraphError):
    pass


class WidthMismatch(ValueError):
    pass


class BothZero(ValueError):
    pass


def _mix(x: int) -> int:
    # splitmix64 finaliser
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def hash_ints(values) -> int:
    """Fold a sequence of non-negative ints into one 64-bit hash."""
    h = _SEED
    for v in values:
        h = _mix(h ^ (v & _MASK))
    return h


@dataclass(frozen=True)
class Fingerprint:
    """Fixed-width bit vector; bit ``k`` is ``(bits >> k) & 1``."""

    bits: int
    width: int = DEFAULT_WIDTH

    def __post_init__(self) -> None:
        if self.width <= 0 or self.width & (self.width - 1):
            raise ValueError(f"fingerprint width must be a power of two, got {self.width}")
        if self.bits < 0 or self.bits >> self.width:
            raise ValueError("bits do not fit in the fingerprint width")

    @classmethod
    def from_indices(cls, indices, width: int = DEFAULT_WIDTH) -> "Fingerprint":
        bits = 0
        for k in indices:
            bits |= 1 << k
        return cls(bits, width)

    @classmethod
    def from_hex(cls, text: str) -> "Fingerprint":
        return cls(int(text, 16), len(text) * 4)

    def popcount(self) -> int:
        return self.bits.bit_count()

    def on_bits(self) -> list[int]:
        return [k for k in range(self.width) if (self.bits >> k) & 1]

    def to_hex(self) -> str:
        """``width/4`` hex digits, most significant bit (highest index) first."""
        return format(self.bits, f"0{self.width // 4}x")

    def to_array(self, dtype=np.float32) -> np.ndarray:
        raw = self.bits.to_bytes(self.width // 8, "little")
        return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little").astype(dtype)


def atom_invariants(m: Molecule) -> list[int]:
    return [
        hash_ints(
            (ELEMENTS.index(e) + 1, m.degree(a), m.bond_order_sum(a), free_valence(m, a))
        )
        for a, e in enumerate(m.elements)
    ]


def morgan_fingerprint(m: Molecule, radius: int = DEFAULT_RADIUS, width: int = DEFAULT_WIDTH) -> Fingerprint:
    if len(m) == 0:
        raise EmptyMolecule("cannot fingerprint an empty molecule")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if width <= 0 or width & (width - 1):
        raise ValueError(f"fingerprint width must be a power of two, got {width}")
    ids = atom_invariants(m)
    bits = 0
    for ident in ids:
        bits |= 1 << (ident % width)
    for rnd in range(radius):
        ids = [
            hash_ints(
                (rnd + 1, ids[a])
                + tuple(x for pair in sorted((order, ids[b]) for b, order in m.neighbors[a]) for x in pair)
            )
            for a in range(len(m))
        ]
        for ident in ids:
            bits |= 1 << (ident % width)
    return Fingerprint(bits, width)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.width != b.width:
        raise WidthMismatch(f"{a.width} != {b.width}")
    both = (a.bits & b.bits).bit_count()
    union = a.popcount() + b.popcount() - both
    if union == 0:
        raise BothZero("tanimoto is undefined for two empty fingerprints")
    return both / union
