"""Datasets: CSV loading with validity filtering, seeded splits, synthetic tasks."""
from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence, TextIO

from meg.chem.actions import AddAtom, SetBond, enumerate_actions
from meg.chem.canon import canonical_key
from meg.chem.molgraph import Element, MolGraphError, Molecule, apply_edit, check_validity
from meg.chem.smiles import parse_smiles, write_smiles

TASKS = ("classification", "regression")
SYNTH_KINDS = ("contains_nitrogen", "heavy_atom_count")


class DataError(ValueError):
    pass


class MissingColumn(DataError):
    pass


class EmptyAfterFiltering(DataError):
    pass


class TooSmall(DataError):
    pass


class Record(NamedTuple):
    smiles: str
    molecule: Molecule
    label: float


class Skipped(NamedTuple):
    row: int
    smiles: str
    reason: str
    detail: str

    def to_json(self) -> str:
        return json.dumps(self._asdict())


@dataclass
class Dataset:
    records: list[Record]
    task: str = "classification"
    skipped: list[Skipped] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> list[float]:
        return [r.label for r in self.records]

    def write_csv(self, fh: TextIO, smiles_column: str = "smiles", label_column: str = "label") -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([smiles_column, label_column])
        for r in self.records:
            label = int(r.label) if self.task == "classification" else r.label
            writer.writerow([r.smiles, label])

    def to_csv(self, path: str | Path, smiles_column: str = "smiles", label_column: str = "label") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            self.write_csv(fh, smiles_column, label_column)


def _parse_label(text: str, task: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"non-finite label {text!r}")
    if task == "classification":
        if value != int(value) or value < 0:
            raise ValueError(f"classification label must be a non-negative integer, got {text!r}")
        return int(value)
    return value


def load_csv(
    path: str | Path,
    task: str = "classification",
    smiles_column: str = "smiles",
    label_column: str = "label",
) -> Dataset:
    """Read a UTF-8 CSV; rows that fail to parse or validate go to ``Dataset.skipped``."""
    records: list[Record] = []
    skipped: list[Skipped] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for col in (smiles_column, label_column):
            if col not in fields:
                raise MissingColumn(f"{path}: no column {col!r} (have {fields})")
        for row_no, row in enumerate(reader, start=2):
            smiles = (row[smiles_column] or "").strip()
            try:
                mol = parse_smiles(smiles)
            except MolGraphError as exc:
                skipped.append(Skipped(row_no, smiles, type(exc).__name__, str(exc)))
                continue
            report = check_validity(mol)
            if not report.valid:
                skipped.append(Skipped(row_no, smiles, report.violations[0].reason, str(report.violations)))
                continue
            try:
                label = _parse_label(row[label_column] or "", task)
            except ValueError as exc:
                skipped.append(Skipped(row_no, smiles, "BadLabel", str(exc)))
                continue
            records.append(Record(smiles, mol, label))
    if not records:
        raise EmptyAfterFiltering(f"{path}: no valid rows ({len(skipped)} skipped)")
    return Dataset(records, task, skipped)


def write_skipped_report(skipped: Sequence[Skipped], path: str | Path) -> None:
    Path(path).write_text("".join(s.to_json() + "\n" for s in skipped), encoding="utf-8")


def split(
    d: Dataset,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle into train/val/test; val and test get rounded sizes, train the rest."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(d)
    if n < 10:
        raise TooSmall(f"need at least 10 records to split, have {n}")
    n_val = round(n * fractions[1])
    n_test = round(n * fractions[2])
    order = list(range(n))
    random.Random(seed).shuffle(order)
    train_idx = order[: n - n_val - n_test]
    val_idx = order[n - n_val - n_test : n - n_test]
    test_idx = order[n - n_test :]

    def sub(idx):
        return Dataset([d.records[i] for i in idx], d.task)

    return sub(train_idx), sub(val_idx), sub(test_idx)


def synth_molecule(
    rng: random.Random,
    max_atoms: int = 8,
    min_atoms: int = 2,
    n_prob: float = 0.1,
    raise_prob: float = 0.15,
    ring_prob: float = 0.05,
) -> Molecule:
    """Random growth walk from a lone carbon.

    Each step attaches one atom by a single bond, then possibly raises an
    existing bond's order or closes a ring. Nitrogen enters at most once and
    only as a terminal substituent (amine, imine or nitrile-like): nothing is
    attached to it and it never joins a ring.
    """
    others = [Element.C, Element.C, Element.C, Element.O, Element.O, Element.S, Element.F, Element.Cl]
    mol = Molecule((Element.C,))
    target = rng.randint(min_atoms, max_atoms)
    while len(mol) < target:
        grow = [
            a
            for a in enumerate_actions(mol, [Element.C])
            if isinstance(a, AddAtom) and mol.elements[a.attach_to] is not Element.N
        ]
        if not grow:
            break
        spot = rng.choice(grow).attach_to
        has_n = mol.count(Element.N) > 0
        element = Element.N if not has_n and rng.random() < n_prob else rng.choice(others)
        mol = apply_edit(mol, AddAtom(element, spot))
        r = rng.random()
        raises = [a for a in enumerate_actions(mol, []) if isinstance(a, SetBond)]
        if r < raise_prob:
            pool = [a for a in raises if mol.bond_order(a.u, a.v) > 0]
        elif r < raise_prob + ring_prob:
            pool = [
                a
                for a in raises
                if mol.bond_order(a.u, a.v) == 0 and Element.N not in (mol.elements[a.u], mol.elements[a.v])
            ]
        else:
            pool = []
        if pool:
            mol = apply_edit(mol, rng.choice(pool))
    return mol


def synth_task(kind: str, n: int, seed: int = 0, max_atoms: int = 8) -> Dataset:
    """Seeded synthetic dataset.

    ``contains_nitrogen`` is a binary task with classes alternated during
    sampling (rejection), so the balance is within one molecule of 50%.
    ``heavy_atom_count`` is a regression on the number of heavy atoms.
    """
    if kind not in SYNTH_KINDS:
        raise DataError(f"unknown synthetic task {kind!r}; choose from {SYNTH_KINDS}")
    if n < 20:
        raise TooSmall("synthetic tasks need n >= 20")
    rng = random.Random(seed)
    records: list[Record] = []
    seen: set[str] = set()
    attempts = 0
    while len(records) < n:
        attempts += 1
        if attempts > 200 * n:
            raise DataError("could not sample enough distinct molecules")
        mol = synth_molecule(rng, max_atoms)
        key = canonical_key(mol)
        if key in seen:
            continue
        if kind == "contains_nitrogen":
            label = int(mol.count(Element.N) > 0)
            if label != len(records) % 2:
                continue
        else:
            label = float(len(mol))
        seen.add(key)
        smiles = write_smiles(mol)
        # re-parse so the stored graph is numbered exactly as its SMILES reads
        records.append(Record(smiles, parse_smiles(smiles), label))
    task = "classification" if kind == "contains_nitrogen" else "regression"
    return Dataset(records, task)
