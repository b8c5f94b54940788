from meg.chem.actions import (
    AddAtom,
    EditAction,
    InvalidMolecule,
    NoOp,
    RemoveOrDowngradeBond,
    SetBond,
    action_signature,
    enumerate_actions,
)
from meg.chem.canon import canonical_key
from meg.chem.molgraph import (
    ELEMENTS,
    Atom,
    AtomOutOfRange,
    Bond,
    Element,
    IllegalAction,
    MolGraphError,
    Molecule,
    ValidityReport,
    apply_edit,
    check_validity,
    free_valence,
)
from meg.chem.smiles import (
    AromaticUnsupported,
    SmilesError,
    UnbalancedParenthesis,
    UnclosedRing,
    UnknownSymbol,
    ValenceViolation,
    parse_smiles,
    write_smiles,
)
