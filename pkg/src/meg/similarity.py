"""Similarity between an original molecule and a candidate counterfactual."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from meg.chem.molgraph import Molecule
from meg.fingerprint import DEFAULT_RADIUS, DEFAULT_WIDTH, morgan_fingerprint, tanimoto
from meg.gnn import PredictorModel, embed


class ZeroVector(ValueError):
    pass


class WidthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityWeights:
    alpha_tanimoto: float = 0.5
    alpha_cosine: float = 0.5

    def __post_init__(self) -> None:
        for w in (self.alpha_tanimoto, self.alpha_cosine):
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"similarity weights must lie in [0, 1], got {w}")
        if abs(self.alpha_tanimoto + self.alpha_cosine - 1.0) > 1e-9:
            raise ValueError("similarity weights must sum to 1")


@dataclass(frozen=True)
class FingerprintConfig:
    radius: int = DEFAULT_RADIUS
    width: int = DEFAULT_WIDTH


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise WidthMismatch(f"{a.shape} != {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def combine(tanimoto_score: float, cosine_score: float, w: SimilarityWeights) -> float:
    """Convex combination; the cosine term is floored at 0 first."""
    return w.alpha_tanimoto * tanimoto_score + w.alpha_cosine * max(cosine_score, 0.0)


def combined_similarity(
    m: Molecule,
    m2: Molecule,
    model: PredictorModel,
    w: SimilarityWeights = SimilarityWeights(),
    fp_cfg: FingerprintConfig = FingerprintConfig(),
) -> float:
    t = tanimoto(morgan_fingerprint(m, fp_cfg.radius, fp_cfg.width), morgan_fingerprint(m2, fp_cfg.radius, fp_cfg.width))
    if w.alpha_cosine == 0.0:
        return combine(t, 0.0, w)
    try:
        c = cosine(embed(model, m), embed(model, m2))
    except ZeroVector:
        # an all-zero embedding (every ReLU dead) carries no signal
        c = 1.0 if m == m2 else 0.0
    return combine(t, c, w)
