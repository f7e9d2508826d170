"""Embedding-space evaluation: cosine scoring, cross-similarity matrices,
diagonal dominance, and automated ABX selection.

The ABX here is an embedding-space proxy (argmax cosine), not the
perceptual forced-choice test it is named after.
"""

from dataclasses import dataclass

import numpy as np

from .aggregation import SpeakerEmbedding
from .errors import DimMismatch, LabelMismatch, ZeroNorm


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    row_labels: list
    col_labels: list


def _vec(e):
    return e.vector if isinstance(e, SpeakerEmbedding) else np.asarray(e, dtype=np.float64)


def cosine(a, b) -> float:
    va, vb = _vec(a), _vec(b)
    if va.shape != vb.shape:
        raise DimMismatch("dims %s vs %s" % (va.shape, vb.shape))
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("cosine undefined for zero-norm embedding")
    return float(np.dot(va, vb) / (na * nb))


def cross_similarity(rows, cols, row_labels=None, col_labels=None) -> SimilarityMatrix:
    """Pairwise cosine matrix between two embedding lists."""
    if not rows or not cols:
        raise DimMismatch("empty embedding list")
    values = np.array([[cosine(r, c) for c in cols] for r in rows])
    return SimilarityMatrix(
        values,
        list(row_labels) if row_labels is not None else list(range(len(rows))),
        list(col_labels) if col_labels is not None else list(range(len(cols))),
    )


def diagonal_dominance(m: SimilarityMatrix) -> float:
    """Fraction of rows whose best-matching column has the row's label."""
    if sorted(set(m.row_labels)) != sorted(m.col_labels):
        raise LabelMismatch("row/col label sets differ or columns repeat a label")
    hits = 0
    for i, label in enumerate(m.row_labels):
        if m.col_labels[int(np.argmax(m.values[i]))] == label:
            hits += 1
    return hits / len(m.row_labels)


def abx_select(reference, candidates) -> int:
    """Index of the candidate closest (cosine) to the reference.

    Ties break toward the lowest index.
    """
    if len(candidates) < 2:
        raise DimMismatch("need at least 2 candidates")
    sims = [cosine(reference, c) for c in candidates]
    return int(np.argmax(sims))


def matrix_to_csv(m: SimilarityMatrix) -> str:
    lines = ["," + ",".join(str(c) for c in m.col_labels)]
    for label, row in zip(m.row_labels, m.values):
        lines.append(str(label) + "," + ",".join("%.9g" % v for v in row))
    return "\n".join(lines) + "\n"


def matrix_to_pgm(m: SimilarityMatrix) -> bytes:
    """Binary P5 PGM, [-1, 1] mapped affinely onto [0, 255]."""
    h, w = m.values.shape
    pix = np.clip(np.round((m.values + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return ("P5\n%d %d\n255\n" % (w, h)).encode() + pix.tobytes()
