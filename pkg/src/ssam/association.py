"""Soft prototype estimation from a batch of features.

Given batch features V (|B| x D) and fixed category directions T (M x D),
the association map is the cosine matrix A(i, j) = cos(V_i, T_j) with a
per-row softmax A_norm. Each category's prototype is the A_norm-weighted
average of the batch features for that category's column, so prototypes
always live in the convex hull of the batch. Everything is computed from
the current batch alone; no state is carried between batches.

All outputs are graph nodes when V is a graph node, so the downstream
losses differentiate through both the map and the prototypes.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as num
from .encoders import CategoryEmbeddings
from .errors import DimensionError


@dataclass
class AssociationMap:
    """raw: |B| x M cosine matrix in [-1, 1]; norm: its row softmax."""

    raw: object
    norm: object

    @property
    def batch_size(self) -> int:
        return num.value_of(self.norm).shape[0]

    @property
    def num_categories(self) -> int:
        return num.value_of(self.norm).shape[1]


@dataclass
class Prototypes:
    """p: M x D prototype matrix; mass: the M column sums of A_norm."""

    p: object
    mass: object

    @property
    def num_categories(self) -> int:
        return num.value_of(self.p).shape[0]


def _matrix_of(t):
    return t.matrix if isinstance(t, CategoryEmbeddings) else t


def association_map(v, t) -> AssociationMap:
    """Cosine association between batch features and category directions,
    with the row-stochastic normalization used by every loss."""
    raw = num.cosine_similarity_matrix(v, _matrix_of(t))
    return AssociationMap(raw=raw, norm=num.row_softmax(raw))


def estimate_prototypes(assoc: AssociationMap, v) -> Prototypes:
    """P_j = sum_k A_norm(k, j) V_k / sum_k A_norm(k, j).

    The softmax keeps every column sum strictly positive, so the division
    is always defined and the weights A_norm(., j) / mass_j are a convex
    combination.
    """
    norm = assoc.norm
    nv, vv = num.value_of(norm), num.value_of(v)
    if nv.shape[0] != vv.shape[0]:
        raise DimensionError(
            f"association rows {nv.shape[0]} != batch rows {vv.shape[0]}"
        )
    mass = num.sum_axis(norm, axis=0)
    weighted = num.matmul(num.transpose(norm), v)
    m = nv.shape[1]
    p = num.div(weighted, num.reshape(mass, (m, 1)))
    return Prototypes(p=p, mass=mass)
