"""Training losses: reconstruction, contrastive alignment, entropy.

The combined objective drives adapter tuning:

    total = L_ent + alpha * L_pir + beta * L_ca

L_pir rebuilds each feature from the prototypes through its own
association row and penalizes the squared error against the original
feature, L_ca is a symmetric InfoNCE between prototypes and category
directions over cosine logits, and L_ent is the mean Shannon entropy of
the association rows. Gradients flow through V everywhere it appears
(map, prototypes, reconstruction, and the reconstruction target) unless
``stop_grad_target`` freezes the target copy.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as num
from .association import AssociationMap, Prototypes, association_map, estimate_prototypes
from .encoders import CategoryEmbeddings
from .errors import ConfigError, DimensionError


@dataclass
class LossBreakdown:
    """Loss components as plain floats plus the differentiable total.

    ``total_node`` is the graph node behind ``total``; differentiate that
    to adapt. The floats satisfy total = l_ent + alpha*l_pir + beta*l_ca.
    """

    l_ent: float
    l_pir: float
    l_ca: float
    total: float
    alpha: float
    beta: float
    total_node: object = None


def reconstruct(assoc: AssociationMap, protos: Prototypes):
    """V_hat_i = sum over categories k of A_norm(i, k) P_k."""
    nv = num.value_of(assoc.norm)
    pv = num.value_of(protos.p)
    if nv.shape[1] != pv.shape[0]:
        raise DimensionError(
            f"association has {nv.shape[1]} categories but {pv.shape[0]} prototypes"
        )
    return num.matmul(assoc.norm, protos.p)


def loss_pir(v_hat, v):
    """Mean over the batch of the squared reconstruction error."""
    hv, vv = num.value_of(v_hat), num.value_of(v)
    if hv.shape != vv.shape:
        raise DimensionError(f"shape mismatch {hv.shape} vs {vv.shape}")
    b = hv.shape[0]
    return num.mul(num.squared_norm(num.sub(v_hat, v)), 1.0 / b)


def loss_ca(protos, t, temperature=None):
    """Symmetric InfoNCE aligning prototype i with category direction i.

    Cosine logits; the optional temperature divides them (default: none,
    logits used as-is)."""
    p = protos.p if isinstance(protos, Prototypes) else protos
    tm = t.matrix if isinstance(t, CategoryEmbeddings) else t
    pv, tv = num.value_of(p), num.value_of(tm)
    if pv.shape[0] < 2:
        raise ConfigError(f"contrastive alignment needs M >= 2, got {pv.shape[0]}")
    if pv.shape[0] != tv.shape[0]:
        raise DimensionError(
            f"{pv.shape[0]} prototypes vs {tv.shape[0]} categories"
        )
    s = num.cosine_similarity_matrix(p, tm)
    if temperature is not None:
        if temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        s = num.mul(s, 1.0 / temperature)
    m = pv.shape[0]
    p2c = num.mul(num.total_sum(num.log(num.diag_part(num.row_softmax(s)))), -1.0 / m)
    c2p = num.mul(
        num.total_sum(num.log(num.diag_part(num.row_softmax(num.transpose(s))))),
        -1.0 / m,
    )
    return num.mul(num.add(p2c, c2p), 0.5)


def loss_entropy(assoc: AssociationMap):
    """Mean Shannon entropy of the association rows (0 log 0 = 0)."""
    b = num.value_of(assoc.norm).shape[0]
    return num.mul(num.total_sum(num.xlogx(assoc.norm)), -1.0 / b)


def total_objective(
    v,
    t,
    alpha: float = 1.0,
    beta: float = 1.0,
    temperature=None,
    stop_grad_target: bool = False,
) -> LossBreakdown:
    """Compose map -> prototypes -> reconstruction -> weighted losses.

    Zero-weighted terms are left out of the graph entirely, so alpha =
    beta = 0 gives a total node identical to the entropy node. Component
    values are always reported.
    """
    if alpha < 0 or beta < 0:
        raise ConfigError(f"loss weights must be >= 0, got alpha={alpha} beta={beta}")
    assoc = association_map(v, t)
    protos = estimate_prototypes(assoc, v)
    v_hat = reconstruct(assoc, protos)
    target = num.detach(v) if stop_grad_target else v
    ent = loss_entropy(assoc)
    pir = loss_pir(v_hat, target)
    ca = loss_ca(protos, t, temperature=temperature)
    total = ent
    if alpha != 0.0:
        total = num.add(total, num.mul(pir, alpha))
    if beta != 0.0:
        total = num.add(total, num.mul(ca, beta))
    as_float = lambda x: float(num.value_of(x))
    return LossBreakdown(
        l_ent=as_float(ent),
        l_pir=as_float(pir),
        l_ca=as_float(ca),
        total=as_float(total),
        alpha=alpha,
        beta=beta,
        total_node=total,
    )
