"""Modality extrapolation: transition matrices and pseudo embeddings.

Within a batch, two datasets contribute equal numbers of rows per side.
The pivot modality (observed in both datasets) carries two instance-
space relationships, each realized as a B x B transition matrix:

  cross-modal   W = F_target_src  . pinv(F_pivot_src)
  cross-data    W = F_pivot_dst   . pinv(F_pivot_src)

Applying them yields the two pseudo-embedding paths for the modality
missing from the destination dataset:

  x-mod   W_cross_modal . F_pivot_dst
  x-data  W_cross_data  . F_target_src

The pseudo-inverse is always computed on plain values and wrapped as a
gradient-less constant, so backpropagation treats it as fixed. The
x-data path is the one fed to the contrastive objective; x-mod exists
for the consistency regularizer. Everything here accepts either graph
nodes (training) or bare arrays (evaluation, oracles); outputs are
graph nodes whenever any input is one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import linalg


def _mm(a, b):
    # matmul that stays in plain numpy unless a graph node is involved
    if isinstance(a, ad.Var) or isinstance(b, ad.Var):
        return ad.matmul(ad.as_var(a), ad.as_var(b))
    return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)


def _rows(x) -> int:
    return ad.value_of(x).shape[0]


def _check_equal_rows(**named) -> int:
    counts = {name: _rows(x) for name, x in named.items()}
    if len(set(counts.values())) != 1:
        raise ValueError(f"per-dataset batch rows must match, got {counts}")
    return next(iter(counts.values()))


@dataclass(frozen=True)
class TransitionMatrix:
    """Instance-space transition built from a frozen pseudo-inverse."""

    kind: str                  # "cross_modal" or "cross_data"
    w: object                  # B x B, Var or ndarray
    source: str = ""
    dest: str = ""
    frozen: bool = True


@dataclass(frozen=True)
class PseudoEmbeddings:
    """Synthesized embeddings standing in for an unobserved modality."""

    path: str                  # "x_mod" or "x_data"
    target: tuple              # (dataset id, modality id)
    values: object             # B x d, Var or ndarray


@dataclass(frozen=True)
class MixWeights:
    """Unconstrained combination weights (extrapolation allows any reals)."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 2 or not np.isfinite(w).all():
            raise ValueError("mix weights must be a finite 2-D matrix")
        object.__setattr__(self, "w", w)


def interpolate(f1, f2, lam: float) -> np.ndarray:
    """lam*f1 + (1-lam)*f2; lam outside [0,1] extrapolates."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ValueError(f"shape mismatch: {f1.shape} vs {f2.shape}")
    return lam * f1 + (1.0 - lam) * f2


def multi_extrapolate(w, f):
    """Rows of the output are weighted combinations of the rows of f."""
    if isinstance(w, MixWeights):
        w = w.w
    if ad.value_of(w).shape[1] != _rows(f):
        raise ValueError(
            f"weights {ad.value_of(w).shape} cannot combine {_rows(f)} rows"
        )
    return _mm(w, f)


def _transition(kind, numerator, f_pivot_src, rel_tol, source, dest):
    _check_equal_rows(numerator=numerator, pivot_src=f_pivot_src)
    pivot_pinv = linalg.pinv(ad.value_of(f_pivot_src), rel_tol)
    if isinstance(numerator, ad.Var) or isinstance(f_pivot_src, ad.Var):
        w = ad.matmul(ad.as_var(numerator), ad.const(pivot_pinv))
    else:
        w = np.asarray(numerator, dtype=np.float64) @ pivot_pinv
    return TransitionMatrix(kind=kind, w=w, source=source, dest=dest, frozen=True)


def cross_modal_transition(f_target_src, f_pivot_src, rel_tol: float = 1e-12,
                           source: str = "", dest: str = "") -> TransitionMatrix:
    """Pivot -> target transition within the source dataset."""
    return _transition("cross_modal", f_target_src, f_pivot_src, rel_tol,
                       source, dest)


def cross_data_transition(f_pivot_dst, f_pivot_src, rel_tol: float = 1e-12,
                          source: str = "", dest: str = "") -> TransitionMatrix:
    """Source-dataset -> destination-dataset transition over the pivot."""
    return _transition("cross_data", f_pivot_dst, f_pivot_src, rel_tol,
                       source, dest)


def pseudo_embed_x_mod(trans: TransitionMatrix, f_pivot_dst,
                       target=("", "")) -> PseudoEmbeddings:
    """Cross-modal path: map the destination pivot through pivot->target."""
    if trans.kind != "cross_modal":
        raise ValueError(f"expected a cross_modal transition, got {trans.kind!r}")
    _check_equal_rows(transition=trans.w, pivot_dst=f_pivot_dst)
    return PseudoEmbeddings(path="x_mod", target=tuple(target),
                            values=_mm(trans.w, f_pivot_dst))


def pseudo_embed_x_data(trans: TransitionMatrix, f_target_src,
                        target=("", "")) -> PseudoEmbeddings:
    """Cross-data path: carry source-dataset target rows across datasets.

    Row i is the multi-extrapolation of the source target rows with
    weights given by row i of the transition.
    """
    if trans.kind != "cross_data":
        raise ValueError(f"expected a cross_data transition, got {trans.kind!r}")
    _check_equal_rows(transition=trans.w, target_src=f_target_src)
    return PseudoEmbeddings(path="x_data", target=tuple(target),
                            values=_mm(trans.w, f_target_src))


@dataclass(frozen=True)
class ChainedExtrapolation:
    """Three-dataset result: intermediate pivot plus final target."""

    mid_x_mod: PseudoEmbeddings
    mid_x_data: PseudoEmbeddings
    final_x_mod: PseudoEmbeddings
    final_x_data: PseudoEmbeddings


def chain_extrapolate(f_a1, f_a2, f_b2, f_b3, f_c3, rel_tol: float = 1e-12,
                      dataset_ids=("d1", "d2", "d3"),
                      modality_ids=("m_a", "m_b", "m_c")) -> ChainedExtrapolation:
    """Two-step extrapolation across three datasets.

    Dataset 1 observes only modality a, dataset 2 observes (a, b),
    dataset 3 observes (b, c). Step one extrapolates b into dataset 1
    over pivot a; its x-data result then acts as dataset 1's pivot-b
    embeddings for step two, which extrapolates c over pivot b. Both
    steps are literal compositions of the two-dataset constructions, so
    gradients flow through every encoder output while every
    pseudo-inverse stays frozen.
    """
    d1, d2, d3 = dataset_ids
    ma, mb, mc = modality_ids
    _check_equal_rows(a1=f_a1, a2=f_a2, b2=f_b2, b3=f_b3, c3=f_c3)

    t_mod_1 = cross_modal_transition(f_b2, f_a2, rel_tol, source=mb, dest=ma)
    mid_x_mod = pseudo_embed_x_mod(t_mod_1, f_a1, target=(d1, mb))
    t_dat_1 = cross_data_transition(f_a1, f_a2, rel_tol, source=d2, dest=d1)
    mid_x_data = pseudo_embed_x_data(t_dat_1, f_b2, target=(d1, mb))

    t_mod_2 = cross_modal_transition(f_c3, f_b3, rel_tol, source=mc, dest=mb)
    final_x_mod = pseudo_embed_x_mod(t_mod_2, mid_x_data.values, target=(d1, mc))
    t_dat_2 = cross_data_transition(mid_x_data.values, f_b3, rel_tol,
                                    source=d3, dest=d1)
    final_x_data = pseudo_embed_x_data(t_dat_2, f_c3, target=(d1, mc))

    return ChainedExtrapolation(mid_x_mod=mid_x_mod, mid_x_data=mid_x_data,
                                final_x_mod=final_x_mod, final_x_data=final_x_data)
