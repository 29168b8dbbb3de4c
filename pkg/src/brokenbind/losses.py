"""Objective terms: contrastive pulls, symmetry penalties, extrapolation.

Every public function returns a graph node (autodiff.Var); call float()
on it for the number. All similarity computations share one convention:
embedding rows are unit-norm, the per-modality temperature scales
multiply the raw dot products, and the global tau divides them.

The total objective over one batch is

    w_clip * L_clip  +  w_sym * (L_sym_xmod + L_sym_xdata)
      +  w_mox * (L_mox_contrast + w_fro * R_fro)

where L_clip sums one side per (modality, dataset) pair, the symmetry
terms cover both within-dataset pairs, and the extrapolation term
contrasts each dataset's given modalities against the x-data pseudo
embeddings of its missing one, with the Frobenius consistency
regularizer tying the two pseudo paths together. Zero-weighted groups
are skipped structurally, so e.g. a run with w_mox = 0 builds exactly
the graph of a contrastive-only run.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .xtrap import PseudoEmbeddings


@dataclass(frozen=True)
class LossWeights:
    w_clip: float = 1.0
    w_sym: float = 1.0
    w_mox: float = 1.0
    w_fro: float = 1.0

    def __post_init__(self):
        for field_name in ("w_clip", "w_sym", "w_mox", "w_fro"):
            if getattr(self, field_name) < 0:
                raise ValueError(f"{field_name} must be nonnegative")


@dataclass(frozen=True)
class Side:
    """One (modality, dataset) embedding matrix with its similarity scale."""

    modality: str
    dataset: str
    emb: object          # B x d, Var or ndarray
    scale: float = 1.0

    @property
    def tag(self):
        return (self.modality, self.dataset)


@dataclass(frozen=True)
class LossReport:
    """Component values (unweighted) plus the weighted total and its node."""

    clip: float
    sym_cross_modal: float
    sym_cross_data: float
    mox_contrastive: float
    fro_reg: float
    total: float
    per_side: dict
    weights: LossWeights
    node: ad.Var

    def as_dict(self) -> dict:
        out = {
            "clip": self.clip,
            "sym_cross_modal": self.sym_cross_modal,
            "sym_cross_data": self.sym_cross_data,
            "mox_contrastive": self.mox_contrastive,
            "fro_reg": self.fro_reg,
            "total": self.total,
        }
        for (modality, dataset), value in sorted(self.per_side.items()):
            out[f"side/{modality}@{dataset}"] = value
        return out


def _batch_rows(x) -> int:
    return ad.value_of(x).shape[0]


def _check_tau(tau: float):
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")


def _pull_minus_push(sims: ad.Var, coef: float) -> ad.Var:
    # coef * (sum of row log-sum-exps - sum of diagonal): the negative
    # log-softmax of the positives, already summed over the batch
    return ad.scale(
        ad.sub(ad.sum_all(ad.logsumexp_rows(sims)), ad.sum_all(ad.diag_part(sims))),
        coef,
    )


def clip_loss_one_side(anchor, positive, other_dataset_mods, tau: float,
                       anchor_scale: float = 1.0, positive_scale: float = 1.0,
                       other_scales=None) -> ad.Var:
    """Contrastive loss for one anchor side.

    Pulls anchor row i toward positive row i against the other positive
    rows, and pushes the anchor away from every instance of each
    other-dataset matrix. With R repulsion matrices the three terms
    share the coefficient 1/((1+R)*B); the standard two-dataset setting
    has R = 2, giving 1/(3B) per term.
    """
    _check_tau(tau)
    b = _batch_rows(anchor)
    if _batch_rows(positive) != b:
        raise ValueError(
            f"anchor has {b} rows but positive has {_batch_rows(positive)}"
        )
    others = list(other_dataset_mods)
    if other_scales is None:
        other_scales = [1.0] * len(others)
    if len(other_scales) != len(others):
        raise ValueError("one scale per repulsion matrix required")

    coef = 1.0 / ((1 + len(others)) * b)
    sims = ad.scale(ad.matmul(ad.as_var(anchor), ad.transpose(positive)),
                    anchor_scale * positive_scale / tau)
    loss = _pull_minus_push(sims, coef)
    for other, s in zip(others, other_scales):
        rep = ad.scale(ad.matmul(ad.as_var(anchor), ad.transpose(other)),
                       anchor_scale * s / tau)
        loss = ad.add(loss, ad.scale(ad.sum_all(ad.logsumexp_rows(rep)), coef))
    return loss


def total_clip_loss(a1: Side, b1: Side, b2: Side, c2: Side, tau: float):
    """Sum of the four one-side losses; returns (total node, per-side nodes).

    Each side's positive is its within-dataset partner; its repulsion
    matrices are the two sides of the other dataset.
    """
    layout = [
        (a1, b1, (b2, c2)),
        (b1, a1, (b2, c2)),
        (b2, c2, (a1, b1)),
        (c2, b2, (a1, b1)),
    ]
    per_side = {}
    total = None
    for anchor, positive, others in layout:
        node = clip_loss_one_side(
            anchor.emb, positive.emb, [o.emb for o in others], tau,
            anchor_scale=anchor.scale, positive_scale=positive.scale,
            other_scales=[o.scale for o in others],
        )
        per_side[anchor.tag] = node
        total = node if total is None else ad.add(total, node)
    return total, per_side


def sym_cross_modal(fa, fb, scale_a: float = 1.0, scale_b: float = 1.0) -> ad.Var:
    """(1/B) * sum_ij (<fa_i, fb_j> - <fa_j, fb_i>)^2."""
    b = _batch_rows(fa)
    if ad.value_of(fa).shape != ad.value_of(fb).shape:
        raise ValueError("cross-modal symmetry needs equal-shape sides")
    sims = ad.scale(ad.matmul(ad.as_var(fa), ad.transpose(fb)), scale_a * scale_b)
    return ad.scale(ad.sum_all(ad.square(ad.sub(sims, ad.transpose(sims)))), 1.0 / b)


def sym_cross_data(fa, fb, scale_a: float = 1.0, scale_b: float = 1.0) -> ad.Var:
    """(1/B) * squared difference of the two within-side Gram matrices."""
    b = _batch_rows(fa)
    if _batch_rows(fb) != b:
        raise ValueError("cross-data symmetry needs equal batch sizes")
    ga = ad.scale(ad.matmul(ad.as_var(fa), ad.transpose(fa)), scale_a * scale_a)
    gb = ad.scale(ad.matmul(ad.as_var(fb), ad.transpose(fb)), scale_b * scale_b)
    return ad.scale(ad.sum_all(ad.square(ad.sub(ga, gb))), 1.0 / b)


def total_sym_loss(a1: Side, b1: Side, b2: Side, c2: Side):
    """Both symmetry penalties on both within-dataset pairs.

    Returns (cross_modal node, cross_data node), kept separate for
    reporting.
    """
    xmod = ad.add(sym_cross_modal(a1.emb, b1.emb, a1.scale, b1.scale),
                  sym_cross_modal(b2.emb, c2.emb, b2.scale, c2.scale))
    xdata = ad.add(sym_cross_data(a1.emb, b1.emb, a1.scale, b1.scale),
                   sym_cross_data(b2.emb, c2.emb, b2.scale, c2.scale))
    return xmod, xdata


def _pseudo_values(p, expected_path: str):
    if isinstance(p, PseudoEmbeddings):
        if p.path != expected_path:
            raise ValueError(f"expected {expected_path} pseudo embeddings, got {p.path}")
        return p.values
    return p


def mox_contrast(given, pseudo_values, tau: float, coef: float,
                 sim_scale: float = 1.0) -> ad.Var:
    """One contrastive pull of a given modality toward pseudo embeddings.

    Pseudo rows are not unit-norm; the cosine normalizes them per pair
    (the given rows already are unit).
    """
    _check_tau(tau)
    pseudo_unit = ad.unit_rows(ad.as_var(pseudo_values))
    sims = ad.scale(ad.matmul(ad.as_var(given), ad.transpose(pseudo_unit)),
                    sim_scale / tau)
    return _pull_minus_push(sims, coef)


@dataclass(frozen=True)
class MoxTerms:
    total: ad.Var        # contrast + w_fro * fro (fro omitted when w_fro = 0)
    contrast: ad.Var
    fro: ad.Var


def _fro_node(fro_pair) -> ad.Var:
    x_mod = _pseudo_values(fro_pair[0], "x_mod")
    x_data = _pseudo_values(fro_pair[1], "x_data")
    return ad.sum_all(ad.square(ad.sub(ad.as_var(x_mod), ad.as_var(x_data))))


def mox_loss_one_target(given1, given2, pseudo, fro_pair, tau: float,
                        w_fro: float = 1.0, given1_scale: float = 1.0,
                        given2_scale: float = 1.0,
                        pseudo_scale: float = 1.0) -> MoxTerms:
    """Extrapolation loss for one missing modality.

    Both of the dataset's given modalities contrast against the x-data
    pseudo embeddings with coefficient 1/(2B) each; the Frobenius term
    penalizes disagreement between the raw (unnormalized) x-mod and
    x-data paths.
    """
    pv = _pseudo_values(pseudo, "x_data")
    b = _batch_rows(pv)
    if _batch_rows(given1) != b or _batch_rows(given2) != b:
        raise ValueError("given sides and pseudo embeddings need equal batch sizes")
    coef = 1.0 / (2.0 * b)
    contrast = ad.add(
        mox_contrast(given1, pv, tau, coef, given1_scale * pseudo_scale),
        mox_contrast(given2, pv, tau, coef, given2_scale * pseudo_scale),
    )
    fro = _fro_node(fro_pair)
    total = contrast if w_fro == 0 else ad.add(contrast, ad.scale(fro, w_fro))
    return MoxTerms(total=total, contrast=contrast, fro=fro)


def mox_loss_single(given, pseudo, fro_pair, tau: float, w_fro: float = 1.0,
                    given_scale: float = 1.0, pseudo_scale: float = 1.0) -> MoxTerms:
    """Extrapolation loss when the destination dataset has one modality.

    A single contrastive pull with coefficient 1/B (used by the chained
    three-dataset setting). fro_pair may hold several (x_mod, x_data)
    pairs worth of consistency; pass a list of pairs to sum them.
    """
    pv = _pseudo_values(pseudo, "x_data")
    b = _batch_rows(pv)
    contrast = mox_contrast(given, pv, tau, 1.0 / b, given_scale * pseudo_scale)
    pairs = fro_pair if isinstance(fro_pair, list) else [fro_pair]
    fro = _fro_node(pairs[0])
    for extra in pairs[1:]:
        fro = ad.add(fro, _fro_node(extra))
    total = contrast if w_fro == 0 else ad.add(contrast, ad.scale(fro, w_fro))
    return MoxTerms(total=total, contrast=contrast, fro=fro)


def combine_objective(weights: LossWeights, clip=None, sym=None,
                      mox=()) -> LossReport:
    """Weighted sum of prebuilt term groups.

    clip: (total node, {side tag: node}); sym: (xmod node, xdata node);
    mox: sequence of ((modality, dataset) tag, MoxTerms). Groups whose
    weight is zero must simply not be passed (structural skip); groups
    whose weight is positive are required.
    """
    per_side = {}
    terms = []
    clip_val = sxm_val = sxd_val = mox_val = fro_val = 0.0

    if weights.w_clip > 0:
        if clip is None:
            raise ValueError("w_clip > 0 requires clip terms")
        clip_node, clip_sides = clip
        clip_val = float(clip_node)
        per_side.update({tag: float(node) for tag, node in clip_sides.items()})
        terms.append(ad.scale(clip_node, weights.w_clip))

    if weights.w_sym > 0:
        if sym is None:
            raise ValueError("w_sym > 0 requires symmetry terms")
        xmod, xdata = sym
        sxm_val = float(xmod)
        sxd_val = float(xdata)
        terms.append(ad.scale(ad.add(xmod, xdata), weights.w_sym))

    if weights.w_mox > 0:
        if not mox:
            raise ValueError("w_mox > 0 requires extrapolation terms")
        mox_node = None
        for tag, mt in mox:
            mox_val += float(mt.contrast)
            fro_val += float(mt.fro)
            per_side[tag] = float(mt.total)
            mox_node = mt.total if mox_node is None else ad.add(mox_node, mt.total)
        terms.append(ad.scale(mox_node, weights.w_mox))

    if not terms:
        raise ValueError("all loss weights are zero; nothing to optimize")
    node = terms[0]
    for t in terms[1:]:
        node = ad.add(node, t)

    return LossReport(
        clip=clip_val,
        sym_cross_modal=sxm_val,
        sym_cross_data=sxd_val,
        mox_contrastive=mox_val,
        fro_reg=fro_val,
        total=float(node),
        per_side=per_side,
        weights=weights,
        node=node,
    )


def total_objective(a1: Side, b1: Side, b2: Side, c2: Side, tau: float,
                    weights: LossWeights, pseudo_c1=None,
                    pseudo_a2=None) -> LossReport:
    """Assemble the full two-dataset batch objective.

    pseudo_c1 / pseudo_a2 are (x_mod, x_data) pairs for dataset 1's and
    dataset 2's missing modality; they are required exactly when
    weights.w_mox > 0. The report carries unweighted component values;
    LossReport.node is the weighted total used for backpropagation.
    """
    clip = total_clip_loss(a1, b1, b2, c2, tau) if weights.w_clip > 0 else None
    sym = total_sym_loss(a1, b1, b2, c2) if weights.w_sym > 0 else None

    mox = []
    if weights.w_mox > 0:
        if pseudo_c1 is None or pseudo_a2 is None:
            raise ValueError("w_mox > 0 requires pseudo embeddings for both targets")
        mox_c1 = mox_loss_one_target(
            b1.emb, a1.emb, pseudo_c1[1], pseudo_c1, tau, weights.w_fro,
            given1_scale=b1.scale, given2_scale=a1.scale,
            pseudo_scale=_target_scale(pseudo_c1[1], (a1, b1, b2, c2)),
        )
        mox_a2 = mox_loss_one_target(
            b2.emb, c2.emb, pseudo_a2[1], pseudo_a2, tau, weights.w_fro,
            given1_scale=b2.scale, given2_scale=c2.scale,
            pseudo_scale=_target_scale(pseudo_a2[1], (a1, b1, b2, c2)),
        )
        mox = [(_target_tag(pseudo_c1[1]), mox_c1), (_target_tag(pseudo_a2[1]), mox_a2)]

    return combine_objective(weights, clip=clip, sym=sym, mox=mox)


def _target_tag(pseudo) -> tuple:
    # PseudoEmbeddings stores (dataset, modality); per_side keys are
    # (modality, dataset)
    if isinstance(pseudo, PseudoEmbeddings) and pseudo.target != ("", ""):
        return (pseudo.target[1], pseudo.target[0])
    return ("pseudo", "?")


def _target_scale(pseudo, sides) -> float:
    """Temperature scale for a pseudo target: that of the modality it mimics."""
    if isinstance(pseudo, PseudoEmbeddings):
        _, modality = pseudo.target
        for side in sides:
            if side.modality == modality:
                return side.scale
    return 1.0
