"""Training loops over synthetic multi-modal worlds.

The trainer owns three jobs:

  * building a world (latent space, modality views, dataset layout) from
    an ExperimentConfig and sampling train/test datasets from it,
  * the two-dataset loop: encode the four observed (modality, dataset)
    sides, extrapolate pseudo embeddings for each dataset's missing
    modality through the shared pivot, step AdamW on the combined
    objective,
  * the chained three-dataset loop, run as two stages: first align the
    pair of datasets sharing the first pivot, then bring in the third
    dataset and extrapolate across both hops.

Every epoch appends one JSON record to the log; checkpoints are written
at epoch boundaries so an interrupted run resumes bitwise-identically
(batch order is a pure function of seed and epoch, never of wall clock
or prior state).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffnet, losses, synthgen, xtrap
from .config import ExperimentConfig, temperature_scale
from .errors import DataError
from .linalg import NumericalFailure
from .losses import LossWeights, Side

# ablation arms: which loss weights each arm zeroes out
ARMS = {
    "full": {},
    "no_fro": {"w_fro": 0.0},
    "no_cons": {"w_sym": 0.0},
    "no_mox": {"w_mox": 0.0},
    "clip_only": {"w_sym": 0.0, "w_mox": 0.0},
}

# sub-stream tags under the experiment seed (DATA_STREAM namespaces all
# of these away from init and batching)
_WORLD_LATENT = 0
_WORLD_VIEWS = 1
_WORLD_SHIFTS = 2
_SPLIT_TAGS = {"train": 3, "test": 4}


def arm_config(cfg: ExperimentConfig, arm: str) -> ExperimentConfig:
    if arm not in ARMS:
        raise ValueError(f"unknown arm '{arm}'; choose from {sorted(ARMS)}")
    weights = dataclasses.replace(cfg.train.weights, **ARMS[arm])
    return dataclasses.replace(
        cfg, train=dataclasses.replace(cfg.train, weights=weights))


@dataclass(frozen=True)
class World:
    """Fixed generative structure shared by the train and test splits."""

    latent: synthgen.LatentSpec
    views: dict                 # modality -> ModalityViewSpec
    dataset_specs: tuple        # train-sized DatasetSpec per dataset
    test_specs: tuple


def _dataset_layout(cfg: ExperimentConfig):
    m_a, m_b, m_c = cfg.data.modalities
    if cfg.data.layout == "two_dataset":
        return [("d1", (m_a, m_b), m_c), ("d2", (m_b, m_c), m_a)]
    return [("d1", (m_a,), m_c), ("d2", (m_a, m_b), None), ("d3", (m_b, m_c), None)]


def build_world(cfg: ExperimentConfig) -> World:
    """Derive the generative world from the config, seeded by cfg.seed.

    Each dataset gets its own latent shift: a random direction scaled to
    norm shift_scale * within_class_std, so datasets overlap in class
    structure but not in raw position.
    """
    dc = cfg.data
    base = (cfg.seed, synthgen.DATA_STREAM)
    latent = synthgen.LatentSpec.random(
        dc.latent_dim, dc.num_classes, dc.within_class_std,
        dc.center_spread, seed=base + (_WORLD_LATENT,))
    views = {}
    for i, modality in enumerate(dc.modalities):
        views[modality] = synthgen.ModalityViewSpec.random(
            modality, dc.latent_dim, dc.raw_dims[i],
            seed=base + (_WORLD_VIEWS, i),
            nonlinearity=dc.view_nonlinearity, noise_std=dc.noise_std,
            offset_scale=dc.view_offset_scale)

    layout = _dataset_layout(cfg)
    specs = {"train": [], "test": []}
    for j, (ds_id, observable, hidden) in enumerate(layout):
        rng = synthgen.rng_from(base + (_WORLD_SHIFTS, j))
        direction = rng.normal(size=dc.latent_dim)
        norm = float(np.linalg.norm(direction))
        if norm < 1e-12:
            direction = np.zeros(dc.latent_dim)
            direction[0] = 1.0
            norm = 1.0
        shift = direction / norm * (dc.shift_scale * dc.within_class_std)
        for split, n in (("train", dc.samples_per_dataset), ("test", dc.test_samples)):
            specs[split].append(synthgen.DatasetSpec(
                dataset_id=ds_id, num_samples=n, latent_shift=shift,
                observable=observable, hidden_target=hidden))
    return World(latent=latent, views=views,
                 dataset_specs=tuple(specs["train"]),
                 test_specs=tuple(specs["test"]))


def make_datasets(world: World, cfg: ExperimentConfig, split: str = "train"):
    """Sample one split. Draws are independent across datasets and splits."""
    if split not in _SPLIT_TAGS:
        raise ValueError(f"split must be 'train' or 'test', got '{split}'")
    specs = world.dataset_specs if split == "train" else world.test_specs
    out = []
    for j, spec in enumerate(specs):
        out.append(synthgen.generate_dataset(
            world.latent, world.views, spec,
            seed=(cfg.seed, synthgen.DATA_STREAM, _SPLIT_TAGS[split], j)))
    return out


def encoder_specs(cfg: ExperimentConfig) -> dict:
    """One encoder per modality: raw_dim -> hidden_dims -> embed_dim."""
    specs = {}
    for i, modality in enumerate(cfg.data.modalities):
        dims = (cfg.data.raw_dims[i],) + tuple(cfg.encoder.hidden_dims) \
            + (cfg.encoder.embed_dim,)
        specs[modality] = diffnet.EncoderSpec(
            modality=modality, layer_dims=dims,
            nonlinearity=cfg.encoder.nonlinearity,
            temperature_scale=temperature_scale(cfg, modality))
    return specs


def phase_schedule(epoch: int, cfg: ExperimentConfig):
    """Effective loss weights and trainability for one epoch.

    The first pretrain_epochs run without the extrapolation term (the
    pseudo-inverse of a randomly initialized encoder is uninformative);
    the first stage1_epochs update only each encoder's final affine
    layer.
    """
    weights = cfg.train.weights
    if epoch < cfg.train.pretrain_epochs:
        weights = dataclasses.replace(weights, w_mox=0.0)
    return weights, epoch < cfg.train.stage1_epochs


@dataclass(frozen=True)
class TwoDatasetRoles:
    """Modality roles in the standard layout: datasets share one pivot."""

    d1_id: str
    d2_id: str
    pivot: str
    solo1: str    # observed only in dataset 1; dataset 2's missing modality
    solo2: str


def two_dataset_roles(d1, d2) -> TwoDatasetRoles:
    obs1, obs2 = set(d1.spec.observable), set(d2.spec.observable)
    if len(obs1) != 2 or len(obs2) != 2:
        raise DataError(
            f"two-dataset training needs two observed modalities each, got "
            f"{sorted(obs1)} and {sorted(obs2)}")
    shared = obs1 & obs2
    if len(shared) != 1:
        raise DataError(
            f"datasets must share exactly one pivot modality, share {sorted(shared)}")
    pivot = shared.pop()
    solo1 = (obs1 - {pivot}).pop()
    solo2 = (obs2 - {pivot}).pop()
    for ds, expected in ((d1, solo2), (d2, solo1)):
        hidden = ds.spec.hidden_target
        if hidden is not None and hidden != expected:
            raise DataError(
                f"dataset '{ds.spec.dataset_id}' hides '{hidden}' but the "
                f"layout implies its missing modality is '{expected}'")
    return TwoDatasetRoles(d1.spec.dataset_id, d2.spec.dataset_id,
                           pivot, solo1, solo2)


@dataclass(frozen=True)
class ChainRoles:
    """Modality roles in the chained layout d1 - d2 - d3."""

    ids: tuple        # (d1_id, d2_id, d3_id)
    pivot1: str       # shared by d1 and d2
    pivot2: str       # shared by d2 and d3
    target: str       # observed only in d3; d1's doubly-missing modality


def chain_roles(d1, d2, d3) -> ChainRoles:
    obs1, obs2, obs3 = (set(d.spec.observable) for d in (d1, d2, d3))
    if len(obs1) != 1 or len(obs2) != 2 or len(obs3) != 2:
        raise DataError(
            "chained training needs observed modality counts (1, 2, 2), got "
            f"({len(obs1)}, {len(obs2)}, {len(obs3)})")
    pivot1 = obs1.pop()
    if pivot1 not in obs2:
        raise DataError(f"dataset 2 must observe the first pivot '{pivot1}'")
    pivot2 = (obs2 - {pivot1}).pop()
    if pivot2 not in obs3:
        raise DataError(f"dataset 3 must observe the second pivot '{pivot2}'")
    target = (obs3 - {pivot2}).pop()
    hidden = d1.spec.hidden_target
    if hidden is not None and hidden != target:
        raise DataError(
            f"dataset '{d1.spec.dataset_id}' hides '{hidden}' but the chain "
            f"ends at '{target}'")
    return ChainRoles(
        ids=tuple(d.spec.dataset_id for d in (d1, d2, d3)),
        pivot1=pivot1, pivot2=pivot2, target=target)


def _check_dataset_dims(cfg: ExperimentConfig, datasets):
    dims = dict(zip(cfg.data.modalities, cfg.data.raw_dims))
    for ds in datasets:
        for modality in ds.spec.observable:
            if modality not in dims:
                raise DataError(
                    f"dataset '{ds.spec.dataset_id}' observes '{modality}', "
                    f"not one of the configured modalities {cfg.data.modalities}")
            width = ds.observed(modality).shape[1]
            if width != dims[modality]:
                raise DataError(
                    f"dataset '{ds.spec.dataset_id}' modality '{modality}' has "
                    f"{width} raw columns, config says {dims[modality]}")


def _encode_part(specs, store, part, modality):
    return diffnet.encode(specs[modality], store, part.raw[modality])


def _two_dataset_report(cfg, roles, specs, store, batch, weights):
    part1, part2 = batch.parts
    rel = cfg.train.pinv_rel_tol
    f_solo1 = _encode_part(specs, store, part1, roles.solo1)
    f_piv1 = _encode_part(specs, store, part1, roles.pivot)
    f_piv2 = _encode_part(specs, store, part2, roles.pivot)
    f_solo2 = _encode_part(specs, store, part2, roles.solo2)

    a1 = Side(roles.solo1, roles.d1_id, f_solo1, specs[roles.solo1].temperature_scale)
    b1 = Side(roles.pivot, roles.d1_id, f_piv1, specs[roles.pivot].temperature_scale)
    b2 = Side(roles.pivot, roles.d2_id, f_piv2, specs[roles.pivot].temperature_scale)
    c2 = Side(roles.solo2, roles.d2_id, f_solo2, specs[roles.solo2].temperature_scale)

    pseudo_c1 = pseudo_a2 = None
    if weights.w_mox > 0:
        # dataset 1's missing modality, through the pivot
        t_mod = xtrap.cross_modal_transition(
            f_solo2, f_piv2, rel, source=roles.pivot, dest=roles.solo2)
        xm_c1 = xtrap.pseudo_embed_x_mod(t_mod, f_piv1,
                                         target=(roles.d1_id, roles.solo2))
        t_dat = xtrap.cross_data_transition(
            f_piv1, f_piv2, rel, source=roles.d2_id, dest=roles.d1_id)
        xd_c1 = xtrap.pseudo_embed_x_data(t_dat, f_solo2,
                                          target=(roles.d1_id, roles.solo2))
        # dataset 2's missing modality, mirrored
        t_mod = xtrap.cross_modal_transition(
            f_solo1, f_piv1, rel, source=roles.pivot, dest=roles.solo1)
        xm_a2 = xtrap.pseudo_embed_x_mod(t_mod, f_piv2,
                                         target=(roles.d2_id, roles.solo1))
        t_dat = xtrap.cross_data_transition(
            f_piv2, f_piv1, rel, source=roles.d1_id, dest=roles.d2_id)
        xd_a2 = xtrap.pseudo_embed_x_data(t_dat, f_solo1,
                                          target=(roles.d2_id, roles.solo1))
        pseudo_c1 = (xm_c1, xd_c1)
        pseudo_a2 = (xm_a2, xd_a2)

    return losses.total_objective(a1, b1, b2, c2, cfg.train.tau, weights,
                                  pseudo_c1=pseudo_c1, pseudo_a2=pseudo_a2)


def _check_report(report, epoch, batch_index):
    for name, value in report.as_dict().items():
        if not math.isfinite(value):
            raise NumericalFailure(
                f"non-finite loss component '{name}' ({value}) at epoch "
                f"{epoch}, batch {batch_index}")


def _epoch_pass(cfg, datasets, store, report_fn, weights, mask, batch_epoch):
    """One optimization pass over the split; returns mean loss components."""
    batches = synthgen.make_batches(datasets, cfg.train.batch_size,
                                    cfg.seed, batch_epoch)
    if not batches:
        raise DataError(
            f"no full batch of size {cfg.train.batch_size} fits the datasets")
    sums = {}
    for bi, batch in enumerate(batches):
        report = report_fn(store, batch, weights)
        _check_report(report, batch_epoch, bi)
        grads = diffnet.backward(report.node, store)
        diffnet.optimizer_step(
            store, grads, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay,
            betas=(cfg.train.beta1, cfg.train.beta2), eps=cfg.train.eps,
            trainable=mask)
        for key, value in report.as_dict().items():
            sums[key] = sums.get(key, 0.0) + value
    return {key: value / len(batches) for key, value in sums.items()}


def _append_record(log, record, log_path):
    log.append(record)
    if log_path is not None:
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _maybe_resume(store, checkpoint_path, resume):
    if not (resume and checkpoint_path and os.path.exists(checkpoint_path)):
        return 0
    meta = diffnet.restore_store(store, diffnet.load_checkpoint(checkpoint_path))
    if "epoch" not in meta:
        raise DataError(f"checkpoint '{checkpoint_path}' lacks an epoch marker")
    return int(meta["epoch"][0]) + 1


def _save(store, checkpoint_path, epoch):
    if checkpoint_path is not None:
        diffnet.save_checkpoint(
            checkpoint_path,
            diffnet.checkpoint_entries(store, extra={"epoch": [float(epoch)]}))


def train(cfg: ExperimentConfig, datasets, *, log_path=None,
          checkpoint_path=None, resume=False, eval_fn=None):
    """Train encoders on two or three datasets; returns (store, log).

    datasets is the train split in layout order. eval_fn, if given, is
    called as eval_fn(store, epoch) every cfg.train.eval_every epochs
    and its dict is merged into that epoch's log record.
    """
    datasets = list(datasets)
    if len(datasets) == 3:
        return run_three_dataset(cfg, *datasets, log_path=log_path,
                                 checkpoint_path=checkpoint_path,
                                 resume=resume, eval_fn=eval_fn)
    if len(datasets) != 2:
        raise DataError(f"expected 2 or 3 datasets, got {len(datasets)}")
    _check_dataset_dims(cfg, datasets)
    roles = two_dataset_roles(*datasets)
    specs = encoder_specs(cfg)
    store = diffnet.build_store(
        [specs[m] for m in cfg.data.modalities], cfg.seed)
    start = _maybe_resume(store, checkpoint_path, resume)

    log = []
    for epoch in range(start, cfg.train.epochs):
        weights, final_only = phase_schedule(epoch, cfg)
        mask = store.trainable_mask(final_only) if final_only else None
        means = _epoch_pass(
            cfg, datasets, store,
            lambda st, b, w: _two_dataset_report(cfg, roles, specs, st, b, w),
            weights, mask, epoch)
        record = {"epoch": epoch,
                  "phase": "pretrain" if weights.w_mox == 0 else "mox",
                  **means}
        if eval_fn is not None and cfg.train.eval_every > 0 \
                and (epoch + 1) % cfg.train.eval_every == 0:
            record.update(eval_fn(store, epoch))
        _append_record(log, record, log_path)
        _save(store, checkpoint_path, epoch)
    return store, log


def _stage_a_report(cfg, roles, specs, store, batch, weights):
    """Chained stage A: align d1 and d2 over the first pivot.

    d1 observes only the pivot, so the contrastive layout degenerates to
    the two d2 sides repulsing the single d1 matrix, one symmetry pair,
    and a single-contrast extrapolation for d1's missing second-pivot
    modality.
    """
    part1, part2 = batch.parts[0], batch.parts[1]
    rel = cfg.train.pinv_rel_tol
    p1, p2 = roles.pivot1, roles.pivot2
    f_a1 = _encode_part(specs, store, part1, p1)
    f_a2 = _encode_part(specs, store, part2, p1)
    f_b2 = _encode_part(specs, store, part2, p2)
    s1 = specs[p1].temperature_scale
    s2 = specs[p2].temperature_scale
    d1_id, d2_id = roles.ids[0], roles.ids[1]

    clip = None
    if weights.w_clip > 0:
        sides = {
            (p1, d2_id): losses.clip_loss_one_side(
                f_a2, f_b2, [f_a1], cfg.train.tau, s1, s2, [s1]),
            (p2, d2_id): losses.clip_loss_one_side(
                f_b2, f_a2, [f_a1], cfg.train.tau, s2, s1, [s1]),
        }
        node = None
        for term in sides.values():
            node = term if node is None else ad.add(node, term)
        clip = (node, sides)

    sym = None
    if weights.w_sym > 0:
        sym = (losses.sym_cross_modal(f_a2, f_b2, s1, s2),
               losses.sym_cross_data(f_a2, f_b2, s1, s2))

    mox = []
    if weights.w_mox > 0:
        t_mod = xtrap.cross_modal_transition(f_b2, f_a2, rel, source=p1, dest=p2)
        xm_b1 = xtrap.pseudo_embed_x_mod(t_mod, f_a1, target=(d1_id, p2))
        t_dat = xtrap.cross_data_transition(f_a1, f_a2, rel,
                                            source=d2_id, dest=d1_id)
        xd_b1 = xtrap.pseudo_embed_x_data(t_dat, f_b2, target=(d1_id, p2))
        terms = losses.mox_loss_single(
            f_a1, xd_b1, (xm_b1, xd_b1), cfg.train.tau, weights.w_fro,
            given_scale=s1, pseudo_scale=s2)
        mox = [((p2, d1_id), terms)]

    return losses.combine_objective(weights, clip=clip, sym=sym, mox=mox)


def _stage_b_report(cfg, roles, specs, store, batch, weights):
    """Chained stage B: all three datasets, extrapolating across both hops.

    Contrastive sides cover both observed pairs, each repulsed by every
    matrix from the other datasets; the extrapolation chains d1's pivot
    through d2 and d3 to reach the target modality, with Frobenius
    consistency at both the intermediate and final steps.
    """
    part1, part2, part3 = batch.parts
    rel = cfg.train.pinv_rel_tol
    p1, p2, tgt = roles.pivot1, roles.pivot2, roles.target
    f_a1 = _encode_part(specs, store, part1, p1)
    f_a2 = _encode_part(specs, store, part2, p1)
    f_b2 = _encode_part(specs, store, part2, p2)
    f_b3 = _encode_part(specs, store, part3, p2)
    f_c3 = _encode_part(specs, store, part3, tgt)
    s1 = specs[p1].temperature_scale
    s2 = specs[p2].temperature_scale
    s3 = specs[tgt].temperature_scale
    d1_id, d2_id, d3_id = roles.ids
    tau = cfg.train.tau

    clip = None
    if weights.w_clip > 0:
        sides = {
            (p1, d2_id): losses.clip_loss_one_side(
                f_a2, f_b2, [f_a1, f_b3, f_c3], tau, s1, s2, [s1, s2, s3]),
            (p2, d2_id): losses.clip_loss_one_side(
                f_b2, f_a2, [f_a1, f_b3, f_c3], tau, s2, s1, [s1, s2, s3]),
            (p2, d3_id): losses.clip_loss_one_side(
                f_b3, f_c3, [f_a1, f_a2, f_b2], tau, s2, s3, [s1, s1, s2]),
            (tgt, d3_id): losses.clip_loss_one_side(
                f_c3, f_b3, [f_a1, f_a2, f_b2], tau, s3, s2, [s1, s1, s2]),
        }
        node = None
        for term in sides.values():
            node = term if node is None else ad.add(node, term)
        clip = (node, sides)

    sym = None
    if weights.w_sym > 0:
        sym = (ad.add(losses.sym_cross_modal(f_a2, f_b2, s1, s2),
                      losses.sym_cross_modal(f_b3, f_c3, s2, s3)),
               ad.add(losses.sym_cross_data(f_a2, f_b2, s1, s2),
                      losses.sym_cross_data(f_b3, f_c3, s2, s3)))

    mox = []
    if weights.w_mox > 0:
        chain = xtrap.chain_extrapolate(
            f_a1, f_a2, f_b2, f_b3, f_c3, rel,
            dataset_ids=roles.ids, modality_ids=(p1, p2, tgt))
        terms = losses.mox_loss_single(
            f_a1, chain.final_x_data,
            [(chain.mid_x_mod, chain.mid_x_data),
             (chain.final_x_mod, chain.final_x_data)],
            tau, weights.w_fro, given_scale=s1, pseudo_scale=s3)
        mox = [((tgt, d1_id), terms)]

    return losses.combine_objective(weights, clip=clip, sym=sym, mox=mox)


def run_three_dataset(cfg: ExperimentConfig, d1, d2, d3, *, log_path=None,
                      checkpoint_path=None, resume=False, eval_fn=None):
    """Two-stage chained training; returns (store, log).

    Stage A runs cfg.train.epochs over (d1, d2); stage B runs the same
    count over all three. Each stage applies the pretrain/stage1
    schedule to its local epoch index. Checkpoints store a global epoch
    so resume lands in the right stage.
    """
    _check_dataset_dims(cfg, (d1, d2, d3))
    roles = chain_roles(d1, d2, d3)
    specs = encoder_specs(cfg)
    store = diffnet.build_store(
        [specs[m] for m in cfg.data.modalities], cfg.seed)
    start = _maybe_resume(store, checkpoint_path, resume)

    epochs = cfg.train.epochs
    stages = (
        ("chain_a", (d1, d2), _stage_a_report),
        ("chain_b", (d1, d2, d3), _stage_b_report),
    )
    log = []
    for stage_index, (stage, stage_data, report) in enumerate(stages):
        for local in range(epochs):
            global_epoch = stage_index * epochs + local
            if global_epoch < start:
                continue
            weights, final_only = phase_schedule(local, cfg)
            mask = store.trainable_mask(final_only) if final_only else None
            means = _epoch_pass(
                cfg, stage_data, store,
                lambda st, b, w: report(cfg, roles, specs, st, b, w),
                weights, mask, global_epoch)
            record = {"epoch": global_epoch, "stage": stage,
                      "phase": "pretrain" if weights.w_mox == 0 else "mox",
                      **means}
            if eval_fn is not None and cfg.train.eval_every > 0 \
                    and (local + 1) % cfg.train.eval_every == 0:
                record.update(eval_fn(store, global_epoch))
            _append_record(log, record, log_path)
            _save(store, checkpoint_path, global_epoch)
    return store, log
