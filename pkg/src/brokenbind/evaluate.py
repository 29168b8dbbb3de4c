"""Retrieval scoring, extrapolation fidelity, and experiment sweeps.

Retrieval follows the class-relevance convention: a gallery item is
relevant to a query iff they share a synthetic class label. Queries with
no relevant gallery item are excluded with a logged warning instead of
scoring zero, so subsampling a class cannot silently deflate the mean.

A modality flow names the evaluation path begin-pivot(s)-target, e.g.
"m_a-m_b-m_c": encode begin-modality test rows as queries and rank the
encoded ground truth of the (normally hidden) target modality.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import diffnet, synthgen, trainer, xtrap
from .config import ExperimentConfig
from .errors import DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModalityFlow:
    begin: str
    pivots: tuple
    target: str

    def __post_init__(self):
        tokens = (self.begin,) + tuple(self.pivots) + (self.target,)
        if len(self.pivots) < 1:
            raise ValueError("a flow needs at least one pivot modality")
        if len(set(tokens)) != len(tokens):
            raise ValueError(f"flow '{self}' repeats a modality")

    def __str__(self):
        return "-".join((self.begin,) + tuple(self.pivots) + (self.target,))


def parse_flow(text: str) -> ModalityFlow:
    """Parse a 'begin-pivot-target' flow string (two or more hops)."""
    tokens = [t.strip() for t in text.split("-")]
    for i, token in enumerate(tokens):
        if not token:
            raise ValueError(f"empty modality at position {i + 1} in flow '{text}'")
    if len(tokens) < 3:
        raise ValueError(
            f"flow '{text}' needs begin, at least one pivot, and target")
    return ModalityFlow(tokens[0], tuple(tokens[1:-1]), tokens[-1])


def default_flow(cfg: ExperimentConfig) -> ModalityFlow:
    return ModalityFlow(cfg.data.modalities[0], tuple(cfg.data.modalities[1:-1]),
                        cfg.data.modalities[-1])


@dataclass(frozen=True)
class RetrievalReport:
    flow: str
    map_score: float
    num_queries: int
    per_query_ap: tuple
    relevance_mode: str = "class"

    def as_dict(self) -> dict:
        return {"flow": self.flow, "map": self.map_score,
                "n_queries": self.num_queries,
                "relevance_mode": self.relevance_mode}


def retrieval_map(queries, gallery, relevance, flow: str = "",
                  relevance_mode: str = "class") -> RetrievalReport:
    """Mean average precision of cosine-ranked retrieval.

    queries and gallery are unit-row embedding matrices; relevance is a
    (num_queries, num_gallery) boolean array. Ties in similarity rank
    the lower gallery index first.
    """
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=bool)
    if queries.ndim != 2 or gallery.ndim != 2 or queries.shape[1] != gallery.shape[1]:
        raise ValueError(
            f"queries {queries.shape} and gallery {gallery.shape} must share "
            f"an embedding dimension")
    if relevance.shape != (queries.shape[0], gallery.shape[0]):
        raise ValueError(
            f"relevance shape {relevance.shape} does not match "
            f"({queries.shape[0]}, {gallery.shape[0]})")

    keep = relevance.any(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        log.warning("excluding %d of %d queries with no relevant gallery item",
                    dropped, keep.size)
    if not keep.any():
        raise DataError("no query has any relevant gallery item")

    sims = queries[keep] @ gallery.T
    rel = relevance[keep]
    order = np.argsort(-sims, axis=1, kind="stable")
    rel_ranked = np.take_along_axis(rel, order, axis=1)
    hits = np.cumsum(rel_ranked, axis=1, dtype=np.float64)
    precision = hits / np.arange(1, gallery.shape[0] + 1)
    ap = (precision * rel_ranked).sum(axis=1) / rel_ranked.sum(axis=1)
    return RetrievalReport(flow=flow, map_score=float(ap.mean()),
                           num_queries=int(keep.sum()),
                           per_query_ap=tuple(float(v) for v in ap),
                           relevance_mode=relevance_mode)


def _dataset_hiding(datasets, target: str):
    matches = [d for d in datasets if d.spec.hidden_target == target]
    if len(matches) != 1:
        raise DataError(
            f"expected exactly one dataset hiding modality '{target}', "
            f"found {len(matches)}")
    return matches[0]


def evaluate_flow(cfg: ExperimentConfig, store, datasets,
                  flow=None) -> RetrievalReport:
    """Score one modality flow on a test split.

    The dataset whose hidden target matches the flow's target supplies
    both sides: its begin-modality rows become queries and its revealed
    ground-truth target rows become the gallery. Relevance is shared
    class.
    """
    if flow is None:
        flow = default_flow(cfg)
    elif isinstance(flow, str):
        flow = parse_flow(flow)
    known = set(cfg.data.modalities)
    for token in (flow.begin,) + tuple(flow.pivots) + (flow.target,):
        if token not in known:
            raise ValueError(
                f"flow modality '{token}' is not one of {cfg.data.modalities}")

    ds = _dataset_hiding(datasets, flow.target)
    specs = trainer.encoder_specs(cfg)
    queries = diffnet.encode_values(specs[flow.begin], store,
                                    ds.observed(flow.begin))
    gallery = diffnet.encode_values(specs[flow.target], store,
                                    synthgen.reveal_ground_truth(ds, flow.target))
    relevance = ds.labels[:, None] == ds.labels[None, :]
    return retrieval_map(queries, gallery, relevance, flow=str(flow))


@dataclass(frozen=True)
class FidelityReport:
    """How closely x-data pseudo embeddings track the real encoder outputs."""

    target_modality: str
    target_dataset: str
    mean_cosine: float
    quartiles: tuple          # (q25, median, q75)
    num_instances: int
    values: tuple

    def as_dict(self) -> dict:
        return {"target_modality": self.target_modality,
                "target_dataset": self.target_dataset,
                "mean_cosine": self.mean_cosine,
                "q25": self.quartiles[0], "median": self.quartiles[1],
                "q75": self.quartiles[2], "n": self.num_instances}


def _rowwise_cosine(raw_pseudo, truth_unit):
    norms = np.linalg.norm(raw_pseudo, axis=1, keepdims=True)
    safe = np.where(norms > 1e-12, norms, 1.0)
    return ((raw_pseudo / safe) * truth_unit).sum(axis=1)


@dataclass(frozen=True)
class PseudoSample:
    """Paired pseudo and ground-truth embeddings for a hidden modality.

    pseudo rows come off the x-data path unnormalized; truth rows are
    unit encoder outputs on the revealed ground truth.
    """

    target_modality: str
    target_dataset: str
    pseudo: np.ndarray
    truth: np.ndarray
    labels: np.ndarray


def collect_pseudo(cfg: ExperimentConfig, store, datasets,
                   batch_size=None) -> PseudoSample:
    """Extrapolate the first dataset's hidden modality over a whole split.

    Walks the datasets in fixed order (unshuffled batches of the
    training batch size) so transitions are built from the same batch
    protocol training uses.
    """
    datasets = list(datasets)
    specs = trainer.encoder_specs(cfg)
    rel = cfg.train.pinv_rel_tol
    bs = cfg.train.batch_size if batch_size is None else batch_size
    batches = synthgen.make_batches(datasets, bs, cfg.seed, 0, shuffle=False)
    if not batches:
        raise DataError(f"no full batch of size {bs} fits the datasets")

    def enc(modality, raw):
        return diffnet.encode_values(specs[modality], store, raw)

    pseudo_rows, truth_rows, labels = [], [], []
    if len(datasets) == 2:
        roles = trainer.two_dataset_roles(*datasets)
        d1, target, ds_id = datasets[0], roles.solo2, roles.d1_id
        truth_raw = synthgen.reveal_ground_truth(d1, target)
        for batch in batches:
            p1, p2 = batch.parts
            t_dat = xtrap.cross_data_transition(
                enc(roles.pivot, p1.raw[roles.pivot]),
                enc(roles.pivot, p2.raw[roles.pivot]),
                rel, source=roles.d2_id, dest=roles.d1_id)
            pseudo = xtrap.pseudo_embed_x_data(
                t_dat, enc(target, p2.raw[target]), target=(ds_id, target))
            pseudo_rows.append(pseudo.values)
            truth_rows.append(enc(target, truth_raw[p1.indices]))
            labels.append(p1.labels)
    elif len(datasets) == 3:
        roles = trainer.chain_roles(*datasets)
        d1, target, ds_id = datasets[0], roles.target, roles.ids[0]
        truth_raw = synthgen.reveal_ground_truth(d1, target)
        for batch in batches:
            p1, p2, p3 = batch.parts
            chain = xtrap.chain_extrapolate(
                enc(roles.pivot1, p1.raw[roles.pivot1]),
                enc(roles.pivot1, p2.raw[roles.pivot1]),
                enc(roles.pivot2, p2.raw[roles.pivot2]),
                enc(roles.pivot2, p3.raw[roles.pivot2]),
                enc(target, p3.raw[target]),
                rel, dataset_ids=roles.ids,
                modality_ids=(roles.pivot1, roles.pivot2, target))
            pseudo_rows.append(chain.final_x_data.values)
            truth_rows.append(enc(target, truth_raw[p1.indices]))
            labels.append(p1.labels)
    else:
        raise DataError(f"expected 2 or 3 datasets, got {len(datasets)}")

    return PseudoSample(
        target_modality=target, target_dataset=ds_id,
        pseudo=np.concatenate(pseudo_rows), truth=np.concatenate(truth_rows),
        labels=np.concatenate(labels))


def pseudo_fidelity(cfg: ExperimentConfig, store, datasets,
                    batch_size=None) -> FidelityReport:
    """Per-instance cosine between extrapolated and true target embeddings."""
    sample = collect_pseudo(cfg, store, datasets, batch_size=batch_size)
    values = _rowwise_cosine(sample.pseudo, sample.truth)
    q25, q50, q75 = np.percentile(values, [25.0, 50.0, 75.0])
    return FidelityReport(
        target_modality=sample.target_modality,
        target_dataset=sample.target_dataset,
        mean_cosine=float(values.mean()),
        quartiles=(float(q25), float(q50), float(q75)),
        num_instances=int(values.size),
        values=tuple(float(v) for v in values))


def project_2d(embeddings, min_points: int = 3):
    """Top-2 principal components of pooled embeddings.

    Returns (coords, variance_explained): coords is (N, 2) and
    variance_explained the fraction of total variance per component.
    Components follow a fixed sign convention (the entry of largest
    magnitude is positive) so outputs are deterministic. An all-identical
    point cloud projects to zeros with a warning.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < min_points:
        raise ValueError(f"need at least {min_points} points, got shape {x.shape}")
    centered = x - x.mean(axis=0, keepdims=True)
    total = float((centered * centered).sum())
    if total < 1e-30:
        log.warning("all %d points identical; projecting to zeros", x.shape[0])
        return np.zeros((x.shape[0], 2)), (0.0, 0.0)

    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.zeros((2, x.shape[1]))
    var = np.zeros(2)
    available = min(2, vt.shape[0])
    comps[:available] = vt[:available]
    var[:available] = s[:available] ** 2
    for k in range(available):
        j = int(np.argmax(np.abs(comps[k])))
        if comps[k, j] < 0:
            comps[k] = -comps[k]
    coords = centered @ comps.T
    frac = var / float(s @ s)
    return coords, (float(frac[0]), float(frac[1]))


def _stats(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def run_ablation(cfg: ExperimentConfig, arms=None, seeds=(0, 1, 2, 3, 4),
                 flow=None, progress=None) -> dict:
    """One training run per (arm, seed); returns the aggregated table.

    Within a seed every arm shares the same generated world and data, so
    arm differences are purely objective differences. progress, if
    given, is called with (arm, seed, map_score) after each run.
    """
    arms = list(trainer.ARMS) if arms is None else list(arms)
    for arm in arms:
        if arm not in trainer.ARMS:
            raise ValueError(f"unknown arm '{arm}'; choose from {sorted(trainer.ARMS)}")
    flow_str = str(flow) if flow is not None else str(default_flow(cfg))

    per_arm = {arm: {} for arm in arms}
    for seed in seeds:
        cfg_seed = dataclasses.replace(cfg, seed=int(seed))
        world = trainer.build_world(cfg_seed)
        train_split = trainer.make_datasets(world, cfg_seed, "train")
        test_split = trainer.make_datasets(world, cfg_seed, "test")
        for arm in arms:
            store, _ = trainer.train(trainer.arm_config(cfg_seed, arm), train_split)
            report = evaluate_flow(cfg_seed, store, test_split, flow_str)
            per_arm[arm][int(seed)] = report.map_score
            if progress is not None:
                progress(arm, int(seed), report.map_score)

    table = {}
    for arm in arms:
        scores = [per_arm[arm][int(s)] for s in seeds]
        table[arm] = {"per_seed": per_arm[arm], **_stats(scores)}
    return {"flow": flow_str, "seeds": [int(s) for s in seeds], "arms": table}


def run_pretrain_sweep(cfg: ExperimentConfig, points=(0, 25, 50),
                       seeds=(0, 1, 2, 3, 4), flow=None, progress=None) -> dict:
    """Sweep the pre-training epoch count on the full arm."""
    flow_str = str(flow) if flow is not None else str(default_flow(cfg))
    table = {}
    for point in points:
        point = int(point)
        cfg_point = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, pretrain_epochs=point))
        per_seed = {}
        for seed in seeds:
            cfg_run = dataclasses.replace(cfg_point, seed=int(seed))
            world = trainer.build_world(cfg_run)
            train_split = trainer.make_datasets(world, cfg_run, "train")
            test_split = trainer.make_datasets(world, cfg_run, "test")
            store, _ = trainer.train(cfg_run, train_split)
            report = evaluate_flow(cfg_run, store, test_split, flow_str)
            per_seed[int(seed)] = report.map_score
            if progress is not None:
                progress(point, int(seed), report.map_score)
        scores = list(per_seed.values())
        table[point] = {"per_seed": per_seed, **_stats(scores)}
    return {"flow": flow_str, "seeds": [int(s) for s in seeds],
            "pretrain_epochs": table}


def save_per_query_csv(report: RetrievalReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_index", "average_precision"])
        for i, ap in enumerate(report.per_query_ap):
            writer.writerow([i, repr(ap)])


def save_projection_csv(coords, labels, path, kinds=None):
    """Write 2D coordinates with class labels (and an optional kind tag)."""
    coords = np.asarray(coords)
    header = ["x", "y", "label"] + (["kind"] if kinds is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(coords.shape[0]):
            row = [repr(float(coords[i, 0])), repr(float(coords[i, 1])),
                   int(labels[i])]
            if kinds is not None:
                row.append(kinds[i])
            writer.writerow(row)
