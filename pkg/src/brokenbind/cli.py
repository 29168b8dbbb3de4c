"""Command line front door: generate, train, eval, ablate.

One config file plus a seed fully determines a run. Every command
writes its artifacts into --out together with a manifest listing each
file's sha256, the config hash, and the timestamps; re-running with
identical inputs reproduces every artifact byte for byte (only the
manifest timestamps move).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything else.

This module must not import numpy at load time: BB_THREADS is applied
to the BLAS thread-count environment variables first, and those are
only read when the numeric libraries load.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone

from .errors import ConfigError, DataError

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _cap_threads():
    raw = os.environ.get("BB_THREADS", "1")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"BB_THREADS must be a positive integer, got '{raw}'")
    if count < 1:
        raise ConfigError(f"BB_THREADS must be a positive integer, got {count}")
    for var in _THREAD_VARS:
        os.environ[var] = str(count)


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="brokenbind",
        description="Bind modalities that never co-occur by extrapolating "
                    "pseudo embeddings through a shared pivot modality.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if data:
            p.add_argument("--data", required=True,
                           help="directory holding generated .bbd dataset files")

    p = sub.add_parser("generate", help="sample the synthetic datasets")
    common(p)

    p = sub.add_parser("train", help="train encoders on the generated data")
    common(p, data=True)
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in --out if present")

    p = sub.add_parser("eval", help="retrieval, fidelity, and 2D projection")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--flow", default=None,
                   help="modality flow such as m_a-m_b-m_c (default from config)")

    p = sub.add_parser("ablate", help="train and score the ablation arms")
    common(p)
    p.add_argument("--arms", default="full,no_fro,no_cons,no_mox,clip_only",
                   help="comma-separated arm names")
    p.add_argument("--seeds", default="0,1,2,3,4",
                   help="comma-separated integer seeds")
    p.add_argument("--flow", default=None)
    return parser.parse_args(argv)


def _load_config(args):
    from .config import load_config, validate_config
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    validate_config(cfg)
    return cfg


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, timezone.utc).isoformat()


def _write_manifest(out_dir, cfg, started, outputs):
    from . import __version__
    from .config import config_hash
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "version": __version__,
        "started_at": _iso(started),
        "finished_at": _iso(time.time()),
        "outputs": {name: _sha256(os.path.join(out_dir, name))
                    for name in sorted(outputs)},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _dataset_files(cfg, split):
    from .trainer import _dataset_layout
    return [(ds_id, f"{ds_id}_{split}.bbd") for ds_id, _, _ in _dataset_layout(cfg)]


def _load_split(cfg, data_dir, split, required=True):
    from . import synthgen
    datasets = []
    for _, name in _dataset_files(cfg, split):
        path = os.path.join(data_dir, name)
        if not os.path.exists(path):
            if required:
                raise DataError(f"missing dataset file '{path}' "
                                f"(run the generate command first)")
            return None
        datasets.append(synthgen.load_dataset(path))
    return datasets


def cmd_generate(args) -> int:
    from . import synthgen, trainer
    cfg = _load_config(args)
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    world = trainer.build_world(cfg)
    outputs = []
    for split in ("train", "test"):
        for ds in trainer.make_datasets(world, cfg, split):
            name = f"{ds.spec.dataset_id}_{split}.bbd"
            synthgen.save_dataset(ds, os.path.join(args.out, name))
            outputs.append(name)
    _write_manifest(args.out, cfg, started, outputs)
    print(f"wrote {len(outputs)} dataset files to {args.out}")
    return 0


def cmd_train(args) -> int:
    from . import evaluate, trainer
    cfg = _load_config(args)
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    train_split = _load_split(cfg, args.data, "train")
    test_split = _load_split(cfg, args.data, "test", required=False)

    log_path = os.path.join(args.out, "train_log.jsonl")
    checkpoint_path = os.path.join(args.out, "checkpoint.bbc")
    if not args.resume and os.path.exists(log_path):
        os.remove(log_path)

    eval_fn = None
    if test_split is not None and cfg.train.eval_every > 0:
        def eval_fn(store, epoch):
            report = evaluate.evaluate_flow(cfg, store, test_split)
            return {"map": report.map_score}

    _, log = trainer.train(cfg, train_split, log_path=log_path,
                           checkpoint_path=checkpoint_path,
                           resume=args.resume, eval_fn=eval_fn)
    _write_manifest(args.out, cfg, started,
                    ["train_log.jsonl", "checkpoint.bbc"])
    final = log[-1] if log else {}
    print(f"trained {cfg.train.epochs} epochs; "
          f"final total loss {final.get('total', float('nan')):.6f}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from . import diffnet, evaluate, trainer
    cfg = _load_config(args)
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    test_split = _load_split(cfg, args.data, "test")

    specs = trainer.encoder_specs(cfg)
    store = diffnet.build_store([specs[m] for m in cfg.data.modalities], cfg.seed)
    diffnet.restore_store(store, diffnet.load_checkpoint(args.checkpoint))

    report = evaluate.evaluate_flow(cfg, store, test_split, args.flow)
    sample = evaluate.collect_pseudo(cfg, store, test_split)
    fidelity = evaluate.pseudo_fidelity(cfg, store, test_split)

    norms = np.linalg.norm(sample.pseudo, axis=1, keepdims=True)
    pseudo_unit = sample.pseudo / np.where(norms > 1e-12, norms, 1.0)
    pooled = np.vstack([pseudo_unit, sample.truth])
    coords, variance = evaluate.project_2d(pooled)
    n = sample.pseudo.shape[0]
    evaluate.save_projection_csv(
        coords, np.concatenate([sample.labels, sample.labels]),
        os.path.join(args.out, "projection.csv"),
        kinds=["pseudo"] * n + ["truth"] * n)
    evaluate.save_per_query_csv(report, os.path.join(args.out, "per_query_ap.csv"))

    summary = {**report.as_dict(), "seed": cfg.seed,
               "fidelity": fidelity.as_dict(),
               "projection_variance_explained": list(variance)}
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    _write_manifest(args.out, cfg, started,
                    ["report.json", "per_query_ap.csv", "projection.csv"])
    print(f"flow {report.flow}: mAP {report.map_score:.4f} over "
          f"{report.num_queries} queries; fidelity {fidelity.mean_cosine:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from . import evaluate
    cfg = _load_config(args)
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, "
                          f"got '{args.seeds}'")
    if not arms or not seeds:
        raise ConfigError("--arms and --seeds must be non-empty")

    def progress(arm, seed, score):
        print(f"  arm {arm:<10s} seed {seed}: mAP {score:.4f}", flush=True)

    table = evaluate.run_ablation(cfg, arms, seeds, flow=args.flow,
                                  progress=progress)
    with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(table, indent=2, sort_keys=True) + "\n")
    _write_manifest(args.out, cfg, started, ["ablation.json"])
    for arm in arms:
        row = table["arms"][arm]
        print(f"{arm:<10s} mAP {row['mean']:.4f} +/- {row['std']:.4f}")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = _parse_args(argv)
    try:
        _cap_threads()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    from .linalg import NumericalFailure
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
