"""Synthetic mismatched multi-modal datasets with held-out ground truth.

A shared latent class structure generates every modality: each dataset
draws latents from the class centers plus its own latent shift (the
cross-dataset distribution mismatch), and each modality renders latents
through a fixed full-rank affine view plus optional elementwise tanh
and Gaussian noise. Within one dataset all modalities of an instance
come from the same latent draw, so instance-level correspondence holds
exactly; across datasets draws are independent.

Each dataset declares which modalities are observable; the hidden
target modality is generated alongside them but never enters training
batches. Evaluation code accesses it explicitly through
reveal_ground_truth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

#: entropy tags separating this module's random streams from others
DATA_STREAM = 22
BATCH_STREAM = 33

DATASET_MAGIC = b"BBDATA1\x00"


def rng_from(seed) -> np.random.Generator:
    """Generator from an int or tuple-of-ints entropy value."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class LatentSpec:
    """Class-conditional latent distribution shared by every dataset."""

    latent_dim: int
    num_classes: int
    class_centers: np.ndarray          # num_classes x latent_dim
    within_class_std: float

    def __post_init__(self):
        centers = np.asarray(self.class_centers, dtype=np.float64)
        if centers.shape != (self.num_classes, self.latent_dim):
            raise ValueError(
                f"class_centers shape {centers.shape} != "
                f"({self.num_classes}, {self.latent_dim})"
            )
        if not self.within_class_std > 0:
            raise ValueError("within_class_std must be positive")
        diffs = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() == 0.0:
            raise ValueError("class centers must be pairwise distinct")
        object.__setattr__(self, "class_centers", centers)

    @staticmethod
    def random(latent_dim: int, num_classes: int, within_class_std: float,
               center_spread: float, seed) -> "LatentSpec":
        rng = rng_from(seed)
        centers = rng.normal(0.0, center_spread, size=(num_classes, latent_dim))
        return LatentSpec(latent_dim, num_classes, centers, within_class_std)


@dataclass(frozen=True)
class ModalityViewSpec:
    """Fixed rendering of latents into one modality's raw feature space."""

    modality: str
    weight: np.ndarray                 # latent_dim x raw_dim, full column rank
    offset: np.ndarray                 # 1 x raw_dim
    nonlinearity: str = "none"         # "none" or "tanh"
    noise_std: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        off = np.asarray(self.offset, dtype=np.float64).reshape(1, -1)
        if w.ndim != 2 or off.shape[1] != w.shape[1]:
            raise ValueError(f"{self.modality}: inconsistent view shapes")
        if np.linalg.matrix_rank(w) != w.shape[0]:
            raise ValueError(
                f"{self.modality}: view map must have full rank in the latent "
                f"dimension ({w.shape[0]})"
            )
        if self.nonlinearity not in ("none", "tanh"):
            raise ValueError(f"{self.modality}: unknown view nonlinearity")
        if self.noise_std < 0:
            raise ValueError(f"{self.modality}: negative noise_std")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "offset", off)

    @property
    def raw_dim(self) -> int:
        return self.weight.shape[1]

    @staticmethod
    def random(modality: str, latent_dim: int, raw_dim: int, seed,
               nonlinearity: str = "none", noise_std: float = 0.0,
               offset_scale: float = 0.1) -> "ModalityViewSpec":
        if raw_dim < latent_dim:
            raise ValueError(
                f"{modality}: raw_dim {raw_dim} < latent_dim {latent_dim} "
                "cannot carry the full latent signal"
            )
        rng = rng_from(seed)
        weight = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), (latent_dim, raw_dim))
        offset = rng.normal(0.0, offset_scale, (1, raw_dim))
        return ModalityViewSpec(modality, weight, offset, nonlinearity, noise_std)

    def render(self, latents: np.ndarray, rng=None) -> np.ndarray:
        out = latents @ self.weight + self.offset
        if self.nonlinearity == "tanh":
            out = np.tanh(out)
        if self.noise_std > 0:
            if rng is None:
                raise ValueError("noisy view needs a generator")
            out = out + rng.normal(0.0, self.noise_std, out.shape)
        return out


@dataclass(frozen=True)
class DatasetSpec:
    dataset_id: str
    num_samples: int
    latent_shift: np.ndarray
    observable: tuple
    hidden_target: str | None = None

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError(f"{self.dataset_id}: num_samples must be >= 1")
        shift = np.asarray(self.latent_shift, dtype=np.float64).ravel()
        if not np.isfinite(shift).all():
            raise ValueError(f"{self.dataset_id}: non-finite latent shift")
        if self.hidden_target is not None and self.hidden_target in self.observable:
            raise ValueError(
                f"{self.dataset_id}: hidden target {self.hidden_target!r} is "
                "also observable"
            )
        if len(set(self.observable)) != len(self.observable):
            raise ValueError(f"{self.dataset_id}: duplicate observable modality")
        object.__setattr__(self, "latent_shift", shift)
        object.__setattr__(self, "observable", tuple(self.observable))

    @property
    def all_modalities(self) -> tuple:
        mods = set(self.observable)
        if self.hidden_target is not None:
            mods.add(self.hidden_target)
        return tuple(sorted(mods))


@dataclass
class MultiModalDataset:
    """Generated samples. latents is an oracle channel, never trained on."""

    spec: DatasetSpec
    num_classes: int
    labels: np.ndarray                 # (n,) int64
    latents: np.ndarray                # (n, latent_dim)
    raw: dict                          # modality -> (n, raw_dim), hidden included
    latent_spec: LatentSpec | None = None
    views: dict | None = None

    @property
    def num_samples(self) -> int:
        return self.labels.shape[0]

    def observed(self, modality: str) -> np.ndarray:
        """Training-path accessor: observable modalities only."""
        if modality not in self.spec.observable:
            raise DataError(
                f"{self.spec.dataset_id}: modality {modality!r} is not "
                f"observable (observable: {sorted(self.spec.observable)})"
            )
        return self.raw[modality]


def generate_dataset(latent: LatentSpec, views: dict, spec: DatasetSpec,
                     seed) -> MultiModalDataset:
    """Draw one dataset; deterministic for fixed (specs, seed)."""
    for modality in spec.all_modalities:
        if modality not in views:
            raise DataError(
                f"{spec.dataset_id}: no view spec for modality {modality!r}"
            )
    if spec.latent_shift.shape != (latent.latent_dim,):
        raise DataError(
            f"{spec.dataset_id}: latent shift has dim "
            f"{spec.latent_shift.shape[0]}, expected {latent.latent_dim}"
        )
    rng = rng_from(seed)
    n = spec.num_samples
    labels = rng.integers(0, latent.num_classes, size=n).astype(np.int64)
    latents = (latent.class_centers[labels] + spec.latent_shift
               + rng.normal(0.0, latent.within_class_std, (n, latent.latent_dim)))
    raw = {}
    for modality in spec.all_modalities:   # sorted, so draw order is fixed
        raw[modality] = views[modality].render(latents, rng)
    return MultiModalDataset(spec=spec, num_classes=latent.num_classes,
                             labels=labels, latents=latents, raw=raw,
                             latent_spec=latent, views=dict(views))


def reveal_ground_truth(dataset: MultiModalDataset, modality: str) -> np.ndarray:
    """Evaluation-only accessor; also serves hidden target modalities."""
    if modality not in dataset.raw:
        raise DataError(
            f"{dataset.spec.dataset_id}: modality {modality!r} was never "
            f"generated (have: {sorted(dataset.raw)})"
        )
    return dataset.raw[modality]


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class DatasetBatch:
    dataset_id: str
    indices: np.ndarray
    labels: np.ndarray
    raw: dict                          # observable modalities only


@dataclass(frozen=True)
class MultiModalBatch:
    parts: tuple                       # one DatasetBatch per dataset, in order

    @property
    def rows_per_dataset(self) -> int:
        return self.parts[0].indices.shape[0]


def make_batches(datasets, batch_size: int, seed: int, epoch: int,
                 shuffle: bool = True) -> list:
    """Equal per-dataset batches; trailing remainders are dropped.

    Shuffling is a pure function of (seed, epoch), so any epoch can be
    re-batched independently (checkpoint resume relies on this). Hidden
    target modalities are never attached.
    """
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    if batch_size % len(datasets) != 0:
        raise ValueError(
            f"batch_size {batch_size} not divisible by {len(datasets)} datasets"
        )
    per = batch_size // len(datasets)
    if per < 1:
        raise ValueError("batch_size too small for the dataset count")

    rng = rng_from((seed, BATCH_STREAM, epoch))
    orders = []
    for ds in datasets:
        n = ds.num_samples
        orders.append(rng.permutation(n) if shuffle else np.arange(n))
    num_batches = min(len(order) // per for order in orders)

    batches = []
    for t in range(num_batches):
        parts = []
        for ds, order in zip(datasets, orders):
            idx = order[t * per:(t + 1) * per]
            parts.append(DatasetBatch(
                dataset_id=ds.spec.dataset_id,
                indices=idx,
                labels=ds.labels[idx],
                raw={m: ds.raw[m][idx] for m in ds.spec.observable},
            ))
        batches.append(MultiModalBatch(parts=tuple(parts)))
    return batches


# ---------------------------------------------------------------------------
# on-disk format
#
# "BBDATA1\0" magic, u64 little-endian header length, canonical JSON
# header (sorted keys, no whitespace), then the arrays named by the
# header's "arrays" list, each dumped C-order little-endian (labels
# int64, everything else float64).


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_dataset(dataset: MultiModalDataset, path) -> None:
    arrays = {"labels": dataset.labels.astype("<i8"),
              "latents": dataset.latents.astype("<f8")}
    for modality in sorted(dataset.raw):
        arrays[f"raw/{modality}"] = dataset.raw[modality].astype("<f8")
    header = {
        "format": "BBDATA1",
        "dataset_id": dataset.spec.dataset_id,
        "num_samples": int(dataset.num_samples),
        "num_classes": int(dataset.num_classes),
        "latent_dim": int(dataset.latents.shape[1]),
        "latent_shift": [float(x) for x in dataset.spec.latent_shift],
        "observable": list(dataset.spec.observable),
        "hidden_target": dataset.spec.hidden_target,
        "raw_dims": {m: int(dataset.raw[m].shape[1]) for m in sorted(dataset.raw)},
        "arrays": list(arrays.keys()),
    }
    blob = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in header["arrays"]:
            fh.write(arrays[name].tobytes(order="C"))


def load_dataset(path) -> MultiModalDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != DATASET_MAGIC:
        raise DataError(f"{path}: not a dataset file (bad magic)")
    if len(blob) < 16:
        raise DataError(f"{path}: truncated header")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable header: {exc}") from exc

    n = header["num_samples"]
    pos = 16 + header_len
    loaded = {}
    for name in header["arrays"]:
        if name == "labels":
            dtype, cols = "<i8", 1
        elif name == "latents":
            dtype, cols = "<f8", header["latent_dim"]
        else:
            dtype, cols = "<f8", header["raw_dims"][name.split("/", 1)[1]]
        count = n * cols
        nbytes = count * 8
        if pos + nbytes > len(blob):
            raise DataError(f"{path}: truncated array {name!r}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
        loaded[name] = arr.reshape(n, cols) if cols > 1 or name != "labels" else arr
        pos += nbytes
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes")

    spec = DatasetSpec(
        dataset_id=header["dataset_id"],
        num_samples=n,
        latent_shift=np.asarray(header["latent_shift"], dtype=np.float64),
        observable=tuple(header["observable"]),
        hidden_target=header["hidden_target"],
    )
    raw = {name.split("/", 1)[1]: np.ascontiguousarray(arr.astype(np.float64))
           for name, arr in loaded.items() if name.startswith("raw/")}
    return MultiModalDataset(
        spec=spec,
        num_classes=header["num_classes"],
        labels=np.ascontiguousarray(loaded["labels"].astype(np.int64)),
        latents=np.ascontiguousarray(loaded["latents"].astype(np.float64)),
        raw=raw,
    )


def export_csv(dataset: MultiModalDataset, path) -> None:
    """Plain-text dump for eyeballing; one row per sample."""
    mods = sorted(dataset.raw)
    cols = ["label"]
    cols += [f"latent_{j}" for j in range(dataset.latents.shape[1])]
    for m in mods:
        cols += [f"{m}_{j}" for j in range(dataset.raw[m].shape[1])]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(dataset.num_samples):
            row = [str(int(dataset.labels[i]))]
            row += [repr(float(x)) for x in dataset.latents[i]]
            for m in mods:
                row += [repr(float(x)) for x in dataset.raw[m][i]]
            fh.write(",".join(row) + "\n")
