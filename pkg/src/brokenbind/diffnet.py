"""Per-modality encoders, the flat parameter store, and the optimizer.

Each modality gets a small multilayer perceptron: affine layers with a
nonlinearity between them and unit row normalization at the end, so
every embedding row lands on the unit sphere. All parameters live in
one flat float64 vector with named slices; gradients come back from
autodiff keyed by those names and are flattened into the same layout.

The optimizer is adaptive moments with bias correction and decoupled
weight decay (decay applied to the parameters directly, not through
the gradient).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError

#: entropy tag for the parameter-init random stream (see README, Determinism)
INIT_STREAM = 11

_NONLINS = ("tanh", "relu")

CHECKPOINT_MAGIC = b"BBCKPT1\x00"


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of one modality encoder.

    layer_dims runs input -> hidden ... -> embed_dim; the nonlinearity
    sits between affine layers (not after the last one); the output is
    always unit-row normalized. temperature_scale is a per-modality
    similarity multiplier applied inside the losses, default 1.
    """

    modality: str
    layer_dims: tuple
    nonlinearity: str = "tanh"
    temperature_scale: float = 1.0

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValueError(f"{self.modality}: need at least one affine layer")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError(f"{self.modality}: nonpositive layer width")
        if self.nonlinearity not in _NONLINS:
            raise ValueError(
                f"{self.modality}: unknown nonlinearity {self.nonlinearity!r}"
            )
        if not self.temperature_scale > 0:
            raise ValueError(f"{self.modality}: temperature_scale must be positive")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def embed_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass
class ParameterStore:
    """Flat parameter vector with named slices plus optimizer moments."""

    names: tuple
    slices: dict            # name -> (offset, shape)
    theta: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    opt_step: int = 0
    layer_counts: dict = field(default_factory=dict)   # modality -> num affine layers

    @property
    def size(self) -> int:
        return self.theta.size

    def get(self, name: str) -> np.ndarray:
        off, shape = self.slices[name]
        n = int(np.prod(shape))
        return self.theta[off:off + n].reshape(shape)

    def set(self, name: str, value) -> None:
        target = self.get(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != target.shape:
            raise ValueError(f"{name}: shape {value.shape} != {target.shape}")
        target[...] = value

    def param_var(self, name: str) -> ad.Var:
        # copy so recorded graph values cannot alias optimizer updates
        return ad.param(self.get(name).copy(), name)

    def flatten_grads(self, named: dict) -> np.ndarray:
        """Named gradient arrays -> flat vector in store layout.

        Parameters absent from the mapping get zero gradient (they did
        not participate in the loss graph).
        """
        flat = np.zeros(self.size)
        for name, g in named.items():
            if name not in self.slices:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            off, shape = self.slices[name]
            g = np.asarray(g, dtype=np.float64)
            if g.shape != shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != {shape}")
            flat[off:off + g.size] += g.ravel()
        return flat

    def trainable_mask(self, final_layer_only: bool):
        """Boolean mask over theta, or None when everything trains."""
        if not final_layer_only:
            return None
        mask = np.zeros(self.size, dtype=bool)
        for name in self.names:
            modality, layer, _ = name.split("/")
            last = self.layer_counts[modality] - 1
            if layer == f"layer{last}":
                off, shape = self.slices[name]
                mask[off:off + int(np.prod(shape))] = True
        return mask


def build_store(specs, seed: int) -> ParameterStore:
    """Allocate and initialize parameters for a set of encoder specs.

    Weights are uniform in +-sqrt(6/(fan_in+fan_out)), biases zero.
    Deterministic: modalities are laid out in sorted order and drawn
    from a seed-derived stream.
    """
    by_mod = {}
    for spec in specs:
        if spec.modality in by_mod:
            raise ValueError(f"duplicate encoder spec for {spec.modality!r}")
        by_mod[spec.modality] = spec
    embed_dims = {s.embed_dim for s in by_mod.values()}
    if len(embed_dims) > 1:
        raise ValueError(f"embed_dim differs across modalities: {embed_dims}")

    names = []
    slices = {}
    offset = 0
    for modality in sorted(by_mod):
        spec = by_mod[modality]
        dims = spec.layer_dims
        for k in range(spec.num_layers):
            for suffix, shape in (("w", (dims[k], dims[k + 1])),
                                  ("b", (1, dims[k + 1]))):
                name = f"{modality}/layer{k}/{suffix}"
                names.append(name)
                slices[name] = (offset, shape)
                offset += int(np.prod(shape))

    theta = np.zeros(offset)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, INIT_STREAM))))
    for name in names:
        off, shape = slices[name]
        if name.endswith("/w"):
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            theta[off:off + fan_in * fan_out] = rng.uniform(
                -limit, limit, size=fan_in * fan_out
            )
        # biases stay zero

    return ParameterStore(
        names=tuple(names),
        slices=slices,
        theta=theta,
        adam_m=np.zeros(offset),
        adam_v=np.zeros(offset),
        opt_step=0,
        layer_counts={m: by_mod[m].num_layers for m in by_mod},
    )


def encode(spec: EncoderSpec, store: ParameterStore, raw) -> ad.Var:
    """Run one encoder over a batch of raw rows; output rows unit-norm.

    Returns the graph node so gradients can flow; use .value (or
    encode_values) when only numbers are needed.
    """
    raw = ad.value_of(raw)
    if raw.ndim != 2 or raw.shape[1] != spec.layer_dims[0]:
        raise ValueError(
            f"{spec.modality}: raw batch shape {raw.shape} does not match "
            f"input dim {spec.layer_dims[0]}"
        )
    nonlin = ad.tanh if spec.nonlinearity == "tanh" else ad.relu
    h = ad.const(raw)
    for k in range(spec.num_layers):
        w = store.param_var(f"{spec.modality}/layer{k}/w")
        b = store.param_var(f"{spec.modality}/layer{k}/b")
        h = ad.add(ad.matmul(h, w), b)
        if k < spec.num_layers - 1:
            h = nonlin(h)
    return ad.unit_rows(h)


def encode_values(spec: EncoderSpec, store: ParameterStore, raw) -> np.ndarray:
    """encode() for evaluation paths: just the embedding matrix."""
    return encode(spec, store, raw).value


def backward(loss, store: ParameterStore) -> np.ndarray:
    """Gradient of a scalar loss node as a flat vector in store layout."""
    if isinstance(loss, ad.ComputationRecord):
        loss = loss.loss
    return store.flatten_grads(ad.backward(loss))


def optimizer_step(store: ParameterStore, grads: np.ndarray, lr: float,
                   weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8,
                   trainable=None, step_count=None) -> ParameterStore:
    """One decoupled-weight-decay adaptive-moment update, in place.

    trainable: optional boolean mask over theta; masked-out entries keep
    their parameters AND moments untouched. step_count overrides the
    store's internal counter for bias correction (rarely needed).
    """
    if grads.shape != store.theta.shape:
        raise ValueError(f"gradient shape {grads.shape} != {store.theta.shape}")
    beta1, beta2 = betas
    store.opt_step += 1
    t = store.opt_step if step_count is None else int(step_count)

    sel = slice(None) if trainable is None else trainable
    g = grads[sel]
    store.adam_m[sel] = beta1 * store.adam_m[sel] + (1.0 - beta1) * g
    store.adam_v[sel] = beta2 * store.adam_v[sel] + (1.0 - beta2) * g * g
    m_hat = store.adam_m[sel] / (1.0 - beta1 ** t)
    v_hat = store.adam_v[sel] / (1.0 - beta2 ** t)
    store.theta[sel] -= lr * (m_hat / (np.sqrt(v_hat) + eps)
                              + weight_decay * store.theta[sel])
    return store


def grad_check(objective, store: ParameterStore, step: float = 1e-5,
               num_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference grads.

    objective: zero-argument callable returning the loss Var, evaluated
    against the current store.theta (which is perturbed in place and
    restored). Coordinates are sampled without replacement.
    """
    analytic = backward(objective(), store)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 91))))
    count = min(num_coords, store.size)
    coords = rng.choice(store.size, size=count, replace=False)
    worst = 0.0
    for i in coords:
        orig = store.theta[i]
        store.theta[i] = orig + step
        up = float(objective())
        store.theta[i] = orig - step
        down = float(objective())
        store.theta[i] = orig
        fd = (up - down) / (2.0 * step)
        err = abs(analytic[i] - fd) / (abs(fd) + 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format
#
# Little-endian binary: 8 magic bytes "BBCKPT1\0", then entries sorted
# by name, each entry being u32 name length, the UTF-8 name, u64
# element count, and that many float64 values. Shapes are not stored;
# they are recovered from the encoder specs on load.


def save_checkpoint(path, entries: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name in sorted(entries):
            data = np.asarray(entries[name], dtype=np.float64).ravel()
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", data.size))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back as {name: flat float64 array}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    entries = {}
    pos = 8
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise DataError(f"{path}: truncated entry header")
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if name_len == 0 or pos + name_len + 8 > len(blob):
            raise DataError(f"{path}: truncated entry name")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (count,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        nbytes = count * 8
        if pos + nbytes > len(blob):
            raise DataError(f"{path}: truncated data for {name!r}")
        entries[name] = np.frombuffer(blob, dtype="<f8", count=count,
                                      offset=pos).astype(np.float64)
        pos += nbytes
    return entries


def checkpoint_entries(store: ParameterStore, extra: dict | None = None) -> dict:
    """Store contents as checkpoint entries; extra holds meta/* values."""
    entries = {}
    for name in store.names:
        off, shape = store.slices[name]
        n = int(np.prod(shape))
        entries[f"param/{name}"] = store.theta[off:off + n]
        entries[f"adam_m/{name}"] = store.adam_m[off:off + n]
        entries[f"adam_v/{name}"] = store.adam_v[off:off + n]
    entries["meta/opt_step"] = np.array([float(store.opt_step)])
    if extra:
        for key, value in extra.items():
            entries[f"meta/{key}"] = np.asarray(value, dtype=np.float64).ravel()
    return entries


def restore_store(store: ParameterStore, entries: dict) -> dict:
    """Load checkpoint entries into a freshly built store, in place.

    Returns the meta/* entries (minus opt_step) for the caller. Raises
    DataError if the checkpoint does not match the store layout.
    """
    for name in store.names:
        for prefix, target in (("param", store.theta),
                               ("adam_m", store.adam_m),
                               ("adam_v", store.adam_v)):
            key = f"{prefix}/{name}"
            if key not in entries:
                raise DataError(f"checkpoint is missing {key!r}")
            off, shape = store.slices[name]
            n = int(np.prod(shape))
            if entries[key].size != n:
                raise DataError(
                    f"checkpoint entry {key!r} has {entries[key].size} values, "
                    f"expected {n}"
                )
            target[off:off + n] = entries[key]
    if "meta/opt_step" not in entries:
        raise DataError("checkpoint is missing meta/opt_step")
    store.opt_step = int(entries["meta/opt_step"][0])
    return {
        k[len("meta/"):]: v for k, v in entries.items()
        if k.startswith("meta/") and k != "meta/opt_step"
    }
