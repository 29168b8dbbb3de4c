"""brokenbind: bind modalities that never co-occur in a single dataset.

The package trains per-modality encoders on synthetic multi-modal data
and extrapolates embeddings for missing modality pairs by routing
through a shared pivot modality with pseudo-inverse transition
matrices. See README.md for the model, the CLI and the file formats.

Heavy modules are imported lazily so the CLI can pin BLAS thread counts
before numpy loads.
"""

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "cli",
    "config",
    "diffnet",
    "evaluate",
    "linalg",
    "losses",
    "synthgen",
    "trainer",
    "xtrap",
]
