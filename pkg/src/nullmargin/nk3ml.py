"""Primary discriminative space: null-space collapse, then kernel max-margin.

Fitting first learns the null projecting directions of the labeled data (all
same-class samples collapse to one point in R^{c-1}), then fits the kernel
maximum margin criterion on those projections to push the c class points
apart. Embedding a sample is the composition of the two maps; ranking uses
Euclidean distance on embeddings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import Reader, Writer
from .dataio import FeatureTable
from .errors import DataFormatError, ModelFormatError, ModelVersionError
from .kmmc import KernelDiscriminantModel, KernelSpec, fit_nkmmc, project_kernel
from .nfst import NullProjector, fit_nfst, project_null

MODEL_MAGIC = b"NK3M"
MODEL_VERSION = 1

_KERNEL_CODES = {"linear": 0, "rbf": 1}
_KERNEL_NAMES = {code: name for name, code in _KERNEL_CODES.items()}


@dataclass
class Nk3mlModel:
    nullproj: NullProjector
    margin: KernelDiscriminantModel
    class_count: int
    feature_dim: int
    output_dim: int


def fit_nk3ml(labeled: FeatureTable, kernel: KernelSpec = KernelSpec()) -> Nk3mlModel:
    """Fit the primary space on a fully labeled table.

    The margin stage trains on all null-space projections (same-class rows
    coincide there, which only reweights classes by their sample counts);
    an 'auto' bandwidth is resolved on those projections.
    """
    projector = fit_nfst(labeled)
    projected = project_null(projector, labeled.features)
    labels = labeled.label_values()
    margin = fit_nkmmc(projected, labels, kernel)
    return Nk3mlModel(
        nullproj=projector,
        margin=margin,
        class_count=projector.class_count,
        feature_dim=projector.dim,
        output_dim=margin.output_dim,
    )


def embed(model: Nk3mlModel, x: np.ndarray) -> np.ndarray:
    """Full-pipeline embedding; (d,) -> (l,) or (m, d) -> (m, l)."""
    return project_kernel(model.margin, project_null(model.nullproj, x))


# ---------------------------------------------------------------------------
# Versioned binary container: magic, version, dims, then one length-prefixed
# block per stage. Unknown trailing bytes inside a block are skipped, so
# fields appended under a later version do not break older payload layouts.
# ---------------------------------------------------------------------------

def serialize_model(model: Nk3mlModel) -> bytes:
    w = Writer()
    w.raw(MODEL_MAGIC)
    w.u16(MODEL_VERSION)

    null_block = Writer()
    null_block.u64(model.nullproj.dim)
    null_block.u64(model.nullproj.n_directions)
    null_block.f64_array(model.nullproj.mean)
    null_block.f64_array(model.nullproj.w_n)
    payload = null_block.getvalue()
    w.u64(len(payload))
    w.raw(payload)

    margin = model.margin
    margin_block = Writer()
    margin_block.u8(_KERNEL_CODES[margin.kernel.kind])
    margin_block.f64(margin.resolved_bandwidth)
    m, p = margin.train_points.shape
    margin_block.u64(m)
    margin_block.u64(p)
    margin_block.u64(margin.output_dim)
    margin_block.f64_array(margin.train_points)
    margin_block.f64_array(margin.coeffs)
    margin_block.f64_array(margin.eigenvalues)
    margin_block.i64_array(margin.class_index)
    payload = margin_block.getvalue()
    w.u64(len(payload))
    w.raw(payload)
    return w.getvalue()


def deserialize_model(data: bytes, context: str = "model") -> Nk3mlModel:
    try:
        return _deserialize(data, context)
    except ModelFormatError:
        raise
    except DataFormatError as err:
        raise ModelFormatError(str(err)) from err


def _deserialize(data: bytes, context: str) -> Nk3mlModel:
    r = Reader(data, context=context)
    if r.raw(4) != MODEL_MAGIC:
        raise ModelFormatError(f"{context}: bad magic, not a model container")
    version = r.u16()
    if version != MODEL_VERSION:
        raise ModelVersionError(f"{context}: unsupported model version {version}")

    block = Reader(r.raw(r.u64()), context=f"{context} null-space block")
    dim = block.u64()
    n_dirs = block.u64()
    mean = block.f64_array(dim)
    w_n = block.f64_array(dim * n_dirs, shape=(dim, n_dirs))
    nullproj = NullProjector(
        w_n=w_n, mean=mean, class_count=n_dirs + 1, ortho_basis=None, coeffs=None
    )

    block = Reader(r.raw(r.u64()), context=f"{context} margin block")
    kind_code = block.u8()
    if kind_code not in _KERNEL_NAMES:
        raise ModelFormatError(f"{context}: unknown kernel code {kind_code}")
    bandwidth = block.f64()
    m = block.u64()
    p = block.u64()
    n_disc = block.u64()
    train_points = block.f64_array(m * p, shape=(m, p))
    coeffs = block.f64_array(m * n_disc, shape=(m, n_disc))
    eigenvalues = block.f64_array(n_disc)
    class_index = block.i64_array(m)
    kind = _KERNEL_NAMES[kind_code]
    margin = KernelDiscriminantModel(
        train_points=train_points,
        kernel=KernelSpec(kind, bandwidth if kind == "rbf" else "auto"),
        resolved_bandwidth=bandwidth,
        coeffs=coeffs,
        eigenvalues=eigenvalues,
        class_index=class_index,
    )
    if nullproj.n_directions != margin.input_dim:
        raise ModelFormatError(
            f"{context}: stage dimensions disagree "
            f"({nullproj.n_directions} null directions vs margin input {margin.input_dim})"
        )
    return Nk3mlModel(
        nullproj=nullproj,
        margin=margin,
        class_count=nullproj.class_count,
        feature_dim=nullproj.dim,
        output_dim=margin.output_dim,
    )


def save_model(model: Nk3mlModel, path) -> None:
    Path(path).write_bytes(serialize_model(model))


def load_model(path) -> Nk3mlModel:
    path = Path(path)
    if not path.exists():
        raise ModelFormatError(f"no such file: {path}")
    return deserialize_model(path.read_bytes(), context=str(path))


def model_checksum(model: Nk3mlModel) -> str:
    """SHA-256 of the serialized container; stable across identical fits."""
    return hashlib.sha256(serialize_model(model)).hexdigest()
