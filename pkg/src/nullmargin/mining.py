"""Cross-view pseudo-class mining in the secondary discriminative space.

The anchor camera (most distinct within-view identities) defines a secondary
maximum-margin space trained on its unlabeled samples' primary embeddings.
Identities from other cameras are matched to anchor identities by mutual
top-k (k-reciprocal) nearest-neighbor search over identity centroids in that
space; each surviving mutual pair becomes a pseudo-class with affinity
exp(-dist^2 / sigma^2), sigma being the mean cross-view centroid distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .dataio import FeatureTable
from .errors import DataValidationError
from .kmmc import KernelDiscriminantModel, KernelSpec, fit_nkmmc, project_kernel
from .nk3ml import Nk3mlModel, embed


@dataclass
class AnchorContext:
    anchor_camera: int
    # (within_view_id, row indices into the unlabeled table), ascending ids
    anchor_classes: tuple[tuple[int, np.ndarray], ...]
    secondary: KernelDiscriminantModel


@dataclass
class NeighborSets:
    """Per-query neighbor lists; reciprocal is None for plain knn output."""

    k: int
    neighbors: tuple[np.ndarray, ...]
    reciprocal: tuple[np.ndarray, ...] | None = None


@dataclass(frozen=True)
class PseudoClass:
    anchor_identity: tuple[int, int]     # (camera_id, within_view_id)
    matched_identity: tuple[int, int]
    affinity: float
    iteration_found: int = 0


def view_identity_groups(table: FeatureTable) -> dict[tuple[int, int], np.ndarray]:
    """Row indices grouped by (camera_id, within_view_id)."""
    groups: dict[tuple[int, int], list[int]] = {}
    for row in range(table.n):
        key = (int(table.camera_ids[row]), int(table.within_view_ids[row]))
        groups.setdefault(key, []).append(row)
    return {key: np.array(rows) for key, rows in sorted(groups.items())}


def select_anchor(unlabeled: FeatureTable) -> int:
    """Camera with the most distinct within-view identities; ties -> lowest id."""
    cameras = unlabeled.cameras()
    if len(cameras) < 2:
        raise DataValidationError(f"anchor selection needs >= 2 cameras, found {len(cameras)}")
    counts = {
        cam: len({int(w) for w in unlabeled.within_view_ids[unlabeled.camera_ids == cam]})
        for cam in cameras
    }
    best = max(counts.values())
    return min(cam for cam, count in counts.items() if count == best)


def fit_secondary(embeddings: np.ndarray, labels, kernel: KernelSpec) -> KernelDiscriminantModel:
    """Secondary max-margin space over anchor-camera primary embeddings."""
    return fit_nkmmc(embeddings, labels, kernel)


def build_anchor_context(
    unlabeled: FeatureTable, primary: Nk3mlModel, kernel: KernelSpec
) -> AnchorContext:
    anchor_camera = select_anchor(unlabeled)
    groups = view_identity_groups(unlabeled)
    anchor_classes = tuple(
        (wvid, rows) for (cam, wvid), rows in groups.items() if cam == anchor_camera
    )
    if len(anchor_classes) < 2:
        raise DataValidationError(
            f"anchor camera {anchor_camera} has {len(anchor_classes)} identities; need >= 2"
        )
    anchor_rows = np.concatenate([rows for _, rows in anchor_classes])
    anchor_labels = np.concatenate(
        [np.full(len(rows), wvid, dtype=np.int64) for wvid, rows in anchor_classes]
    )
    anchor_embedded = embed(primary, unlabeled.features[anchor_rows])
    secondary = fit_secondary(anchor_embedded, anchor_labels, kernel)
    return AnchorContext(
        anchor_camera=anchor_camera, anchor_classes=anchor_classes, secondary=secondary
    )


def _neighbor_lists(
    queries: np.ndarray, gallery: np.ndarray, k: int, exclude_self: bool
) -> list[np.ndarray]:
    dist = cdist(np.atleast_2d(queries), np.atleast_2d(gallery))
    if exclude_self:
        if dist.shape[0] != dist.shape[1]:
            raise DataValidationError("exclude_self requires queries and gallery to be the same set")
        np.fill_diagonal(dist, np.inf)
    # stable argsort: exact distance ties resolve to the lower gallery index
    order = np.argsort(dist, axis=1, kind="stable")
    out = []
    for i in range(dist.shape[0]):
        row = order[i]
        if exclude_self:
            row = row[dist[i, row] < np.inf]
        out.append(row[:k])
    return out


def knn(queries: np.ndarray, gallery: np.ndarray, k: int, exclude_self: bool = False) -> NeighborSets:
    """Top-k neighbors by ascending Euclidean distance.

    With exclude_self=True, queries and gallery must be the same point set and
    each point's own entry is skipped.
    """
    if k < 1:
        raise DataValidationError("k must be >= 1")
    gallery = np.atleast_2d(gallery)
    if gallery.shape[0] == 0:
        raise DataValidationError("empty gallery")
    return NeighborSets(k=k, neighbors=tuple(_neighbor_lists(queries, gallery, k, exclude_self)))


def k_reciprocal(
    queries: np.ndarray, gallery: np.ndarray, k: int, exclude_self: bool = False
) -> NeighborSets:
    """Mutual top-k neighbors: R_k(q) = {g in N_k(q) : q in N_k(g)}.

    The reverse neighborhoods N_k(g) are computed with the queries acting as
    the gallery of g. R_k(q) preserves the ascending-distance order of N_k(q).
    """
    if k < 1:
        raise DataValidationError("k must be >= 1")
    queries = np.atleast_2d(queries)
    gallery = np.atleast_2d(gallery)
    if gallery.shape[0] == 0:
        raise DataValidationError("empty gallery")
    forward = _neighbor_lists(queries, gallery, k, exclude_self)
    reverse = _neighbor_lists(gallery, queries, k, exclude_self)
    mutual = np.zeros((gallery.shape[0], queries.shape[0]), dtype=bool)
    for g, neigh in enumerate(reverse):
        mutual[g, neigh] = True
    reciprocal = tuple(neigh[mutual[neigh, i]] for i, neigh in enumerate(forward))
    return NeighborSets(k=k, neighbors=tuple(forward), reciprocal=reciprocal)


def mine_pseudo_classes(
    ctx: AnchorContext,
    unlabeled: FeatureTable,
    primary: Nk3mlModel,
    k: int = 1,
    iteration: int = 0,
) -> list[PseudoClass]:
    """Mutual cross-view identity matches against the anchor camera.

    Embeds every unlabeled sample into the secondary space, aggregates each
    (camera, within_view_id) identity to its centroid, and keeps anchor/other
    pairs that are k-reciprocal neighbors there. Identities are used at most
    once: candidate pairs are accepted greedily by descending affinity with
    (anchor id, matched id) tie order, which is also the output order.
    """
    if unlabeled.n == 0:
        raise DataValidationError("empty unlabeled set")
    cameras = unlabeled.cameras()
    others = [cam for cam in cameras if cam != ctx.anchor_camera]
    if not others:
        raise DataValidationError("no non-anchor cameras in the unlabeled set")

    secondary_points = project_kernel(ctx.secondary, embed(primary, unlabeled.features))
    groups = view_identity_groups(unlabeled)
    centroids = {key: secondary_points[rows].mean(axis=0) for key, rows in groups.items()}

    anchor_ids = [(ctx.anchor_camera, wvid) for wvid, _ in ctx.anchor_classes]
    anchor_matrix = np.vstack([centroids[key] for key in anchor_ids])

    candidates: list[PseudoClass] = []
    for cam in others:
        other_ids = [key for key in centroids if key[0] == cam]
        if not other_ids:
            continue
        other_matrix = np.vstack([centroids[key] for key in other_ids])
        dists = cdist(anchor_matrix, other_matrix)
        sigma = float(dists.mean())
        neighbor_sets = k_reciprocal(anchor_matrix, other_matrix, k)
        for i, matches in enumerate(neighbor_sets.reciprocal):
            for g in matches:
                dist = float(dists[i, g])
                affinity = 1.0 if sigma == 0.0 else math.exp(-(dist * dist) / (sigma * sigma))
                candidates.append(
                    PseudoClass(
                        anchor_identity=anchor_ids[i],
                        matched_identity=other_ids[int(g)],
                        affinity=affinity,
                        iteration_found=iteration,
                    )
                )

    candidates.sort(key=lambda pc: (-pc.affinity, pc.anchor_identity, pc.matched_identity))
    used: set[tuple[int, int]] = set()
    accepted = []
    for pc in candidates:
        if pc.anchor_identity in used or pc.matched_identity in used:
            continue
        used.add(pc.anchor_identity)
        used.add(pc.matched_identity)
        accepted.append(pc)
    return accepted


def export_pseudo_classes_csv(pseudo_classes, path) -> None:
    lines = ["iteration,anchor_camera,anchor_id,matched_camera,matched_id,affinity"]
    for pc in pseudo_classes:
        lines.append(
            f"{pc.iteration_found},{pc.anchor_identity[0]},{pc.anchor_identity[1]},"
            f"{pc.matched_identity[0]},{pc.matched_identity[1]},{repr(pc.affinity)}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
