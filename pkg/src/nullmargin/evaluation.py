"""CMC evaluation under the probe/gallery protocol, averaged over trials.

Rankings sort the gallery by Euclidean distance in embedding space (exact
ties resolve to the lower gallery index). Rank-N accuracy is the percentage
of probes whose earliest correct-identity gallery position is <= N. The
protocol runner splits, fits (labeled-only or with self-training), reduces
probe and gallery to one image per identity per camera, and averages the
per-trial accuracy percentages.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .dataio import ExperimentSplit, FeatureTable, SplitSpec, make_split, _trial_rng
from .errors import DataValidationError, ProtocolError
from .nk3ml import Nk3mlModel, embed, fit_nk3ml, model_checksum
from .selftrain import LoopConfig, LoopTrace, run_self_training

DEFAULT_RANKS = (1, 5, 10, 20)

MODES = ("labeled_only", "semi_supervised")


@dataclass(frozen=True)
class CmcCurve:
    ranks: tuple[tuple[int, float], ...]   # (N, accuracy percentage)
    trials_averaged: int

    def accuracy_at(self, n: int) -> float:
        for rank, acc in self.ranks:
            if rank == n:
                return acc
        raise KeyError(f"rank {n} not evaluated")


@dataclass
class ProtocolResult:
    curve: CmcCurve
    per_trial: tuple[CmcCurve, ...]
    model_checksums: tuple[str, ...]
    bandwidths: tuple[float, ...]
    final_model: Nk3mlModel
    final_trace: LoopTrace | None


def rank_gallery(model: Nk3mlModel, probe: FeatureTable, gallery: FeatureTable) -> np.ndarray:
    """(n_probe, n_gallery) gallery indices, ascending embedding distance."""
    if probe.n == 0 or gallery.n == 0:
        raise DataValidationError("probe and gallery must be nonempty")
    dist = cdist(embed(model, probe.features), embed(model, gallery.features))
    return np.argsort(dist, axis=1, kind="stable")


def cmc(rankings: np.ndarray, probe_identities, gallery_identities, ns) -> CmcCurve:
    """Rank-N accuracies from per-probe gallery rankings.

    Raises ProtocolError (naming the identity) if a probe identity never
    occurs in the gallery; extra gallery-only identities are fine.
    """
    probe_ids = list(probe_identities)
    gallery_ids = np.asarray(list(gallery_identities))
    if rankings.shape != (len(probe_ids), len(gallery_ids)):
        raise DataValidationError(
            f"rankings shape {rankings.shape} does not match "
            f"{len(probe_ids)} probes x {len(gallery_ids)} gallery entries"
        )
    positions = np.empty(len(probe_ids), dtype=np.int64)
    for i, ident in enumerate(probe_ids):
        hits = np.flatnonzero(gallery_ids[rankings[i]] == ident)
        if hits.size == 0:
            raise ProtocolError(f"probe identity {ident} not present in the gallery")
        positions[i] = hits[0] + 1
    ranks = tuple(
        (int(n), 100.0 * float(np.count_nonzero(positions <= n)) / len(probe_ids))
        for n in ns
    )
    return CmcCurve(ranks=ranks, trials_averaged=1)


def single_shot_view(table: FeatureTable, seed: int, trial: int) -> FeatureTable:
    """One image per (identity, camera), chosen by the trial's stream."""
    rng = _trial_rng(seed ^ 0x5351, trial)   # decorrelated from the split stream
    keep: list[int] = []
    groups: dict[tuple[int, int], list[int]] = {}
    for row in range(table.n):
        ident = table.identities[row]
        if ident is None:
            raise DataValidationError("single-shot reduction needs labeled probe/gallery rows")
        groups.setdefault((ident, int(table.camera_ids[row])), []).append(row)
    for key in sorted(groups):
        rows = groups[key]
        keep.append(rows[0] if len(rows) == 1 else rows[int(rng.integers(len(rows)))])
    return table.subset(sorted(keep))


def _replace_features(table: FeatureTable, features: np.ndarray) -> FeatureTable:
    return FeatureTable(
        sample_ids=table.sample_ids,
        camera_ids=table.camera_ids,
        identities=table.identities,
        within_view_ids=table.within_view_ids,
        features=features,
    )


def _reduce_split(split: ExperimentSplit) -> tuple[ExperimentSplit, np.ndarray]:
    """Rotate the trial into an orthonormal basis of the train feature span.

    With d far above the train sample count, every null-space fit is O(d n^2).
    An orthonormal change of basis preserves scatter, null directions, kernel
    distances and rankings exactly, so the whole trial can run in <= n_train
    dimensions; the fitted model is lifted back with the returned basis.
    """
    train = np.vstack([split.labeled.features, split.unlabeled.features])
    basis, _ = np.linalg.qr(train.T)     # (d, n_train)
    return (
        ExperimentSplit(
            labeled=_replace_features(split.labeled, split.labeled.features @ basis),
            unlabeled=_replace_features(split.unlabeled, split.unlabeled.features @ basis),
            probe=_replace_features(split.probe, split.probe.features @ basis),
            gallery=_replace_features(split.gallery, split.gallery.features @ basis),
        ),
        basis,
    )


def _lift_model(model: Nk3mlModel, basis: np.ndarray) -> Nk3mlModel:
    """Map a model fitted in reduced coordinates back to feature space."""
    from .nfst import NullProjector

    nullproj = NullProjector(
        w_n=basis @ model.nullproj.w_n,
        mean=basis @ model.nullproj.mean,
        class_count=model.nullproj.class_count,
        ortho_basis=None,
        coeffs=None,
    )
    return Nk3mlModel(
        nullproj=nullproj,
        margin=model.margin,
        class_count=model.class_count,
        feature_dim=basis.shape[0],
        output_dim=model.output_dim,
    )


def _run_trial(
    table: FeatureTable,
    spec: SplitSpec,
    cfg: LoopConfig,
    mode: str,
    ns,
    trial: int,
    reduce_span: bool | None = None,
) -> tuple[CmcCurve, str, float, Nk3mlModel, LoopTrace | None]:
    split: ExperimentSplit = make_split(table, spec, trial)
    n_train = split.labeled.n + split.unlabeled.n
    if reduce_span is None:
        # Only worth it when the feature dimension dwarfs the train count;
        # below that the QR + projection overhead cancels the gain.
        reduce_span = table.dim > 4 * n_train
    basis = None
    if reduce_span:
        split, basis = _reduce_split(split)
    if mode == "labeled_only":
        model = fit_nk3ml(split.labeled, cfg.kernel)
        trace = None
    else:
        model, trace = run_self_training(split.labeled, split.unlabeled, cfg)
    probe = single_shot_view(split.probe, spec.seed, trial)
    gallery = single_shot_view(split.gallery, spec.seed, trial)
    rankings = rank_gallery(model, probe, gallery)
    curve = cmc(rankings, probe.identities, gallery.identities, ns)
    if basis is not None:
        model = _lift_model(model, basis)
    return curve, model_checksum(model), model.margin.resolved_bandwidth, model, trace


def run_protocol(
    table: FeatureTable,
    spec: SplitSpec,
    cfg: LoopConfig,
    mode: str,
    ns=DEFAULT_RANKS,
    threads: int = 1,
) -> ProtocolResult:
    """Split/fit/evaluate over spec.trials trials and average the accuracies.

    Trials are independent; with threads > 1 they run on a thread pool and
    results are still accumulated in trial order, so output is identical at
    any thread count.
    """
    if mode not in MODES:
        raise DataValidationError(f"mode must be one of {MODES}, got {mode!r}")
    trials = range(spec.trials)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: _run_trial(table, spec, cfg, mode, ns, t), trials))
    else:
        results = [_run_trial(table, spec, cfg, mode, ns, t) for t in trials]

    per_trial = tuple(res[0] for res in results)
    mean_ranks = tuple(
        (int(n), float(np.mean([curve.accuracy_at(n) for curve in per_trial])))
        for n in ns
    )
    return ProtocolResult(
        curve=CmcCurve(ranks=mean_ranks, trials_averaged=spec.trials),
        per_trial=per_trial,
        model_checksums=tuple(res[1] for res in results),
        bandwidths=tuple(res[2] for res in results),
        final_model=results[-1][3],
        final_trace=results[-1][4],
    )
