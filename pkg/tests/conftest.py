import numpy as np
import pytest

from nullmargin import FeatureTable, SyntheticSpec, generate_synthetic


def make_table(features, cameras, identities, within_view=None, prefix="s"):
    """FeatureTable from plain arrays; within_view defaults to the identity."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    n = features.shape[0]
    if within_view is None:
        within_view = [i if i is not None else 0 for i in identities]
    return FeatureTable(
        sample_ids=tuple(f"{prefix}{i}" for i in range(n)),
        camera_ids=np.asarray(cameras),
        identities=tuple(identities),
        within_view_ids=np.asarray(within_view),
        features=features,
    )


def labeled_gaussians(rng, classes, per_class, dim, spread=0.05, cameras=2):
    """Well-separated class blobs split across cameras, fully labeled."""
    feats, cams, idents = [], [], []
    centers = rng.standard_normal((classes, dim)) * 10.0
    for c in range(classes):
        for j in range(per_class):
            feats.append(centers[c] + spread * rng.standard_normal(dim))
            cams.append(j % cameras)
            idents.append(c)
    return make_table(np.array(feats), cams, idents)


@pytest.fixture(scope="session")
def noisefree_table():
    spec = SyntheticSpec(identities=12, cameras=2, dim=30, seed=7)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def easy_table():
    spec = SyntheticSpec(
        identities=20,
        cameras=2,
        dim=60,
        per_camera_transform_strength=0.2,
        noise_sigma=0.02,
        seed=11,
    )
    return generate_synthetic(spec)
