import numpy as np
import pytest

from psmmlab import dataset, protocols


def manifest_of(root, split="train", modalities=None):
    rows = []
    for r in dataset.scan_catalog(root):
        if modalities is None or r.modality in modalities:
            rows.append(protocols.ManifestRow(r.path, r.label, r.subject_id, r.ethnicity, r.modality, r.pai, split))
    return rows


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """2 subjects per ethnicity, 14 frames of 32x32."""
    return dataset.generate_synthetic(tmp_path_factory.mktemp("small"), 2, 14, 32, seed=0)


@pytest.fixture(scope="session")
def spread_root(tmp_path_factory):
    """Subjects in every split range plus a few 3D attack subjects; 7 frames per clip."""
    return dataset.generate_synthetic(
        tmp_path_factory.mktemp("spread"),
        frames_per_clip=7,
        side=16,
        seed=3,
        mask_subjects=1,
        silica_subjects=1,
        subject_ids=[1, 2, 3, 201, 202, 301, 302],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
