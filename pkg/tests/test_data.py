import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psmmlab import augment as A
from psmmlab import dataset as D
from psmmlab import loader as L
from psmmlab import protocols as P
from psmmlab import rankpool as R

from .conftest import manifest_of


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestGenerator:
    def test_layout_and_counts(self, small_root):
        catalog = D.scan_catalog(small_root)
        assert len(catalog) == 3 * 2 * 4 * 3
        for m in D.MODALITIES:
            assert sum(r.modality == m for r in catalog) == 24
        assert (small_root / "A_0001" / "real_1" / "color" / "frame_0000.png").is_file()
        assert {r.frame_count for r in catalog} == {14}

    def test_deterministic_per_seed(self, tmp_path):
        a = D.generate_synthetic(tmp_path / "a", 1, 2, 8, seed=7)
        b = D.generate_synthetic(tmp_path / "b", 1, 2, 8, seed=7)
        c = D.generate_synthetic(tmp_path / "c", 1, 2, 8, seed=8)
        assert tree_digest(a) == tree_digest(b) != tree_digest(c)

    def test_3d_subjects(self, spread_root):
        catalog = D.scan_catalog(spread_root)
        masks = [r for r in catalog if r.pai == "mask3d"]
        silica = [r for r in catalog if r.pai == "silica"]
        assert len(masks) == 18 * 3 and len(silica) == 8 * 3
        assert {r.subject_id for r in masks} == {501} and {r.subject_id for r in silica} == {502}
        assert all(r.label == 0 for r in masks + silica)
        assert masks[0].lighting.count("/") == 1

    def test_preconditions(self, tmp_path):
        with pytest.raises(ValueError):
            D.generate_synthetic(tmp_path, 1, 2, side=4)
        with pytest.raises(ValueError):
            D.generate_synthetic(tmp_path, 1, 1, side=8)
        with pytest.raises(ValueError):
            D.generate_synthetic(tmp_path, subject_ids=[0])

    def test_unwritable_root(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(D.CatalogError):
            D.generate_synthetic(blocker / "sub", 1, 2, 8)

    def test_classes_differ_in_temporal_statistics(self, small_root):
        def motion(path):
            f = D.load_frames(small_root, path)
            return np.abs(np.diff(f, axis=0)).mean()

        assert motion("A_0001/print_1/color") < 5 < motion("A_0001/replay_1/color")


class TestCatalog:
    def test_empty_root(self, tmp_path):
        assert D.scan_catalog(tmp_path) == []

    def test_missing_root(self, tmp_path):
        with pytest.raises(D.CatalogError):
            D.scan_catalog(tmp_path / "nope")

    def test_clip_without_frames_is_named(self, tmp_path):
        (tmp_path / "A_0001" / "real_1" / "color").mkdir(parents=True)
        with pytest.raises(D.CatalogError, match="A_0001/real_1/color"):
            D.scan_catalog(tmp_path)

    @pytest.mark.parametrize("bad", ["X_0001/real_1/color", "A_1/real_1/color", "A_0001/cutout_1/color", "A_0001/real_1/rgb"])
    def test_malformed_names(self, tmp_path, bad):
        (tmp_path / bad).mkdir(parents=True)
        with pytest.raises(D.CatalogError):
            D.scan_catalog(tmp_path)

    def test_load_frames_range(self, small_root):
        f = D.load_frames(small_root, "C_0002/real_1/depth")
        assert f.shape == (14, 32, 32, 3) and f.min() >= 0 and f.max() <= 255


def random_catalog(seed, n=60):
    rng = np.random.default_rng(seed)
    recs = []
    for _ in range(n):
        pai = D.PAIS[rng.integers(5)]
        subject = int(rng.integers(1, 501)) if pai in D.PAIS_2D else int(rng.integers(501, 540))
        eth = D.ETHNICITIES[rng.integers(3)]
        mod = D.MODALITIES[rng.integers(3)]
        k = int(rng.integers(1, 3))
        recs.append(D.ClipRecord(subject, eth, mod, pai, k, "", D.clip_path(eth, subject, pai, k, mod), 2))
    return recs


def brute_force_filter(rec, split, name):
    """Membership written directly from the protocol definitions."""
    s = int(name[2]) - 1
    eth, mod = D.ETHNICITIES[s % 3], D.MODALITIES[s % 3]
    lo, hi = {"train": (1, 200), "valid": (201, 300), "test": (301, 500)}[split]
    proto = name[0]
    if rec.pai in D.PAIS_3D:
        if split != "test":
            return False
        if proto == "3":
            return rec.modality != mod
        if proto == "4":
            return rec.modality == mod
        return True
    if not lo <= rec.subject_id <= hi:
        return False
    if proto == "1":
        return (rec.ethnicity == eth) == (split != "test")
    if proto == "2":
        seen, unseen = ("print", "replay") if name == "2_1" else ("replay", "print")
        return rec.pai in ("real", seen if split != "test" else unseen)
    if proto == "3":
        return (rec.modality == mod) == (split != "test")
    test = split == "test"
    return (
        (rec.ethnicity != eth if test else rec.ethnicity == eth)
        and rec.modality == mod
        and rec.pai in (("real", "print") if test else ("real", "replay"))
    )


class TestProtocols:
    def test_eleven_sub_protocols(self):
        assert list(P.BUILTIN_PROTOCOLS) == list(P.SUB_PROTOCOLS)

    def test_two_subject_protocol_1_1_train(self, small_root):
        out = P.protocol_split(D.scan_catalog(small_root), P.get_protocol("1_1"), allow_empty=True)
        assert {(r.ethnicity, r.subject) for r in out["train"]} == {("A", 1), ("A", 2)}
        assert len(out["train"]) == 2 * 4 * 3
        assert out["valid"] == [] and out["test"] == []

    def test_empty_split_rejected(self, small_root):
        with pytest.raises(P.ProtocolError):
            P.protocol_split(D.scan_catalog(small_root), P.get_protocol("1_1"))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from(P.SUB_PROTOCOLS))
    def test_filters_sound_complete_and_disjoint(self, seed, name):
        catalog = random_catalog(seed)
        out = P.protocol_split(catalog, P.get_protocol(name), allow_empty=True)
        for split in P.SPLITS:
            want = sorted(r.path for r in catalog if brute_force_filter(r, split, name))
            assert sorted(r.path for r in out[split]) == want
        subjects = {s: {(r.ethnicity, r.subject) for r in out[s] if r.pai in D.PAIS_2D} for s in P.SPLITS}
        assert not subjects["train"] & subjects["valid"]
        assert not subjects["train"] & subjects["test"]
        assert not subjects["valid"] & subjects["test"]

    def test_table_round_trip(self):
        text = P.format_protocol_table()
        assert P.format_protocol_table(P.parse_protocol_table(text).values()) == text
        assert len(text.strip().splitlines()) == 1 + 33

    def test_table_override(self, small_root):
        text = "x_1 train A,C color real,print 1-1 0\nx_1 valid A color real 2-2 0\nx_1 test E ir real 1-2 1\n"
        spec = P.parse_protocol_table(text)["x_1"]
        out = P.protocol_split(D.scan_catalog(small_root), spec)
        assert len(out["train"]) == 2 * 3 and len(out["valid"]) == 1 and len(out["test"]) == 2

    @pytest.mark.parametrize(
        "text",
        ["a train A color real 1-2\n", "a holdout A color real 1-2 0\n", "a train Z color real 1-2 0\n", "a train A color real 1-2 0\n"],
    )
    def test_bad_tables(self, text):
        with pytest.raises(P.ProtocolError):
            P.parse_protocol_table(text)

    def test_unknown_protocol(self):
        with pytest.raises(P.ProtocolError):
            P.get_protocol("5_1")

    def test_manifest_round_trip(self, tmp_path, small_root):
        rows = manifest_of(small_root)
        path = P.write_manifest(tmp_path / "m.txt", rows)
        assert P.read_manifest(path) == rows
        first = path.read_text().splitlines()[0].split()
        assert len(first) == 7 and first[1] in ("0", "1")

    def test_manifest_rejects_bad_label(self, tmp_path):
        (tmp_path / "m.txt").write_text("A_0001/real_1/color 2 1 A color real train\n")
        with pytest.raises(P.ProtocolError):
            P.read_manifest(tmp_path / "m.txt")


class TestAugment:
    def test_identity_params(self, rng):
        img = rng.random((32, 32, 3))
        out = A.apply_params(img, A.AugmentParams.identity(4), 32, 4)
        # resize to 36 then centre crop back to 32: an interpolation, not a copy
        assert out.shape == (32, 32, 3)
        np.testing.assert_array_equal(A.apply_params(img, A.AugmentParams.identity(0), 32, 0), img)

    def test_rotation_by_180_twice(self, rng):
        for side in (31, 32):
            img = rng.random((side, side, 3))
            back = A.rotate(A.rotate(img, 180.0), 180.0)
            np.testing.assert_allclose(back, img, atol=1e-6)

    def test_deterministic_per_seed(self, rng):
        img = rng.random((32, 32, 3))
        np.testing.assert_array_equal(A.augment(img, 3), A.augment(img, 3))
        assert not np.array_equal(A.augment(img, 3), A.augment(img, 4))

    def test_output_range_and_size(self, rng):
        img = rng.random((40, 40, 3))
        out = A.augment(img, 0, out_size=32, pad=8)
        assert out.shape == (32, 32, 3) and out.min() >= 0 and out.max() <= 1

    def test_jitter_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = A.sample_params(rng, 4)
            assert -180 <= p.angle <= 180 and 0 <= p.crop_x <= 4 and 0 <= p.crop_y <= 4
            assert max(map(abs, p.brightness + p.contrast)) <= 0.2

    def test_rejects_non_square(self, rng):
        with pytest.raises(ValueError):
            A.augment(rng.random((8, 9, 3)), 0)


class TestLoader:
    def test_batch_shapes_and_labels(self, small_root):
        rows = manifest_of(small_root, modalities=["color"])
        batch = L.load_batch(small_root, rows, 4, k=7, seed=0, size=32)
        s, d = batch.inputs["color"]
        assert s.shape == d.shape == (4, 3, 32, 32)
        labels = {r.sample_key: r.label for r in rows}
        assert batch.labels.ravel().tolist() == [labels[k] for k in batch.keys]

    def test_dynamic_image_matches_rank_pool(self, small_root):
        rows = manifest_of(small_root, modalities=["depth"])
        batch = L.load_batch(small_root, rows, 3, k=7, seed=2, size=32)
        for i, key in enumerate(batch.keys):
            frames = D.load_frames(small_root, key + "/depth")
            want = R.dynamic_image(frames, 7, batch.window_starts[i])
            np.testing.assert_allclose(batch.inputs["depth"][1][i].transpose(1, 2, 0), want, atol=1e-12)
            static = frames[batch.frame_indices[i]] / 255
            np.testing.assert_array_equal(batch.inputs["depth"][0][i].transpose(1, 2, 0), static)
            assert batch.window_starts[i] <= batch.frame_indices[i] < batch.window_starts[i] + 7

    def test_modalities_share_sample_and_geometry(self, small_root):
        loader = L.BatchLoader(small_root, manifest_of(small_root), D.MODALITIES, 32, seed=1)
        batch = loader.random_batch(0, 6)
        assert all(batch.inputs[m][0].shape == (6, 3, 32, 32) for m in D.MODALITIES)
        # a flat-depth print clip rotated with zero fill: every modality has the same zero corners
        zero = {m: batch.inputs[m][0][:, 0] == 0 for m in D.MODALITIES}
        np.testing.assert_array_equal(zero["depth"], zero["ir"])

    def test_epoch_order_is_deterministic(self, small_root):
        rows = manifest_of(small_root)

        def keys(seed):
            loader = L.BatchLoader(small_root, rows, D.MODALITIES, 32, seed=seed)
            return [b.keys for b in loader.epoch(0, 10)]

        assert keys(0) == keys(0) != keys(1)
        assert sorted(sum(keys(0), [])) == sorted({r.sample_key for r in rows})

    def test_threaded_precompute_matches_serial(self, small_root, monkeypatch):
        paths = [r.path for r in manifest_of(small_root, modalities=["ir"])][:4]
        serial = L.ClipStore(small_root)
        serial.precompute(paths, workers=1)
        monkeypatch.setenv("PSMMLAB_THREADS", "3")
        threaded = L.ClipStore(small_root)
        threaded.precompute(paths)
        assert serial._dyn.keys() == threaded._dyn.keys()
        for k in serial._dyn:
            np.testing.assert_array_equal(serial._dyn[k], threaded._dyn[k])

    def test_bad_thread_setting(self, monkeypatch):
        monkeypatch.setenv("PSMMLAB_THREADS", "many")
        with pytest.raises(L.LoaderError):
            L.worker_count()

    def test_errors(self, small_root):
        with pytest.raises(L.LoaderError):
            L.BatchLoader(small_root, [], ["color"], 32)
        rows = manifest_of(small_root, modalities=["color"])
        with pytest.raises(L.LoaderError):
            L.BatchLoader(small_root, rows, ["color", "ir"], 32)
