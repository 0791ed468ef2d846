import json
import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from kdseg.data import (
    DatasetError,
    Manifest,
    SitePairing,
    SliceDataset,
    SliceRecord,
    SiteProfile,
    ellipse_mask,
    ingest_slices,
    load_batch,
    normalize_image,
    partition_by_sites,
    read_mask,
    split_dataset,
    split_sizes,
    synthesize_dataset,
)


def fake_manifest(n_sites=6, patients=3, slices=4):
    recs = [
        SliceRecord(s, f"p{p}", i, f"/x/{s}/{p}/{i}.png", f"/x/{s}/{p}/m{i}.png")
        for s in range(1, n_sites + 1) for p in range(patients) for i in range(slices)
    ]
    return Manifest(recs, "fake")


def write_slice(d, idx, img=None, mask=None):
    d.mkdir(parents=True, exist_ok=True)
    img = np.zeros((8, 8), np.uint16) if img is None else img
    mask = np.zeros((8, 8), np.uint8) if mask is None else mask
    Image.fromarray(img).save(d / f"img_{idx}.png")
    Image.fromarray(mask).save(d / f"mask_{idx}.png")


class TestIngest:
    def test_empty(self, tmp_path):
        assert len(ingest_slices(tmp_path)) == 0

    def test_enumeration(self, tmp_path):
        for site in (1, 2):
            for i in range(3):
                write_slice(tmp_path / f"site{site}" / "pA", i)
        m = ingest_slices(tmp_path)
        assert sorted(r.key for r in m) == [(s, "pA", i) for s in (1, 2) for i in range(3)]

    def test_missing_mask(self, tmp_path):
        d = tmp_path / "site1" / "p0"
        write_slice(d, 0)
        Image.fromarray(np.zeros((8, 8), np.uint16)).save(d / "img_1.png")
        with pytest.raises(DatasetError, match="img_1.png"):
            ingest_slices(tmp_path)

    def test_bad_layout(self, tmp_path):
        (tmp_path / "scanner_a").mkdir()
        with pytest.raises(DatasetError):
            ingest_slices(tmp_path)

    def test_manifest_round_trip(self, tmp_path):
        write_slice(tmp_path / "site3" / "p9", 2)
        m = ingest_slices(tmp_path)
        m.save(tmp_path / "manifest.json")
        stored = json.loads((tmp_path / "manifest.json").read_text())
        assert stored["records"][0]["image_path"] == "site3/p9/img_2.png"
        back = Manifest.load(tmp_path / "manifest.json")
        assert [r.key for r in back] == [r.key for r in m]
        assert os.path.samefile(back.records[0].image_path, m.records[0].image_path)

    def test_duplicate_keys_rejected(self):
        r = SliceRecord(1, "p", 0, "a", "b")
        with pytest.raises(DatasetError):
            Manifest([r, r])


class TestSplit:
    def test_protocol_arithmetic(self):
        assert split_sizes(1740, (0.8, 0.05, 0.15)) == (1392, 87, 261)
        recs = [SliceRecord(1 + i % 6, f"p{i // 15}", i, "i", "m") for i in range(1740)]
        parts = split_dataset(Manifest(recs), (0.8, 0.05, 0.15), seed=0, by_patient=False)
        assert tuple(len(p) for p in parts) == (1392, 87, 261)

    def test_deterministic(self):
        m = fake_manifest()
        a = split_dataset(m, seed=4)
        b = split_dataset(m, seed=4)
        assert [[r.key for r in p] for p in a] == [[r.key for r in p] for p in b]

    def test_patients_not_split_across_parts(self):
        parts = split_dataset(fake_manifest(), seed=1, by_patient=True)
        owners = [{(r.site, r.patient_id) for r in p} for p in parts]
        assert not (owners[0] & owners[1]) and not (owners[0] & owners[2]) and not (owners[1] & owners[2])

    @settings(max_examples=40)
    @given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 6), st.integers(0, 1000), st.booleans())
    def test_partition_property(self, n_sites, patients, slices, seed, by_patient):
        m = fake_manifest(n_sites, patients, slices)
        parts = split_dataset(m, (0.7, 0.1, 0.2), seed=seed, by_patient=by_patient)
        keys = [r.key for p in parts for r in p]
        assert len(keys) == len(set(keys))
        assert set(keys) == {r.key for r in m}
        units = len(m.patients()) if by_patient else len(m)
        got = [len({(r.site, r.patient_id) for r in p}) if by_patient else len(p) for p in parts]
        for g, ratio in zip(got, (0.7, 0.1, 0.2)):
            assert abs(g - units * ratio) <= 1 + 1e-9

    @pytest.mark.parametrize("ratios", [(0.8, 0.1, 0.2), (1.0, 0.0, 0.0), (0.5, 0.5)])
    def test_invalid_ratios(self, ratios):
        with pytest.raises(ValueError):
            split_dataset(fake_manifest(), ratios)


class TestPartition:
    def test_three_pairs(self):
        m = fake_manifest()
        shards, excluded = partition_by_sites(m, SitePairing([(1, 2), (3, 4), (5, 6)]))
        assert excluded == []
        assert [sorted({r.site for r in s}) for s in shards] == [[1, 2], [3, 4], [5, 6]]
        assert sum(len(s) for s in shards) == len(m)

    def test_excluded_reported(self, caplog):
        shards, excluded = partition_by_sites(fake_manifest(), [(1, 2)])
        assert len(shards) == 1 and excluded == [3, 4, 5, 6]
        assert "excluded" in caplog.text

    def test_overlap(self):
        with pytest.raises(ValueError):
            SitePairing([(1, 2), (2, 3)])

    @settings(max_examples=30)
    @given(st.permutations(list(range(1, 7))), st.integers(1, 3))
    def test_disjoint_and_exact(self, order, k):
        groups = [tuple(order[i:i + 2]) for i in range(0, 2 * k, 2)]
        m = fake_manifest()
        shards, excluded = partition_by_sites(m, groups)
        keys = [r.key for s in shards for r in s]
        assert len(keys) == len(set(keys))
        for g, s in zip(groups, shards):
            assert {r.key for r in s} == {r.key for r in m if r.site in g}
        assert set(excluded) == set(range(1, 7)) - {s for g in groups for s in g}


class TestSynthesis:
    def test_byte_identical(self, tmp_path):
        synthesize_dataset(3, None, seed=5, out_dir=tmp_path / "a", size=32)
        synthesize_dataset(3, None, seed=5, out_dir=tmp_path / "b", size=32)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for f in files_a:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_masks_match_ellipses(self, tmp_path):
        m = synthesize_dataset(4, seed=2, out_dir=tmp_path, size=40)
        meta = json.loads((tmp_path / "phantom_meta.json").read_text())
        by_key = {(s["site"], s["patient_id"], s["slice_index"]): s for s in meta["slices"]}
        assert len(by_key) == len(m) == 24
        for r in m:
            p = by_key[r.key]
            want = ellipse_mask(p["height"], p["width"], p["cx"], p["cy"], p["a"], p["b"], p["theta"])
            got = read_mask(r.mask_path)
            assert got.sum() >= 1
            assert np.array_equal(got.astype(bool), want)

    def test_noise_ordering(self, tmp_path):
        profiles = [SiteProfile(noise=0.01), SiteProfile(noise=0.2)]
        m = synthesize_dataset(10, profiles, seed=0, out_dir=tmp_path, size=48)
        var = {1: [], 2: []}
        for r in m:
            img = np.asarray(Image.open(r.image_path), dtype=np.float64) / 65535
            var[r.site].append(img.var())
        assert np.mean(var[2]) > np.mean(var[1])

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DatasetError):
            synthesize_dataset(1, out_dir=blocker / "sub")

    def test_needs_slices(self, tmp_path):
        with pytest.raises(ValueError):
            synthesize_dataset(0, out_dir=tmp_path)

    def test_manifest_written(self, tmp_path):
        m = synthesize_dataset(2, seed=0, out_dir=tmp_path, size=24)
        again = Manifest.load(tmp_path / "manifest.json")
        assert [r.key for r in again] == [r.key for r in m]
        assert [r.key for r in ingest_slices(tmp_path)] == sorted(r.key for r in m)


class TestLoading:
    def test_identity_resize(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 65535, (16, 16)).astype(np.uint16)
        write_slice(tmp_path / "site1" / "p", 0, img=img)
        x, y = load_batch(ingest_slices(tmp_path).records, (16, 16), dtype=torch.float64)
        want = normalize_image(img.astype(np.float64))
        assert np.array_equal(x[0, 0].numpy(), want)

    def test_shapes_and_binary(self, tmp_path):
        mask = np.zeros((8, 8), np.uint8)
        mask[2:5, 2:6] = 255
        write_slice(tmp_path / "site1" / "p", 0, mask=mask)
        x, y = load_batch(ingest_slices(tmp_path).records)
        assert x.shape == (1, 1, 384, 384) and y.shape == (1, 384, 384)
        assert set(torch.unique(y).tolist()) == {0, 1}
        assert y.sum() == 12 * 48 * 48

    def test_constant_minmax_zero(self, tmp_path):
        write_slice(tmp_path / "site1" / "p", 0, img=np.full((8, 8), 900, np.uint16))
        x, _ = load_batch(ingest_slices(tmp_path).records, (8, 8))
        assert x.abs().max() == 0

    @pytest.mark.parametrize("scale", [1, 255])
    def test_mask_encodings(self, tmp_path, scale):
        mask = np.zeros((8, 8), np.uint8)
        mask[:3] = scale
        write_slice(tmp_path / "site1" / "p", 0, mask=mask)
        assert np.array_equal(read_mask(tmp_path / "site1" / "p" / "mask_0.png"), (mask > 0).astype(np.uint8))

    def test_non_binary_mask(self, tmp_path):
        mask = np.zeros((8, 8), np.uint8)
        mask[0, 0] = 128
        write_slice(tmp_path / "site1" / "p", 0, mask=mask)
        with pytest.raises(DatasetError, match="not binary"):
            load_batch(ingest_slices(tmp_path).records, (8, 8))

    def test_unreadable(self, tmp_path):
        d = tmp_path / "site1" / "p"
        write_slice(d, 0)
        (d / "img_0.png").write_bytes(b"not a png")
        with pytest.raises(DatasetError):
            load_batch(ingest_slices(tmp_path).records, (8, 8))

    def test_zscore(self):
        img = np.arange(16, dtype=np.float64).reshape(4, 4)
        z = normalize_image(img, "zscore")
        assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-12
        with pytest.raises(ValueError):
            normalize_image(img, "robust")

    def test_dataset_batches_deterministic(self, tmp_path):
        m = synthesize_dataset(3, seed=1, out_dir=tmp_path, size=16)
        ds = SliceDataset(m, (16, 16))
        a = [y for _, y in ds.batches(4, torch.Generator().manual_seed(3))]
        b = [y for _, y in ds.batches(4, torch.Generator().manual_seed(3))]
        assert len(a) == 5 and all(torch.equal(p, q) for p, q in zip(a, b))
        ordered = torch.cat([y for _, y in ds.batches(4)])
        assert torch.equal(ordered, ds.masks)
