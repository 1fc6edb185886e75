"""Persistence formats, normalization and the synthetic generator."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmatch.errors import (
    BadMagic,
    ChecksumMismatch,
    InvalidConfig,
    IoFailure,
    NonFiniteValue,
    TruncatedPayload,
    ZeroRow,
)
from xmatch.io import (
    DatasetBundle,
    EmbeddingMatrix,
    Manifest,
    generate_synthetic,
    l2_normalize,
    load_bundle,
    load_embeddings,
    load_labels,
    save_bundle,
    save_embeddings,
    save_labels,
)


class TestEmbeddingFormat:
    def test_round_trip_bitwise(self, tmp_path):
        m = np.arange(12, dtype=np.float32).reshape(3, 4) / 7.0
        save_embeddings(m, tmp_path / "a.emb")
        back = load_embeddings(tmp_path / "a.emb")
        assert back.data.dtype == np.float32
        np.testing.assert_array_equal(back.data, m)

    def test_layout_single_row(self, tmp_path):
        # magic(4) + N(4) + d(4) + 2 float32 payload = 20 bytes
        save_embeddings(np.array([[1.0, 0.0]], dtype=np.float32), tmp_path / "a.emb")
        blob = (tmp_path / "a.emb").read_bytes()
        assert blob[:4] == b"EMB1"
        assert struct.unpack("<II", blob[4:12]) == (1, 2)
        assert len(blob) - 12 == 8

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.emb").write_bytes(b"XXXX" + struct.pack("<II", 1, 2) + b"\0" * 8)
        with pytest.raises(BadMagic):
            load_embeddings(tmp_path / "x.emb")

    def test_truncated_payload(self, tmp_path):
        # header says N=2, d=3 -> expects 24 payload bytes, give 20
        (tmp_path / "x.emb").write_bytes(b"EMB1" + struct.pack("<II", 2, 3) + b"\0" * 20)
        with pytest.raises(TruncatedPayload, match="24"):
            load_embeddings(tmp_path / "x.emb")

    def test_nonfinite_payload_rejected(self, tmp_path):
        bad = np.array([[np.nan, 1.0]], dtype="<f4")
        (tmp_path / "x.emb").write_bytes(b"EMB1" + struct.pack("<II", 1, 2) + bad.tobytes())
        with pytest.raises(NonFiniteValue):
            load_embeddings(tmp_path / "x.emb")

    def test_save_to_unwritable_path(self, tmp_path):
        with pytest.raises(IoFailure):
            save_embeddings(np.ones((1, 2), dtype=np.float32),
                            tmp_path / "no" / "such" / "dir" / "a.emb")

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 7), d=st.integers(2, 9), seed=st.integers(0, 10_000))
    def test_round_trip_property(self, tmp_path_factory, n, d, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(n, d)).astype(np.float32)
        path = tmp_path_factory.mktemp("rt") / "m.emb"
        save_embeddings(m, path)
        np.testing.assert_array_equal(load_embeddings(path).data, m)


class TestLabelFormat:
    def test_round_trip(self, tmp_path):
        labels = np.array([0, 3, 3, 7], dtype=np.int64)
        save_labels(labels, tmp_path / "l.lbl")
        np.testing.assert_array_equal(load_labels(tmp_path / "l.lbl"), labels)
        blob = (tmp_path / "l.lbl").read_bytes()
        assert blob[:4] == b"LBL1"
        assert struct.unpack("<I", blob[4:8]) == (4,)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "l.lbl").write_bytes(b"NOPE" + b"\0" * 8)
        with pytest.raises(BadMagic):
            load_labels(tmp_path / "l.lbl")


class TestNormalize:
    def test_three_four_five(self):
        out = l2_normalize(np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(5, 7))
        once = l2_normalize(m)
        twice = l2_normalize(once)
        np.testing.assert_allclose(once, twice, atol=1e-7)

    def test_zero_row(self):
        with pytest.raises(ZeroRow) as err:
            l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert err.value.index == 1


class TestBundle:
    def test_save_load_with_checksum(self, tmp_path):
        bundle = generate_synthetic(g=3, per_id_img=2, per_id_txt=2, d=8, sigma=0.1, seed=1)
        manifest = save_bundle(bundle, tmp_path)
        assert manifest.checksum
        back = load_bundle(tmp_path)
        np.testing.assert_array_equal(back.images.data, bundle.images.data)
        np.testing.assert_array_equal(back.labels, bundle.labels)

    def test_checksum_mismatch_detected(self, tmp_path):
        bundle = generate_synthetic(g=3, per_id_img=2, per_id_txt=2, d=8, sigma=0.1, seed=1)
        save_bundle(bundle, tmp_path)
        blob = bytearray((tmp_path / "images.emb").read_bytes())
        blob[-1] ^= 0xFF
        (tmp_path / "images.emb").write_bytes(bytes(blob))
        with pytest.raises(ChecksumMismatch):
            load_bundle(tmp_path)

    def test_manifest_rejects_unknown_keys(self):
        with pytest.raises(InvalidConfig):
            Manifest.from_json('{"n": 1, "d": 2, "seed": 0, "source": "x", '
                               '"checksum": "00", "extra": 1}')

    def test_paired_labels(self):
        bundle = generate_synthetic(g=4, per_id_img=3, per_id_txt=3, d=8, sigma=0.2, seed=3)
        # row i of images and texts shares one identity by construction; the
        # labels array serves both modalities
        assert bundle.images.n == bundle.texts.n == bundle.labels.size


class TestSyntheticGenerator:
    def test_zero_noise_zero_offset_samples_equal_centroids(self):
        bundle = generate_synthetic(g=4, per_id_img=3, per_id_txt=3, d=8, sigma=0.0,
                                    seed=5, modality_offset=0.0)
        imgs = bundle.images.data.astype(np.float64)
        txts = bundle.texts.data.astype(np.float64)
        labels = bundle.labels
        for lab in range(4):
            rows = imgs[labels == lab]
            # all samples of one identity coincide (they are the centroid)
            assert np.allclose(rows, rows[0], atol=1e-6)
            assert np.allclose(txts[labels == lab], rows[0], atol=1e-6)
        sims = imgs @ imgs.T
        same = labels[:, None] == labels[None, :]
        assert np.allclose(sims[same], 1.0, atol=1e-5)

    def test_antipodal_centroids_give_cosine_minus_one(self):
        c = np.zeros((2, 8))
        c[0, 0] = 1.0
        c[1, 0] = -1.0
        bundle = generate_synthetic(g=2, per_id_img=2, per_id_txt=2, d=8, sigma=0.0,
                                    seed=0, modality_offset=0.0, centroids=c)
        imgs = bundle.images.data.astype(np.float64)
        labels = bundle.labels
        cross = imgs[labels == 0] @ imgs[labels == 1].T
        np.testing.assert_allclose(cross, -1.0, atol=1e-6)

    def test_deterministic(self):
        a = generate_synthetic(g=5, per_id_img=2, per_id_txt=2, d=16, sigma=0.3, seed=11)
        b = generate_synthetic(g=5, per_id_img=2, per_id_txt=2, d=16, sigma=0.3, seed=11)
        np.testing.assert_array_equal(a.images.data, b.images.data)
        np.testing.assert_array_equal(a.texts.data, b.texts.data)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_cluster_margins_match_frozen_oracle_stats(self):
        # brute-force statistics computed once by tests/oracles-style loops
        # over the g=50, per-id=4, d=64, sigma=0.3, seed=7 bundle
        bundle = generate_synthetic(g=50, per_id_img=4, per_id_txt=4, d=64,
                                    sigma=0.3, seed=7)
        imgs = bundle.images.data.astype(np.float64)
        labels = bundle.labels
        sims = imgs @ imgs.T
        same = labels[:, None] == labels[None, :]
        off = ~np.eye(labels.size, dtype=bool)
        intra = sims[same & off].mean()
        cross = sims[~same].mean()
        assert intra > cross
        np.testing.assert_allclose(intra, 0.9193665964304061, atol=1e-9)
        np.testing.assert_allclose(cross, 0.010824829514298806, atol=1e-9)

    def test_invalid_configs(self):
        with pytest.raises(InvalidConfig):
            generate_synthetic(g=1, per_id_img=2, per_id_txt=2, d=8, sigma=0.1, seed=0)
        with pytest.raises(InvalidConfig):
            generate_synthetic(g=2, per_id_img=2, per_id_txt=3, d=8, sigma=0.1, seed=0)
        with pytest.raises(InvalidConfig):
            generate_synthetic(g=2, per_id_img=2, per_id_txt=2, d=4, sigma=0.1, seed=0)
