"""Embedding and label persistence plus the synthetic benchmark generator.

Binary formats
--------------
Embedding file (``.emb``):
    magic ``EMB1`` (4 bytes), ``N`` as u32 little-endian, ``d`` as u32
    little-endian, then ``N*d`` IEEE-754 float32 little-endian values in
    row-major order.
Label file (``.lbl``):
    magic ``LBL1`` (4 bytes), ``N`` as u32 little-endian, then ``N`` u32
    little-endian identity ids.
Manifest (``manifest.json``):
    UTF-8 JSON with exactly the keys ``n``, ``d``, ``seed``, ``source`` and
    ``checksum``.  The checksum is the first 8 bytes of the SHA-256 digest of
    the payload files concatenated in the order images, texts, aug_images,
    aug_texts, labels (absent files skipped), hex-encoded.  A string is used
    because a raw 64-bit integer does not survive JSON consumers that parse
    numbers as doubles.

Embeddings are stored un-normalized; normalization is an explicit pipeline
step.  Norms and dot products are accumulated in float64, storage is float32.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    DimensionMismatch,
    InvalidConfig,
    IoFailure,
    NonFiniteValue,
    TruncatedPayload,
    ZeroRow,
)

EMB_MAGIC = b"EMB1"
LBL_MAGIC = b"LBL1"
MANIFEST_KEYS = ("n", "d", "seed", "source", "checksum")

# payload files participating in the bundle checksum, in hash order
BUNDLE_FILES = ("images.emb", "texts.emb", "aug_images.emb", "aug_texts.emb", "labels.lbl")


@dataclass
class EmbeddingMatrix:
    """N x d float32 feature block for one modality."""

    data: np.ndarray
    modality: str = "image"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DimensionMismatch(f"embedding matrix must be 2-D, got {self.data.shape}")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class Manifest:
    n: int
    d: int
    seed: int
    source: str
    checksum: str

    def to_json(self) -> str:
        return json.dumps(
            {"n": self.n, "d": self.d, "seed": self.seed,
             "source": self.source, "checksum": self.checksum},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        raw = json.loads(text)
        unknown = set(raw) - set(MANIFEST_KEYS)
        if unknown:
            raise InvalidConfig(f"manifest has unknown keys: {sorted(unknown)}")
        missing = set(MANIFEST_KEYS) - set(raw)
        if missing:
            raise InvalidConfig(f"manifest is missing keys: {sorted(missing)}")
        return cls(n=int(raw["n"]), d=int(raw["d"]), seed=int(raw["seed"]),
                   source=str(raw["source"]), checksum=str(raw["checksum"]))


@dataclass
class DatasetBundle:
    """Paired image/text embeddings; row i of both modalities is the known pair."""

    images: EmbeddingMatrix
    texts: EmbeddingMatrix
    labels: np.ndarray
    manifest: Manifest
    aug_images: Optional[EmbeddingMatrix] = None
    aug_texts: Optional[EmbeddingMatrix] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n, d = self.images.n, self.images.dim
        for name, m in (("texts", self.texts), ("aug_images", self.aug_images),
                        ("aug_texts", self.aug_texts)):
            if m is not None and (m.n != n or m.dim != d):
                raise DimensionMismatch(
                    f"{name} shape {(m.n, m.dim)} disagrees with images {(n, d)}")
        if self.labels.shape != (n,):
            raise DimensionMismatch(
                f"labels length {self.labels.shape} disagrees with n={n}")

    @property
    def n(self) -> int:
        return self.images.n

    @property
    def dim(self) -> int:
        return self.images.dim


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _write_bytes(path, blob: bytes) -> None:
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def save_embeddings(m: EmbeddingMatrix | np.ndarray, path) -> None:
    """Write an embedding matrix in the EMB1 layout (idempotent overwrite)."""
    data = np.asarray(getattr(m, "data", m), dtype=np.float32)
    if data.ndim != 2:
        raise DimensionMismatch(f"expected 2-D matrix, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue("refusing to save non-finite embeddings")
    n, d = data.shape
    blob = EMB_MAGIC + struct.pack("<II", n, d) + data.astype("<f4").tobytes(order="C")
    _write_bytes(path, blob)


def load_embeddings(path, modality: str = "image") -> EmbeddingMatrix:
    """Read an EMB1 file.  Rows are returned exactly as stored (not normalized)."""
    blob = _read_bytes(path)
    if blob[:4] != EMB_MAGIC:
        raise BadMagic(f"{path}: expected magic {EMB_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 12:
        raise TruncatedPayload(f"{path}: header truncated ({len(blob)} bytes)")
    n, d = struct.unpack("<II", blob[4:12])
    expected = 4 * n * d
    payload = blob[12:]
    if len(payload) != expected:
        raise TruncatedPayload(
            f"{path}: payload is {len(payload)} bytes, expects {expected} for N={n}, d={d}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"{path}: payload contains NaN or Inf")
    return EmbeddingMatrix(data=data.copy(), modality=modality)


def save_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and labels.min() < 0):
        raise InvalidConfig("labels must be a 1-D array of non-negative ids")
    blob = LBL_MAGIC + struct.pack("<I", labels.size) + labels.astype("<u4").tobytes()
    _write_bytes(path, blob)


def load_labels(path) -> np.ndarray:
    blob = _read_bytes(path)
    if blob[:4] != LBL_MAGIC:
        raise BadMagic(f"{path}: expected magic {LBL_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 8:
        raise TruncatedPayload(f"{path}: header truncated ({len(blob)} bytes)")
    (n,) = struct.unpack("<I", blob[4:8])
    payload = blob[8:]
    if len(payload) != 4 * n:
        raise TruncatedPayload(f"{path}: payload is {len(payload)} bytes, expects {4 * n}")
    return np.frombuffer(payload, dtype="<u4").astype(np.int64)


def l2_normalize(m: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm (float64 accumulation)."""
    data = np.asarray(getattr(m, "data", m), dtype=np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroRow(int(zero[0]))
    return data / norms[:, None]


def payload_checksum(directory) -> str:
    """First 8 bytes of SHA-256 over the bundle payload files, hex-encoded."""
    h = hashlib.sha256()
    directory = Path(directory)
    for name in BUNDLE_FILES:
        p = directory / name
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def save_bundle(bundle: DatasetBundle, directory) -> Manifest:
    """Write a bundle directory: embeddings, labels and a checksummed manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_embeddings(bundle.images, directory / "images.emb")
    save_embeddings(bundle.texts, directory / "texts.emb")
    if bundle.aug_images is not None:
        save_embeddings(bundle.aug_images, directory / "aug_images.emb")
    if bundle.aug_texts is not None:
        save_embeddings(bundle.aug_texts, directory / "aug_texts.emb")
    save_labels(bundle.labels, directory / "labels.lbl")
    manifest = Manifest(n=bundle.n, d=bundle.dim, seed=bundle.manifest.seed,
                        source=bundle.manifest.source,
                        checksum=payload_checksum(directory))
    _write_bytes(directory / "manifest.json", manifest.to_json().encode("utf-8"))
    return manifest


def load_bundle(directory, verify_checksum: bool = True) -> DatasetBundle:
    directory = Path(directory)
    manifest = Manifest.from_json(_read_bytes(directory / "manifest.json").decode("utf-8"))
    if verify_checksum:
        actual = payload_checksum(directory)
        if actual != manifest.checksum:
            raise ChecksumMismatch(
                f"{directory}: manifest says {manifest.checksum}, payload hashes to {actual}")
    images = load_embeddings(directory / "images.emb", modality="image")
    texts = load_embeddings(directory / "texts.emb", modality="text")
    labels = load_labels(directory / "labels.lbl")
    aug_images = aug_texts = None
    if (directory / "aug_images.emb").exists():
        aug_images = load_embeddings(directory / "aug_images.emb", modality="image")
    if (directory / "aug_texts.emb").exists():
        aug_texts = load_embeddings(directory / "aug_texts.emb", modality="text")
    bundle = DatasetBundle(images=images, texts=texts, labels=labels,
                           manifest=manifest, aug_images=aug_images, aug_texts=aug_texts)
    if bundle.n != manifest.n or bundle.dim != manifest.d:
        raise DimensionMismatch(
            f"manifest says {(manifest.n, manifest.d)}, payload is {(bundle.n, bundle.dim)}")
    return bundle


def _spread_centroids(g: int, d: int, rng: np.random.Generator,
                      max_pair_cos: float) -> np.ndarray:
    """Random unit centroids with enforced pairwise separation."""
    centroids = np.empty((g, d))
    for i in range(g):
        for _ in range(1000):
            c = rng.normal(size=d)
            c /= np.linalg.norm(c)
            if i == 0 or np.max(centroids[:i] @ c) <= max_pair_cos:
                centroids[i] = c
                break
        else:
            raise InvalidConfig(
                f"cannot place {g} centroids in {d} dims with pairwise cos <= {max_pair_cos}")
    return centroids


def generate_synthetic(
    g: int,
    per_id_img: int,
    per_id_txt: int,
    d: int,
    sigma: float,
    seed: int,
    modality_offset: float = 0.1,
    modality_rotation: float = 0.0,
    max_centroid_cos: float = 0.5,
    centroids: Optional[np.ndarray] = None,
) -> DatasetBundle:
    """Ground-truth benchmark bundle: g identity clusters in both modalities.

    Each sample is ``normalize(centroid + modality_offset_vector + noise)``
    where the noise is an isotropic Gaussian vector of expected norm ``sigma``
    (per-coordinate scale ``sigma/sqrt(d)``), so ``sigma`` is directly the
    cluster radius on the unit sphere.  The two modalities see the same
    identity centroids shifted by a fixed random offset vector of norm
    ``modality_offset`` per modality; ``modality_rotation`` in [0, 1]
    additionally blends the text centroids toward a fixed random rotation of
    the image centroids (0 = aligned clouds, 1 = fully rotated), which makes
    cross-modal matching genuinely hard while intra-modal clusters stay tight.

    Rows are jointly permuted so identities are shuffled across the dataset
    while row i of images and texts always shares an identity.
    """
    if g < 2 or d < 8 or sigma < 0 or per_id_img < 1 or per_id_txt < 1:
        raise InvalidConfig(
            f"need g >= 2, d >= 8, sigma >= 0, per-id counts >= 1; "
            f"got g={g}, d={d}, sigma={sigma}, per_id=({per_id_img}, {per_id_txt})")
    if per_id_img != per_id_txt:
        # the bundle contract pairs row i of both modalities, which forces
        # equal per-identity counts
        raise InvalidConfig(
            f"paired bundle needs per_id_img == per_id_txt, got {per_id_img} != {per_id_txt}")
    if not (0.0 <= modality_rotation <= 1.0):
        raise InvalidConfig(f"modality_rotation must be in [0, 1], got {modality_rotation}")

    rng = np.random.default_rng(seed)
    if centroids is None:
        centroids = _spread_centroids(g, d, rng, max_centroid_cos)
    else:
        centroids = np.asarray(centroids, dtype=np.float64)
        if centroids.shape != (g, d):
            raise InvalidConfig(f"explicit centroids must be {g}x{d}, got {centroids.shape}")

    text_centroids = centroids
    if modality_rotation > 0.0:
        q, r = np.linalg.qr(rng.normal(size=(d, d)))
        q *= np.sign(np.diag(r))  # deterministic sign convention
        rotated = centroids @ q.T
        blend = (1.0 - modality_rotation) * centroids + modality_rotation * rotated
        text_centroids = blend / np.linalg.norm(blend, axis=1, keepdims=True)

    def offset_vec():
        if modality_offset == 0.0:
            return np.zeros(d)
        v = rng.normal(size=d)
        return modality_offset * v / np.linalg.norm(v)

    off_img = offset_vec()
    off_txt = offset_vec()

    n = g * per_id_img
    ids = np.repeat(np.arange(g), per_id_img)

    def sample_cloud(base, off):
        raw = base[ids] + off
        if sigma > 0:
            raw = raw + sigma * rng.normal(size=(n, d)) / np.sqrt(d)
        norms = np.linalg.norm(raw, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ZeroRow(int(zero[0]))
        return raw / norms[:, None]

    images = sample_cloud(centroids, off_img)
    texts = sample_cloud(text_centroids, off_txt)

    perm = rng.permutation(n)
    images, texts, labels = images[perm], texts[perm], ids[perm]

    manifest = Manifest(n=n, d=d, seed=seed, source="synthetic", checksum="")
    return DatasetBundle(
        images=EmbeddingMatrix(images.astype(np.float32), "image"),
        texts=EmbeddingMatrix(texts.astype(np.float32), "text"),
        labels=labels,
        manifest=manifest,
    )
