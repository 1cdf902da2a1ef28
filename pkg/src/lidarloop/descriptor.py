"""Global place-recognition descriptors and the retrieval database.

A scan's keypoint features are aggregated into one fixed-size vector:
soft-assignment to learned clusters, VLAD residual pooling, linear
compression, context gating, final L2 normalization. Descriptors go into
an append-only database; loop candidates come back from an exact
linear-scan query that skips the most recent scans.

Cluster and compression parameters are fit offline from training scans
(k-means plus PCA) rather than learned end-to-end; see
:func:`fit_vlad_params`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .features import KeypointFeatures

_PARAMS_MAGIC = b"LLVP"
_PARAMS_VERSION = 1
_STORE_MAGIC = b"LLDB"


def _rows(features) -> np.ndarray:
    """Accept a KeypointFeatures or a plain (N, D) array."""
    if isinstance(features, KeypointFeatures):
        return features.features
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("features must be a 2-D array")
    return arr


@dataclass(frozen=True)
class VladParams:
    """Clusters, soft-assignment affine map, compression, and gating.

    Shapes: ``clusters`` and ``assignment_weights`` are (K, D),
    ``assignment_biases`` (K,), ``compression`` (K·D, G) with bias (G,),
    ``gating_weights`` (G, G) with biases (G,).
    """

    clusters: np.ndarray
    assignment_weights: np.ndarray
    assignment_biases: np.ndarray
    compression: np.ndarray
    compression_bias: np.ndarray
    gating_weights: np.ndarray
    gating_biases: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("clusters", "assignment_weights", "assignment_biases",
                     "compression", "compression_bias", "gating_weights",
                     "gating_biases"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} must be finite")
            arrays[name] = arr
        k, d = arrays["clusters"].shape
        g = arrays["compression"].shape[1]
        if k < 1:
            raise ValueError("need at least one cluster")
        if arrays["assignment_weights"].shape != (k, d):
            raise ValueError("assignment_weights must match clusters shape")
        if arrays["assignment_biases"].shape != (k,):
            raise ValueError("assignment_biases must be (K,)")
        if arrays["compression"].shape != (k * d, g):
            raise ValueError("compression must be (K*D, G)")
        if arrays["compression_bias"].shape != (g,):
            raise ValueError("compression_bias must be (G,)")
        if arrays["gating_weights"].shape != (g, g):
            raise ValueError("gating_weights must be (G, G)")
        if arrays["gating_biases"].shape != (g,):
            raise ValueError("gating_biases must be (G,)")
        for name, arr in arrays.items():
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_clusters(self) -> int:
        return self.clusters.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.clusters.shape[1]

    @property
    def output_dim(self) -> int:
        return self.compression.shape[1]


@dataclass(frozen=True)
class GlobalDescriptor:
    """A unit-norm G-dimensional scan signature."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("descriptor vector must be 1-D")
        if not np.isfinite(v).all():
            raise ValueError("descriptor vector must be finite")
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"descriptor must be unit norm, got {norm!r}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    def __len__(self):
        return self.vector.shape[0]


def soft_assign(features, params: VladParams) -> np.ndarray:
    """Softmax cluster responsibilities, one row per feature vector.

    Logits are the affine map ``w_k . f + b_k``; the row max is subtracted
    before exponentiation so large logits cannot overflow.
    """
    f = _rows(features)
    if f.shape[1] != params.feature_dim:
        raise ValueError(
            f"feature dim {f.shape[1]} != params dim {params.feature_dim}")
    logits = f @ params.assignment_weights.T + params.assignment_biases
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def vlad_aggregate(features, assignments: np.ndarray, params: VladParams,
                   intra_normalize: bool = True) -> np.ndarray:
    """Assignment-weighted residual sums, one D-block per cluster.

    Each block is ``V_k = sum_i a_ik (f_i - c_k)``; blocks are L2
    normalized individually (unless disabled) and the concatenation is L2
    normalized globally. Zero blocks/vectors are left at zero rather than
    divided.
    """
    f = _rows(features)
    a = np.asarray(assignments, dtype=np.float64)
    if a.shape != (f.shape[0], params.n_clusters):
        raise ValueError("assignments must be (N, K)")
    # V_k = (sum_i a_ik f_i) - (sum_i a_ik) c_k, without a N*K*D temporary
    weighted = a.T @ f
    mass = a.sum(axis=0)
    v = weighted - mass[:, None] * params.clusters
    if intra_normalize:
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        v = np.divide(v, norms, out=np.zeros_like(v), where=norms > 1e-12)
    flat = v.ravel()
    total = np.linalg.norm(flat)
    return flat / total if total > 1e-12 else flat


def context_gate(x: np.ndarray, params: VladParams) -> np.ndarray:
    """Elementwise sigmoid(Wx + b) * x reweighting."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.output_dim,):
        raise ValueError(f"expected a {params.output_dim}-vector")
    gate = 1.0 / (1.0 + np.exp(-(params.gating_weights @ x
                                 + params.gating_biases)))
    return gate * x


def global_descriptor(features, params: VladParams) -> GlobalDescriptor:
    """Full aggregation chain from keypoint features to a unit vector."""
    f = _rows(features)
    if f.shape[0] == 0:
        raise ValueError("cannot describe a scan with no keypoint features")
    assignments = soft_assign(f, params)
    vlad = vlad_aggregate(f, assignments, params)
    compressed = vlad @ params.compression + params.compression_bias
    gated = context_gate(compressed, params)
    norm = np.linalg.norm(gated)
    if norm < 1e-12:
        raise ValueError("descriptor collapsed to zero; check parameters")
    return GlobalDescriptor(gated / norm)


def descriptor_distance(a: GlobalDescriptor, b: GlobalDescriptor) -> float:
    """L2 distance between unit descriptors (monotone in cosine)."""
    if len(a) != len(b):
        raise ValueError("descriptor dimensions differ")
    return float(np.linalg.norm(a.vector - b.vector))


def _orthonormal_columns(seed_matrix: np.ndarray, n_extra: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Random unit columns orthogonal to ``seed_matrix`` and each other."""
    dim = seed_matrix.shape[0]
    extra = rng.standard_normal((dim, n_extra))
    extra -= seed_matrix @ (seed_matrix.T @ extra)
    q, r = np.linalg.qr(extra)
    return q * np.sign(np.diag(r))


def fit_vlad_params(training_features, k: int = 64, output_dim: int = 256,
                    seed: int = 0, alpha: float = 10.0) -> VladParams:
    """Fit clusters, assignment map, and compression from training scans.

    Centroids come from seeded k-means; the assignment affine map is the
    standard soft-assignment initialization ``w_k = alpha c_k``,
    ``b_k = -alpha |c_k|^2 / 2`` which makes softmax assignment approximate
    nearest-centroid. Compression is PCA over the training VLAD vectors;
    when fewer principal directions exist than ``output_dim``, the basis is
    completed with seeded random orthonormal columns. Gating starts near
    passthrough (W = 0, b = 3).
    """
    from sklearn.cluster import KMeans

    stacks = [_rows(f) for f in training_features]
    if not stacks:
        raise ValueError("no training features given")
    x = np.vstack(stacks)
    if k > x.shape[0]:
        raise ValueError(f"k={k} exceeds {x.shape[0]} training vectors")
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100,
                random_state=seed).fit(x)
    clusters = km.cluster_centers_.astype(np.float64)
    weights = alpha * clusters
    biases = -alpha * (clusters ** 2).sum(axis=1) / 2.0

    d = clusters.shape[1]
    probe = VladParams(
        clusters=clusters,
        assignment_weights=weights,
        assignment_biases=biases,
        compression=np.eye(k * d, 1),
        compression_bias=np.zeros(1),
        gating_weights=np.zeros((1, 1)),
        gating_biases=np.zeros(1),
    )
    vlads = np.stack([
        vlad_aggregate(rows, soft_assign(rows, probe), probe)
        for rows in stacks
    ])
    mean = vlads.mean(axis=0)
    _, s, vt = np.linalg.svd(vlads - mean, full_matrices=False)
    rank = int((s > 1e-10).sum())
    components = vt[:min(rank, output_dim)].T  # (K*D, rank-limited)
    if components.shape[1] < output_dim:
        rng = np.random.default_rng(seed)
        pad = _orthonormal_columns(components,
                                   output_dim - components.shape[1], rng)
        components = np.hstack([components, pad])
    compression_bias = -(mean @ components)

    return VladParams(
        clusters=clusters,
        assignment_weights=weights,
        assignment_biases=biases,
        compression=components,
        compression_bias=compression_bias,
        gating_weights=np.zeros((output_dim, output_dim)),
        gating_biases=np.full(output_dim, 3.0),
    )


@dataclass
class DescriptorDatabase:
    """Append-only store of (scan_index, descriptor) with exact queries.

    Queries exclude recent scans: only entries with
    ``scan_index <= current_index - exclude_last`` are eligible, so a scan
    never matches its own immediate past. Ties in distance resolve to the
    lowest scan index.
    """

    _indices: list = field(default_factory=list)
    _vectors: list = field(default_factory=list)

    def __len__(self):
        return len(self._indices)

    @property
    def indices(self) -> np.ndarray:
        return np.asarray(self._indices, dtype=np.int64)

    def append(self, scan_index: int, descriptor: GlobalDescriptor) -> None:
        if self._indices and scan_index <= self._indices[-1]:
            raise ValueError(
                f"scan indices must be strictly increasing; "
                f"{scan_index} after {self._indices[-1]}")
        if self._vectors and len(descriptor) != self._vectors[-1].shape[0]:
            raise ValueError("descriptor dimension changed mid-database")
        self._indices.append(int(scan_index))
        self._vectors.append(descriptor.vector)

    def entry(self, position: int):
        return self._indices[position], GlobalDescriptor(self._vectors[position])

    def query(self, descriptor: GlobalDescriptor, current_index: int,
              exclude_last: int = 50):
        """Best eligible match as ``(scan_index, distance)``, or None."""
        cutoff = current_index - exclude_last
        eligible = [pos for pos, idx in enumerate(self._indices)
                    if idx <= cutoff]
        if not eligible:
            return None
        stack = np.stack([self._vectors[pos] for pos in eligible])
        dists = np.linalg.norm(stack - descriptor.vector, axis=1)
        best = int(np.argmin(dists))  # first minimum -> lowest scan index
        return self._indices[eligible[best]], float(dists[best])


def write_database(path, db: DescriptorDatabase) -> None:
    """Binary store: magic, dim and count header, then fixed-size records."""
    dim = db._vectors[0].shape[0] if len(db) else 0
    with open(path, "wb") as fh:
        fh.write(_STORE_MAGIC)
        fh.write(struct.pack("<QQ", dim, len(db)))
        for idx, vec in zip(db._indices, db._vectors):
            fh.write(struct.pack("<q", idx))
            fh.write(np.asarray(vec, dtype="<f8").tobytes())


def read_database(path) -> DescriptorDatabase:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _STORE_MAGIC:
            raise ValueError(f"not a descriptor store (magic {magic!r})")
        dim, count = struct.unpack("<QQ", fh.read(16))
        db = DescriptorDatabase()
        record = 8 + 8 * dim
        for row in range(count):
            blob = fh.read(record)
            if len(blob) != record:
                raise ValueError(
                    f"store truncated at record {row} of {count}")
            (idx,) = struct.unpack("<q", blob[:8])
            vec = np.frombuffer(blob[8:], dtype="<f8").astype(np.float64)
            db.append(idx, GlobalDescriptor(vec))
        if fh.read(1):
            raise ValueError("trailing bytes after final record")
    return db


def write_vlad_params(path, params: VladParams) -> None:
    """Single binary file: magic, version, dims, then arrays in fixed order."""
    with open(path, "wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write(struct.pack("<B", _PARAMS_VERSION))
        fh.write(struct.pack("<QQQ", params.n_clusters, params.feature_dim,
                             params.output_dim))
        for arr in (params.clusters, params.assignment_weights,
                    params.assignment_biases, params.compression,
                    params.compression_bias, params.gating_weights,
                    params.gating_biases):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def read_vlad_params(path) -> VladParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _PARAMS_MAGIC:
            raise ValueError(f"not a descriptor params file (magic {magic!r})")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != _PARAMS_VERSION:
            raise ValueError(f"unsupported params version {version}")
        k, d, g = struct.unpack("<QQQ", fh.read(24))
        shapes = [(k, d), (k, d), (k,), (k * d, g), (g,), (g, g), (g,)]
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape))
            blob = fh.read(8 * n)
            if len(blob) != 8 * n:
                raise ValueError("params file truncated")
            arrays.append(np.frombuffer(blob, dtype="<f8").reshape(shape)
                          .astype(np.float64))
        if fh.read(1):
            raise ValueError("trailing bytes after params arrays")
    return VladParams(*arrays)
