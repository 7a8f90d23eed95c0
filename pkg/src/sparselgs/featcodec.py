"""Bijective dimensionality reduction for region embeddings.

A PCA projection supplies low-dimensional codes, but the codec never
reconstructs embeddings through the projection: every registered embedding is
paired with its (normalized, de-collided) code in a lookup table, so decoding
is an exact nearest-neighbor match that returns the original vector bit for
bit.  One codec instance serves one granularity.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .scene import Granularity

_MAGIC = b"SLGC"
_VERSION = 1
_RANGE_EPS = 1e-30
_COLLISION_STEP = 1e-6


def _orthonormal_rows(components: np.ndarray, d: int, D: int) -> np.ndarray:
    """Pad a (k,D) orthonormal row set up to d rows, deterministically."""
    rows = [c for c in components]
    basis = 0
    while len(rows) < d and basis < D:
        cand = np.zeros(D)
        cand[basis] = 1.0
        basis += 1
        for r in rows:
            cand = cand - (cand @ r) * r
        nrm = np.linalg.norm(cand)
        if nrm > 1e-8:
            rows.append(cand / nrm)
    if len(rows) < d:
        raise ValueError("could not build an orthonormal basis")
    return np.stack(rows)


class FeatureCodec:
    """Exact two-way map between embeddings and low-dimensional codes."""

    def __init__(self, mean, components, centers, half_ranges, codes, features, granularity):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.components = np.asarray(components, dtype=np.float64)
        self.centers = np.asarray(centers, dtype=np.float64)
        self.half_ranges = np.asarray(half_ranges, dtype=np.float64)
        self.codes = np.asarray(codes, dtype=np.float64)
        self.features = np.asarray(features, dtype=np.float64)
        self.granularity = Granularity(granularity)
        self._index = {f.tobytes(): i for i, f in enumerate(self.features)}

    # -- construction ------------------------------------------------------

    @classmethod
    def fit(cls, features: np.ndarray, d: int, granularity=Granularity.whole) -> "FeatureCodec":
        """Fit PCA on the deduplicated features and register every one of them."""
        X = np.asarray(features, dtype=np.float64)
        if X.ndim != 2 or len(X) < 1:
            raise ValueError("features must be a non-empty N x D array")
        D = X.shape[1]
        if d > D:
            raise ValueError("reduction dimension exceeds input")

        seen = {}
        for row in X:
            key = row.tobytes()
            if key not in seen:
                seen[key] = row
        unique = np.stack(list(seen.values()))

        mean = unique.mean(axis=0)
        centered = unique - mean
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        components = _orthonormal_rows(vt[:d], d, D)

        raw = centered @ components.T
        lo = raw.min(axis=0)
        hi = raw.max(axis=0)
        centers = (hi + lo) / 2.0
        half_ranges = np.where(hi - lo > _RANGE_EPS, (hi - lo) / 2.0, 1.0)
        codes = (raw - centers) / half_ranges

        taken = set()
        for i in range(len(codes)):
            while codes[i].tobytes() in taken:
                codes[i, -1] += _COLLISION_STEP
            taken.add(codes[i].tobytes())

        return cls(mean, components, centers, half_ranges, codes, unique, granularity)

    # -- the bijection -----------------------------------------------------

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def embed_dim(self) -> int:
        return self.features.shape[1]

    @property
    def code_dim(self) -> int:
        return self.codes.shape[1]

    def encode(self, feature: np.ndarray) -> np.ndarray:
        """Stored code of a registered embedding (table lookup, not projection)."""
        key = np.asarray(feature, dtype=np.float64).tobytes()
        idx = self._index.get(key)
        if idx is None:
            raise KeyError("unknown feature")
        return self.codes[idx].copy()

    def decode(self, code: np.ndarray):
        """Nearest table entry; returns (original embedding, code distance)."""
        if len(self.codes) == 0:
            raise ValueError("codec table is empty")
        diff = self.codes - np.asarray(code, dtype=np.float64)
        d2 = np.einsum("nd,nd->n", diff, diff)
        idx = int(np.argmin(d2))  # argmin takes the smallest index on ties
        return self.features[idx].copy(), float(np.sqrt(d2[idx]))

    def decode_batch(self, codes: np.ndarray):
        """Vectorized decode of an (..., d) array of codes."""
        flat = np.asarray(codes, dtype=np.float64).reshape(-1, self.code_dim)
        out = np.empty((len(flat), self.embed_dim))
        dist = np.empty(len(flat))
        step = max(1, 2_000_000 // max(len(self.codes), 1))
        for s in range(0, len(flat), step):
            chunk = flat[s : s + step]
            d2 = (
                np.einsum("nd,nd->n", chunk, chunk)[:, None]
                - 2.0 * chunk @ self.codes.T
                + np.einsum("nd,nd->n", self.codes, self.codes)[None, :]
            )
            idx = np.argmin(d2, axis=1)
            out[s : s + step] = self.features[idx]
            dist[s : s + step] = np.sqrt(np.maximum(np.take_along_axis(d2, idx[:, None], 1)[:, 0], 0.0))
        shape = codes.shape[:-1]
        return out.reshape(shape + (self.embed_dim,)), dist.reshape(shape)

    def min_pairwise_code_distance(self) -> float:
        if len(self.codes) < 2:
            return np.inf
        best = np.inf
        step = max(1, 2_000_000 // len(self.codes))
        for s in range(0, len(self.codes), step):
            chunk = self.codes[s : s + step]
            d2 = (
                np.einsum("nd,nd->n", chunk, chunk)[:, None]
                - 2.0 * chunk @ self.codes.T
                + np.einsum("nd,nd->n", self.codes, self.codes)[None, :]
            )
            for i in range(len(chunk)):
                d2[i, s + i] = np.inf
            best = min(best, float(d2.min()))
        return float(np.sqrt(max(best, 0.0)))

    def project(self, features: np.ndarray) -> np.ndarray:
        """Raw PCA coordinates (before range normalization); analysis helper."""
        X = np.asarray(features, dtype=np.float64)
        return (X - self.mean) @ self.components.T

    # -- persistence -------------------------------------------------------

    def save(self, path):
        path = Path(path)
        count = len(self.codes)
        D, d = self.embed_dim, self.code_dim
        header = struct.pack("<4sBBHII", _MAGIC, _VERSION, 0, int(self.granularity), D, d)
        blobs = [header, struct.pack("<I", count)]
        for arr in (self.mean, self.components, self.centers, self.half_ranges, self.codes, self.features):
            blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        path.write_bytes(b"".join(blobs))
        sidecar = {"embed_dim": D, "code_dim": d, "granularity": int(self.granularity), "count": count}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path) -> "FeatureCodec":
        raw = Path(path).read_bytes()
        magic, version, dtype, gran, D, d = struct.unpack_from("<4sBBHII", raw, 0)
        if magic != _MAGIC:
            raise ValueError(f"not a codec file: bad magic {magic!r}")
        if version != _VERSION or dtype != 0:
            raise ValueError("unsupported codec file version")
        (count,) = struct.unpack_from("<I", raw, 16)
        off = 20
        out = []
        for shape in ((D,), (d, D), (d,), (d,), (count, d), (count, D)):
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
            off += 4 * n
            out.append(arr)
        mean, components, centers, half_ranges, codes, features = out
        return cls(mean, components, centers, half_ranges, codes, features, Granularity(gran))
