"""Joint-aligned hand tokens: features, k-means codebook, quantisation and read-out.

Each of the 21 joints becomes a 9-vector ``[position, unit direction to
parent, unit direction to first child]``. A codebook of ``S`` such vectors
maps a hand to 21 integer tokens; decoding reads back the position block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import handmodel as hm
from .errors import IndexOutOfRange, InvalidDistribution, TooFewSamples

FEATURE_DIM = 9
CODEBOOK_SIZE = 512
_MAGIC = b"CBK1"


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray  # S x 9

    def __post_init__(self):
        e = np.array(self.entries, dtype=float)
        if e.ndim != 2 or e.shape[1] != FEATURE_DIM or e.shape[0] < 2:
            raise ValueError(f"codebook must be S x {FEATURE_DIM} with S >= 2, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook entries must be finite")
        d = cdist(e, e)
        np.fill_diagonal(d, np.inf)
        if np.min(d) <= 1e-9:
            raise ValueError("codebook has duplicate entries")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def size(self):
        return self.entries.shape[0]


@dataclass(frozen=True)
class TokenizedHand:
    indices: np.ndarray  # 21 ints

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.shape != (hm.N_JOINTS,) or not np.issubdtype(idx.dtype, np.integer):
            raise ValueError(f"expected {hm.N_JOINTS} integer indices, got {idx.shape} {idx.dtype}")
        object.__setattr__(self, "indices", idx.astype(np.int64))


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(n > 1e-12, v / n, 0.0)
    return u


def joint_features(joints):
    """Per-joint ``[position, dir to parent, dir to first child]`` (zeros where absent)."""
    J = np.asarray(joints, dtype=float)
    if J.shape != (hm.N_JOINTS, 3) or not np.all(np.isfinite(J)):
        raise ValueError(f"joints must be a finite {hm.N_JOINTS} x 3 array")
    par = np.array(hm.PARENTS)
    child = np.array(hm.FIRST_CHILD)
    up = np.zeros_like(J)
    down = np.zeros_like(J)
    has_p = par >= 0
    has_c = child >= 0
    up[has_p] = _unit(J[par[has_p]] - J[has_p])
    down[has_c] = _unit(J[child[has_c]] - J[has_c])
    return np.concatenate([J, up, down], axis=1)


def _objective(X, C):
    d = cdist(X, C, "sqeuclidean")
    lab = np.argmin(d, axis=1)
    return lab, float(d[np.arange(len(X)), lab].sum())


def _kmeans_pp(X, s, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = cdist(X, X[centers], "sqeuclidean")[:, 0]
    for _ in range(1, s):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than centres; pick any unused sample
            free = np.setdiff1d(np.arange(n), centers)
            nxt = int(free[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, cdist(X, X[[nxt]], "sqeuclidean")[:, 0])
    return X[centers].copy()


def fit_codebook_kmeans(samples, s=CODEBOOK_SIZE, seed=0, max_iter=100, return_history=False):
    """k-means++ seeding followed by Lloyd iterations until assignments settle.

    ``history`` (returned on request) holds the objective, the sum of squared
    distances to the nearest centre, after seeding and after every iteration.
    Empty clusters keep their previous centre, so the sequence never rises.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2 or X.shape[1] != FEATURE_DIM:
        raise ValueError(f"samples must be M x {FEATURE_DIM}")
    if len(X) < s:
        raise TooFewSamples(f"need at least {s} samples, got {len(X)}")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, s, rng)
    lab, obj = _objective(X, C)
    history = [obj]
    for _ in range(max_iter):
        counts = np.bincount(lab, minlength=s)
        sums = np.zeros_like(C)
        np.add.at(sums, lab, X)
        filled = counts > 0
        C[filled] = sums[filled] / counts[filled, None]
        new_lab, obj = _objective(X, C)
        history.append(obj)
        if np.array_equal(new_lab, lab):
            break
        lab = new_lab
    cb = Codebook(C)
    return (cb, history) if return_history else cb


def quantize(features, cb: Codebook) -> TokenizedHand:
    """Nearest entry per row; ``argmin`` breaks ties towards the lowest index."""
    F = np.asarray(features, dtype=float).reshape(-1, FEATURE_DIM)
    d = cdist(F, cb.entries, "sqeuclidean")
    return TokenizedHand(np.argmin(d, axis=1))


def decode_tokens(tokens, cb: Codebook):
    """Position block of the selected entries, ``21 x 3``."""
    idx = tokens.indices if isinstance(tokens, TokenizedHand) else np.asarray(tokens)
    if np.any(idx < 0) or np.any(idx >= cb.size):
        raise IndexOutOfRange(f"token indices must lie in [0, {cb.size})")
    return cb.entries[idx, :3].copy()


def quantization_radius(samples, cb: Codebook):
    """Largest distance from a sample to its nearest entry."""
    d = cdist(np.asarray(samples, dtype=float), cb.entries)
    return float(np.max(np.min(d, axis=1)))


def token_cross_entropy(probs, gt):
    """Mean over tokens of ``-log p[gt]``."""
    P = np.asarray(probs, dtype=float)
    idx = gt.indices if isinstance(gt, TokenizedHand) else np.asarray(gt)
    if P.ndim != 2 or P.shape[0] != len(idx):
        raise InvalidDistribution(f"expected {len(idx)} probability rows, got {P.shape}")
    if not np.all(np.isfinite(P)) or np.any(P < 0):
        raise InvalidDistribution("probabilities must be finite and non-negative")
    if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-6):
        raise InvalidDistribution("probability rows must sum to 1")
    if np.any(idx < 0) or np.any(idx >= P.shape[1]):
        raise IndexOutOfRange("target index outside the distribution support")
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(P[np.arange(len(idx)), idx])))


def save_codebook(path, cb: Codebook):
    S, D = cb.entries.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", S, D))
        fh.write(cb.entries.astype("<f4").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC or len(data) < 12:
        raise ValueError(f"{path}: not a CBK1 codebook")
    S, D = struct.unpack("<II", data[4:12])
    if D != FEATURE_DIM or len(data) != 12 + 4 * S * D:
        raise ValueError(f"{path}: bad codebook header or size (S={S}, dim={D})")
    return Codebook(np.frombuffer(data[12:], dtype="<f4").reshape(S, D).astype(float))
