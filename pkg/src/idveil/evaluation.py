"""Distribution and re-identification metrics.

Fréchet distance between Gaussians fitted to feature sets:

    d^2 = ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})

The matrix square root of the (generally non-symmetric) product S_a S_b is
computed through two symmetric eigendecompositions: first A = sqrtm(S_a),
then the trace term uses sqrtm(A S_b A), which is similar to S_a S_b and
symmetric by construction. Small negative eigenvalues from round-off are
clipped; large ones raise.

Re-identification is evaluated as retrieval: queries ranked against a gallery
by Euclidean distance, scored with rank-1 accuracy and mean average precision
over all same-identity gallery entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EIG_CLIP_TOL = -1e-6


@dataclass(frozen=True)
class FeatureStatistics:
    """First and second moments of a feature set (unbiased covariance)."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.ndim != 1 or sigma.shape != (mu.shape[0], mu.shape[0]):
            raise ValueError("mu must be (d,) and sigma (d, d)")
        if self.n < 2:
            raise ValueError("need at least two samples for a covariance")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


def compute_statistics(features: np.ndarray) -> FeatureStatistics:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"expected (n, d) features, got shape {features.shape}")
    if features.shape[0] < 2:
        raise ValueError("need at least two samples")
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False)
    sigma = np.atleast_2d(sigma)
    return FeatureStatistics(mu=mu, sigma=sigma, n=features.shape[0])


class StatisticsAccumulator:
    """Streaming mean/covariance over feature batches; mergeable.

    Keeps raw sums so that accumulating in one pass, in chunks, or merging two
    accumulators all yield identical statistics.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.n = 0
        self._sum = np.zeros(dim, dtype=np.float64)
        self._outer = np.zeros((dim, dim), dtype=np.float64)

    def update(self, features: np.ndarray) -> None:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise ValueError(f"expected (n, {self.dim}) batch, got {features.shape}")
        self.n += features.shape[0]
        self._sum += features.sum(axis=0)
        self._outer += features.T @ features

    def merge(self, other: "StatisticsAccumulator") -> "StatisticsAccumulator":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        merged = StatisticsAccumulator(self.dim)
        merged.n = self.n + other.n
        merged._sum = self._sum + other._sum
        merged._outer = self._outer + other._outer
        return merged

    def finalize(self) -> FeatureStatistics:
        if self.n < 2:
            raise ValueError("need at least two samples")
        mu = self._sum / self.n
        sigma = (self._outer - self.n * np.outer(mu, mu)) / (self.n - 1)
        sigma = 0.5 * (sigma + sigma.T)
        return FeatureStatistics(mu=mu, sigma=sigma, n=self.n)


def _sqrtm_psd(matrix: np.ndarray, label: str) -> np.ndarray:
    sym = 0.5 * (matrix + matrix.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    floor = _EIG_CLIP_TOL * max(1.0, float(np.abs(eigvals).max()))
    if eigvals.min() < floor:
        raise ValueError(
            f"{label} has negative eigenvalue {eigvals.min():.3e} beyond round-off"
        )
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_distance(a: FeatureStatistics, b: FeatureStatistics) -> float:
    if a.mu.shape != b.mu.shape:
        raise ValueError("statistics have different dimensions")
    diff = a.mu - b.mu
    sqrt_a = _sqrtm_psd(a.sigma, "covariance A")
    inner = sqrt_a @ b.sigma @ sqrt_a
    sqrt_inner = _sqrtm_psd(inner, "product covariance")
    trace_term = np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(sqrt_inner)
    return float(diff @ diff + trace_term)


def frechet_from_features(features_a: np.ndarray, features_b: np.ndarray) -> float:
    return frechet_distance(compute_statistics(features_a), compute_statistics(features_b))


# ---------------------------------------------------------------------------
# Feature extractors
#
# Extractors map a batch of images (n, c, h, w) in [0, 1] to (n, d) features.
# A pretrained Inception network is the conventional choice for photographic
# data; for unit-scale tests and the toy data a fixed random projection gives
# a cheap sensitive embedding.


class IdentityExtractor:
    """Flattens pixels; dimension is c*h*w."""

    name = "identity"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        return images.reshape(images.shape[0], -1)


class DownsampleExtractor:
    """Block-averages each channel to a coarse grid and flattens."""

    name = "downsample"

    def __init__(self, grid: tuple[int, int] = (8, 8)):
        self.grid = grid

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        n, c, h, w = images.shape
        gh, gw = self.grid
        if h % gh or w % gw:
            raise ValueError(f"image {h}x{w} not divisible by grid {gh}x{gw}")
        blocks = images.reshape(n, c, gh, h // gh, gw, w // gw)
        return blocks.mean(axis=(3, 5)).reshape(n, -1)


class RandomProjectionExtractor:
    """Projects flattened pixels through a fixed Gaussian matrix.

    The projection is drawn once from the given seed, so distances are
    comparable across calls and processes.
    """

    name = "random_projection"

    def __init__(self, input_shape: tuple[int, int, int], dim: int = 64, seed: int = 0):
        self.input_shape = tuple(input_shape)
        self.dim = dim
        flat = int(np.prod(input_shape))
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((flat, dim)) / np.sqrt(flat)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[1:] != self.input_shape:
            raise ValueError(
                f"extractor built for {self.input_shape}, got {images.shape[1:]}"
            )
        return images.reshape(images.shape[0], -1) @ self.matrix


def make_extractor(name: str, **kwargs):
    registry = {
        "identity": IdentityExtractor,
        "downsample": DownsampleExtractor,
        "random_projection": RandomProjectionExtractor,
    }
    if name not in registry:
        raise ValueError(f"unknown extractor {name!r}; have {sorted(registry)}")
    return registry[name](**kwargs)


# ---------------------------------------------------------------------------
# Re-identification


@dataclass(frozen=True)
class ReidResult:
    rank1: float
    mean_ap: float
    n_queries: int

    def as_dict(self) -> dict:
        return {"rank1": self.rank1, "mAP": self.mean_ap, "n_queries": self.n_queries}


def evaluate_reid(
    query_features: np.ndarray,
    query_ids: np.ndarray,
    gallery_features: np.ndarray,
    gallery_ids: np.ndarray,
) -> ReidResult:
    """Euclidean retrieval with rank-1 and mAP over all matching entries.

    Ties in distance are broken by gallery index so that the scores do not
    depend on the order the gallery happens to be stored in. Every query must
    have at least one same-identity gallery entry.
    """
    query_features = np.asarray(query_features, dtype=np.float64)
    gallery_features = np.asarray(gallery_features, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if query_features.shape[0] != query_ids.shape[0]:
        raise ValueError("query features/ids length mismatch")
    if gallery_features.shape[0] != gallery_ids.shape[0]:
        raise ValueError("gallery features/ids length mismatch")
    if query_features.shape[0] == 0:
        raise ValueError("no queries")

    gallery_order = np.argsort(gallery_ids, kind="stable")  # canonical tie order
    gallery_features = gallery_features[gallery_order]
    gallery_ids = gallery_ids[gallery_order]

    q_sq = (query_features**2).sum(axis=1, keepdims=True)
    g_sq = (gallery_features**2).sum(axis=1)
    dists = q_sq + g_sq[None, :] - 2.0 * query_features @ gallery_features.T

    rank1_hits = 0
    ap_sum = 0.0
    for qi in range(query_features.shape[0]):
        order = np.lexsort((np.arange(gallery_ids.shape[0]), dists[qi]))
        matches = gallery_ids[order] == query_ids[qi]
        n_pos = int(matches.sum())
        if n_pos == 0:
            raise ValueError(f"query {qi} (id {query_ids[qi]!r}) has no gallery match")
        rank1_hits += int(matches[0])
        hit_ranks = np.flatnonzero(matches) + 1
        precisions = np.arange(1, n_pos + 1) / hit_ranks
        ap_sum += float(precisions.mean())

    n_q = query_features.shape[0]
    return ReidResult(rank1=rank1_hits / n_q, mean_ap=ap_sum / n_q, n_queries=n_q)
