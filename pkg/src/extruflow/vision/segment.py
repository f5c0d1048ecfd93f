"""Three-class intensity clustering: dark bed, blurred edge/noise, light bead."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
BLURRY_WEIGHT = 0.25


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterSummary:
    means: np.ndarray  # ascending
    stds: np.ndarray
    weights: np.ndarray  # fractions summing to 1
    counts: np.ndarray | None = None
    iterations: int = 0
    loglik: tuple[float, ...] = field(default=())

    @property
    def k(self) -> int:
        return len(self.means)

    @property
    def noise(self) -> tuple[float, float, float]:
        """(mean, std, weight) of the middle cluster."""
        i = self.k // 2
        return float(self.means[i]), float(self.stds[i]), float(self.weights[i])

    def looks_blurry(self, limit: float = BLURRY_WEIGHT) -> bool:
        return self.noise[2] > limit


def cluster_kmeans(pixels, k: int = 3, tol: float = 1e-6, max_iter: int = 100) -> ClusterSummary:
    """Lloyd's algorithm on scalar intensities from quantile initialization."""
    x = np.asarray(pixels, dtype=float).ravel()
    if len(np.unique(x)) < k:
        raise ClusteringError(f"need at least {k} distinct intensity values")
    q = np.linspace(0.1, 0.9, k) if k > 1 else np.array([0.5])
    c = np.quantile(x, q)
    labels = np.zeros(len(x), dtype=int)
    it = 0
    for it in range(1, max_iter + 1):
        labels = np.argmin(np.abs(x[:, None] - c[None, :]), axis=1)
        new = c.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members) == 0:
                # re-seed from the point farthest from its centroid
                far = int(np.argmax(np.abs(x - c[labels])))
                new[j] = x[far]
                labels[far] = j
            else:
                new[j] = members.mean()
        moved = float(np.max(np.abs(new - c)))
        c = new
        if moved < tol:
            break
    labels = np.argmin(np.abs(x[:, None] - c[None, :]), axis=1)
    order = np.argsort(c, kind="stable")
    rank = np.empty(k, dtype=int)
    rank[order] = np.arange(k)
    labels = rank[labels]
    means = np.array([x[labels == j].mean() if np.any(labels == j) else c[order[j]] for j in range(k)])
    stds = np.array([x[labels == j].std() if np.any(labels == j) else 0.0 for j in range(k)])
    counts = np.bincount(labels, minlength=k)
    return ClusterSummary(means, stds, counts / len(x), counts, it)


def kmeans_inertia(pixels, centroids) -> float:
    x = np.asarray(pixels, dtype=float).ravel()
    c = np.asarray(centroids, dtype=float)
    return float(np.sum(np.min((x[:, None] - c[None, :]) ** 2, axis=1)))


def threshold_kmeans(summary: ClusterSummary, n: float = 2.0) -> float:
    """Line threshold mu_noise + n * sigma_noise; pixels above it are bead."""
    if not 1.0 <= n <= 2.5:
        log.warning("threshold multiplier n = %g outside the usual range [1, 2.5]", n)
    mu, sigma, _ = summary.noise
    return mu + n * sigma


def _log_gauss(x, mu, var):
    return -0.5 * (np.log(2.0 * math.pi * var)[None, :] + (x[:, None] - mu[None, :]) ** 2 / var[None, :])


def cluster_gmm(pixels, k: int = 3, init: ClusterSummary | None = None, tol: float = 1e-8,
                max_iter: int = 200) -> tuple[ClusterSummary, np.ndarray]:
    """EM for a 1-D Gaussian mixture, started from the K-means solution.

    Returns the summary and the responsibility matrix (n_pixels, k) with
    components sorted by ascending mean. Convergence is declared when the
    mean log-likelihood per pixel improves by less than `tol`.
    """
    x = np.asarray(pixels, dtype=float).ravel()
    if len(x) < 3 * k:
        raise ClusteringError(f"need at least {3 * k} samples for a {k}-component mixture")
    init = init or cluster_kmeans(x, k)
    mu = init.means.astype(float).copy()
    var = np.maximum(init.stds.astype(float) ** 2, VAR_FLOOR)
    pi = np.maximum(init.weights.astype(float), 1e-12)
    pi = pi / pi.sum()
    trace = []
    resp = None
    for it in range(1, max_iter + 1):
        logp = _log_gauss(x, mu, var) + np.log(pi)[None, :]
        top = logp.max(axis=1, keepdims=True)
        norm = top[:, 0] + np.log(np.sum(np.exp(logp - top), axis=1))
        ll = float(np.mean(norm))
        if not math.isfinite(ll):
            raise ClusteringError(f"non-finite likelihood at iteration {it}; trace {trace[-5:]}")
        trace.append(ll)
        resp = np.exp(logp - norm[:, None])
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        nk = resp.sum(axis=0) + 1e-300
        pi = nk / len(x)
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = np.maximum((resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk, VAR_FLOOR)
    order = np.argsort(mu, kind="stable")
    summary = ClusterSummary(mu[order], np.sqrt(var[order]), pi[order], None, it, tuple(trace))
    return summary, resp[:, order]


def gmm_line_mask(resp: np.ndarray) -> np.ndarray:
    """True where the brightest component has the largest responsibility."""
    return np.argmax(resp, axis=1) == resp.shape[1] - 1


def gmm_level_threshold(summary: ClusterSummary) -> float:
    """Intensity halfway between the darkest and brightest component means.

    A blurred edge pixel mixes bed and bead; it is counted as bead when its
    intensity is nearer the bead level. On a blurred step edge this cut sits
    where the unblurred edge was.
    """
    return 0.5 * (float(summary.means[0]) + float(summary.means[-1]))
