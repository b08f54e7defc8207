"""
Pairwise-distance geometry.

Distance matrices and point sets are plain numpy arrays: a frame is an
``(N, 3)`` array, a distance matrix is ``(N, N)``, and most functions also
accept a leading time axis.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, InvalidInputError


@dataclass(frozen=True)
class NoiseConfig:
    """Parameters of the windowed Gaussian ranging-noise model.

    ``sigma`` is in the same units as the distances; ``window`` is the
    number of frames averaged (odd, centered on the current frame).
    """

    sigma: float = 0.15
    window: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise InvalidInputError(f"sigma must be >= 0, got {self.sigma}")
        if self.window < 1 or self.window % 2 == 0:
            raise InvalidInputError(f"window must be a positive odd integer, got {self.window}")


def _as_points(points):
    points = np.asarray(points, dtype=float)
    if points.ndim < 2 or points.shape[-1] < 1:
        raise InvalidInputError(f"expected (..., N, dim) points, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("points contain non-finite coordinates")
    return points


def _as_square(d):
    d = np.asarray(d, dtype=float)
    if d.ndim < 2 or d.shape[-1] != d.shape[-2]:
        raise InvalidInputError(f"expected square matrices, got shape {d.shape}")
    return d


def pwd(points):
    """Euclidean distance matrix of a point set.

    Parameters
    ----------
    points : (..., N, dim) array

    Returns
    -------
    (..., N, N) array with an exactly zero diagonal.
    """
    points = _as_points(points)
    diff = points[..., :, None, :] - points[..., None, :, :]
    return np.sqrt(np.einsum("...k,...k->...", diff, diff))


def symmetrize(d):
    """Average a raw measurement matrix with its transpose."""
    d = _as_square(d)
    return 0.5 * (d + np.swapaxes(d, -1, -2))


def corrupt(distances, cfg, rng=None):
    """Apply the windowed Gaussian noise model to a distance-matrix stream.

    Each frame receives an independent symmetric zero-diagonal Gaussian
    perturbation, then frame ``t`` is replaced by the mean of the perturbed
    frames ``t - w//2 .. t + w//2``. Windows are truncated at the stream
    ends and renormalized by the number of frames actually averaged.
    Negative entries are left in place.

    Parameters
    ----------
    distances : (T, N, N) array
    cfg : NoiseConfig
    rng : numpy Generator, optional
        Overrides ``cfg.seed`` when given.
    """
    d = _as_square(distances)
    if d.ndim != 3:
        raise InvalidInputError(f"expected a (T, N, N) stream, got shape {d.shape}")
    n_frames, n = d.shape[:2]
    if n_frames < cfg.window:
        raise InvalidInputError(
            f"window {cfg.window} is larger than the sequence ({n_frames} frames)"
        )
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    iu = np.triu_indices(n, k=1)
    eps = np.zeros_like(d)
    draws = rng.normal(0.0, 1.0, size=(n_frames, len(iu[0]))) * cfg.sigma
    eps[:, iu[0], iu[1]] = draws
    eps[:, iu[1], iu[0]] = draws
    perturbed = d + eps
    if cfg.window == 1:
        return perturbed

    half = cfg.window // 2
    total = np.zeros_like(d)
    count = np.zeros(n_frames)
    for offset in range(-half, half + 1):
        lo, hi = max(0, -offset), min(n_frames, n_frames - offset)
        total[lo:hi] += perturbed[lo + offset:hi + offset]
        count[lo:hi] += 1
    return total / count[:, None, None]


def double_center(d):
    """Gram matrix ``-1/2 J (D*D) J`` of a distance matrix."""
    d = _as_square(d)
    n = d.shape[-1]
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    return -0.5 * j @ (d * d) @ j


def classical_mds(d, dim=3):
    """Classical (Torgerson) multidimensional scaling.

    Returns the ``(N, dim)`` embedding from the top ``dim`` eigenpairs of the
    double-centered Gram matrix, with negative eigenvalues clamped to zero.
    The embedding is centered at the origin; rotation and reflection are
    arbitrary.
    """
    d = _as_square(d)
    if d.ndim != 2:
        raise InvalidInputError("classical_mds expects a single matrix")
    n = d.shape[0]
    if n == 1:
        return np.zeros((1, dim))
    if dim < 1 or dim > n - 1:
        raise InvalidInputError(f"dim must be in [1, {n - 1}] for {n} nodes, got {dim}")
    b = double_center(0.5 * (d + d.T))
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(evals)[::-1][:dim]
    evals = np.clip(evals[order], 0.0, None)
    coords = evecs[:, order] * np.sqrt(evals)
    return coords - coords.mean(axis=0)


def _rank(centered, rtol=1e-9):
    s = np.linalg.svd(centered, compute_uv=False)
    if s.size == 0 or s[0] <= 1e-300:
        return 0
    return int(np.sum(s > rtol * s[0]))


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation


def procrustes_align(source, target, allow_scale=False, allow_reflection=False):
    """Least-squares similarity alignment of ``source`` onto ``target``.

    Returns ``(aligned_source, transform)``. Without ``allow_reflection`` the
    rotation is proper (det = +1).

    Raises
    ------
    DegenerateGeometryError
        If either point set is collinear or coincident.
    """
    src = _as_points(source)
    tgt = _as_points(target)
    if src.shape != tgt.shape or src.ndim != 2:
        raise InvalidInputError(f"shape mismatch: {src.shape} vs {tgt.shape}")
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    sc, tc = src - mu_s, tgt - mu_t
    rank = min(_rank(sc), _rank(tc))
    if rank < 2:
        raise DegenerateGeometryError("point set is collinear or coincident", rank=rank)

    u, s, vt = np.linalg.svd(sc.T @ tc)
    signs = np.ones(len(s))
    if not allow_reflection and np.linalg.det(vt.T @ u.T) < 0:
        signs[-1] = -1.0
    rotation = vt.T @ np.diag(signs) @ u.T
    scale = float(np.sum(s * signs) / np.sum(sc * sc)) if allow_scale else 1.0
    translation = mu_t - scale * rotation @ mu_s
    transform = SimilarityTransform(rotation, scale, translation)
    return transform.apply(src), transform


def random_permutation(n, rng, fixed=()):
    """Random permutation of ``range(n)`` that leaves ``fixed`` indices in place."""
    perm = np.arange(n)
    movable = np.array([i for i in range(n) if i not in set(fixed)], dtype=int)
    perm[movable] = rng.permutation(movable)
    return perm


def invert_permutation(perm):
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def permute(d, perm):
    """Relabel nodes: ``out[i, j] = d[perm[i], perm[j]]``."""
    d = _as_square(d)
    perm = np.asarray(perm)
    n = d.shape[-1]
    if perm.shape != (n,):
        raise InvalidInputError(f"permutation of length {perm.shape} does not match {n} nodes")
    if not np.array_equal(np.sort(perm), np.arange(n)):
        raise InvalidInputError("mapping is not a bijection")
    return d[..., perm, :][..., :, perm]


@dataclass
class EigenReport:
    """Spectral and metric diagnostics of one distance matrix.

    ``eigenvalues`` are sorted by magnitude (descending); ``signed_eigenvalues``
    holds the same multiset sorted by signed value.
    """

    eigenvalues: np.ndarray
    signed_eigenvalues: np.ndarray
    cev: np.ndarray
    tis: float
    ks: tuple = field(default=(1, 2, 3, 4, 5))

    def cev_at(self, k):
        return float(self.cev[self.ks.index(k)])

    def residual_eigenvalues(self, order="magnitude", drop=3):
        """Eigenvalues left after removing the ``drop`` largest ones."""
        if order == "magnitude":
            return self.eigenvalues[drop:]
        if order == "signed":
            return self.signed_eigenvalues[drop:]
        raise InvalidInputError(f"unknown order {order!r}")


def triangle_inequality_score(d, tol=1e-12):
    """Fraction of ordered distinct triples with ``d_ij + d_jk - d_ik >= 0``.

    ``tol`` is relative to the largest entry and only absorbs round-off on
    (near-)collinear triples.
    """
    d = _as_square(d)
    n = d.shape[-1]
    if n < 3:
        return 1.0
    slack = d[:, :, None] + d[None, :, :] - d[:, None, :]
    idx = np.arange(n)
    distinct = (
        (idx[:, None, None] != idx[None, :, None])
        & (idx[None, :, None] != idx[None, None, :])
        & (idx[:, None, None] != idx[None, None, :])
    )
    ok = slack >= -tol * max(np.abs(d).max(), 1.0)
    return float(np.count_nonzero(ok & distinct) / np.count_nonzero(distinct))


def eigen_report(d, ks=(1, 2, 3, 4, 5)):
    """CEV and TI-score diagnostics for a (possibly noisy) distance matrix."""
    d = _as_square(d)
    if d.ndim != 2:
        raise InvalidInputError("eigen_report expects a single matrix")
    evals = np.linalg.eigvalsh(double_center(0.5 * (d + d.T)))
    by_mag = evals[np.argsort(-np.abs(evals), kind="stable")]
    mags = np.abs(by_mag)
    total = mags.sum()
    if total > 0:
        cev = np.array([mags[:k].sum() / total for k in ks])
    else:
        cev = np.ones(len(ks))
    return EigenReport(
        eigenvalues=by_mag,
        signed_eigenvalues=np.sort(evals)[::-1],
        cev=np.minimum(cev, 1.0),
        tis=triangle_inequality_score(d),
        ks=tuple(ks),
    )
