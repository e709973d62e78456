"""Parametric density fitting on crossing maps.

Weighted EM for 2D full-covariance Gaussian mixtures with AIC model-order
selection, plus the square-counting baseline.  Crossing weights scale the
EM responsibilities (a ray crossing the plane m times contributes 1/m per
crossing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from raypos._kernels import em_fit
from raypos.sampling import PointMap

COV_FLOOR = 1e-6  # m^2, minimum covariance eigenvalue
COND_MAX = 1e6
DET_MIN = 1e-10  # m^4


class DegenerateFitError(Exception):
    """Mixture fit collapsed (e.g. all points identical with k > 1)."""


@dataclass
class Gmm:
    """A fitted 2D mixture: p(x) = sum_j weights[j] N(x; means[j], covs[j])."""

    weights: np.ndarray  # (k,), sums to 1
    means: np.ndarray  # (k, 2) m
    covariances: np.ndarray  # (k, 2, 2) m^2, symmetric positive-definite
    log_likelihood: float = math.nan
    aic: float = math.nan
    ll_history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def k(self) -> int:
        return len(self.weights)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        lps = np.empty((self.k, x.shape[0]))
        for j in range(self.k):
            lps[j] = _gauss_logpdf(x, self.means[j], self.covariances[j]) + (
                np.log(self.weights[j]) if self.weights[j] > 0 else -np.inf
            )
        m = lps.max(axis=0)
        out = np.where(
            np.isfinite(m), m + np.log(np.exp(lps - m[None, :]).sum(axis=0)), -np.inf
        )
        return out


def _gauss_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    det = a * c - b * b
    dx = x[:, 0] - mean[0]
    dy = x[:, 1] - mean[1]
    q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return -0.5 * (q + math.log(det)) - math.log(2.0 * math.pi)


def gmm_pdf(model: Gmm, x: np.ndarray) -> np.ndarray | float:
    """Exact mixture density at x (scalar in, scalar out)."""
    single = np.asarray(x).ndim == 1
    v = model.pdf(x)
    return float(v[0]) if single else v


def with_background(model: Gmm, bounds_xy: np.ndarray, n: int) -> Gmm:
    """Add a broad background component covering the scene floor plan.

    A mixture fitted to n Monte Carlo samples assigns essentially zero
    density to regions the sample happened to miss, which a finite sample
    cannot actually rule out; in the multi-station product one such
    over-confident model vetoes everything the others support.  Smoothing
    with one virtual sample spread over the room (weight 1/(n+1), a
    Laplace-style pseudo-count that vanishes as n grows) bounds how hard
    any single model can veto.  The component is a Gaussian moment-matched
    to the uniform distribution over bounds_xy, so the result is still a
    plain mixture and every downstream operation is unchanged."""
    lo = np.asarray(bounds_xy[0], dtype=np.float64)
    hi = np.asarray(bounds_xy[1], dtype=np.float64)
    eps = 1.0 / (max(int(n), 1) + 1)
    ext = hi - lo
    cov_bg = np.diag(ext * ext / 12.0)
    return Gmm(
        weights=np.concatenate([model.weights * (1.0 - eps), [eps]]),
        means=np.vstack([model.means, (lo + hi) / 2.0]),
        covariances=np.concatenate([model.covariances, cov_bg[None]]),
        log_likelihood=model.log_likelihood,
        aic=model.aic,
        ll_history=model.ll_history,
    )


def is_well_conditioned(model: Gmm, cond_max: float = COND_MAX, det_min: float = DET_MIN) -> bool:
    """Every component covariance has condition number <= cond_max and
    determinant >= det_min."""
    for cov in model.covariances:
        eig = np.linalg.eigvalsh(cov)
        if eig[0] <= 0 or eig[1] / eig[0] > cond_max:
            return False
        if eig[0] * eig[1] < det_min:
            return False
    return True


@dataclass
class FitOpts:
    seed: int = 0
    max_iter: int = 200
    tol: float = 1e-6  # absolute log-likelihood improvement
    rel_tol: float = 0.0  # optional relative criterion (harness speed knob)
    cov_floor: float = COV_FLOOR
    restarts: int = 3  # used by select_gmm


class WeightedGaussianMixture(BaseEstimator):
    """Sklearn-style weighted EM for a 2D Gaussian mixture.

    Parameters mirror FitOpts; `fit(X, sample_weight=...)` runs k-means++
    seeded EM until the weighted log-likelihood improvement drops below
    max(tol, rel_tol * |ll|) or max_iter is reached.
    """

    def __init__(
        self,
        n_components: int = 1,
        max_iter: int = 200,
        tol: float = 1e-6,
        rel_tol: float = 0.0,
        cov_floor: float = COV_FLOOR,
        random_state: int = 0,
    ):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.rel_tol = rel_tol
        self.cov_floor = cov_floor
        self.random_state = random_state

    def fit(self, X, sample_weight=None):
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError(f"X must be (n, 2), got {X.shape}")
        k = int(self.n_components)
        if sample_weight is None:
            w = np.ones(len(X))
        else:
            w = np.ascontiguousarray(np.asarray(sample_weight, dtype=np.float64))
        if int((w > 0).sum()) < k:
            raise ValueError(f"need at least {k} positively weighted points")

        mu = np.average(X, axis=0, weights=w)
        glob = np.cov(X.T, aweights=w, bias=True) if len(X) > 1 else np.zeros((2, 2))
        glob = np.atleast_2d(glob)
        if k > 1 and float(np.trace(glob)) < 1e-12:
            raise DegenerateFitError("all points identical; cannot fit k > 1 components")

        rng = np.random.default_rng(np.random.SeedSequence([0xF17, int(self.random_state)]))
        means = _kmeanspp(X, w, k, rng)
        pis, covs = _initial_moments(X, w, means, glob, self.cov_floor)
        ll_hist, n_iter = em_fit(
            X, w, pis, means, covs,
            int(self.max_iter), float(self.tol), float(self.rel_tol), float(self.cov_floor),
        )
        # drop dead components
        alive = pis > 0
        if not np.all(alive):
            pis, means, covs = pis[alive], means[alive], covs[alive]
            pis = pis / pis.sum()
        self.weights_ = pis
        self.means_ = means
        self.covariances_ = covs
        self.log_likelihood_ = float(ll_hist[-1])
        self.ll_history_ = ll_hist
        self.n_iter_ = int(n_iter)
        self.aic_ = 2.0 * (6 * k - 1) - 2.0 * self.log_likelihood_
        return self

    def to_gmm(self) -> Gmm:
        return Gmm(
            weights=self.weights_.copy(),
            means=self.means_.copy(),
            covariances=self.covariances_.copy(),
            log_likelihood=self.log_likelihood_,
            aic=self.aic_,
            ll_history=self.ll_history_.copy(),
        )


def _kmeanspp(X: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    p = w / w.sum()
    centers = np.empty((k, 2))
    centers[0] = X[rng.choice(len(X), p=p)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        score = w * d2
        tot = score.sum()
        if tot <= 0:
            centers[j] = X[rng.choice(len(X), p=p)]
        else:
            centers[j] = X[rng.choice(len(X), p=score / tot)]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))
    return _lloyd(X, w, centers)


def _lloyd(X: np.ndarray, w: np.ndarray, centers: np.ndarray, n_iter: int = 10) -> np.ndarray:
    """Weighted Lloyd refinement of the k-means++ seeds.  Without it, seeds
    sitting on isolated points start EM inside a degenerate spike basin
    (floored near-singular covariance on 1-2 points), which inflates the
    likelihood and breaks AIC selection for k above the truth."""
    k = len(centers)
    if k == 1:
        return np.average(X, axis=0, weights=w).reshape(1, 2)
    for _ in range(n_iter):
        d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        moved = False
        for j in range(k):
            sel = labels == j
            mass = w[sel].sum()
            if mass <= 0:
                continue
            c = np.average(X[sel], axis=0, weights=w[sel])
            if not np.array_equal(c, centers[j]):
                centers[j] = c
                moved = True
        if not moved:
            break
    return centers


def _initial_moments(X, w, means, glob_cov, cov_floor):
    """Hard-assignment moments around the k-means++ seeds."""
    k = len(means)
    d2 = np.sum((X[:, None, :] - means[None, :, :]) ** 2, axis=2) if len(X) * k <= 2e7 else None
    if d2 is None:
        labels = np.empty(len(X), dtype=np.int64)
        for i in range(0, len(X), 100000):
            chunk = X[i : i + 100000]
            labels[i : i + 100000] = np.argmin(
                np.sum((chunk[:, None, :] - means[None, :, :]) ** 2, axis=2), axis=1
            )
    else:
        labels = np.argmin(d2, axis=1)
    pis = np.empty(k)
    covs = np.empty((k, 2, 2))
    floor_cov = _floor_spd(np.asarray(glob_cov, dtype=np.float64), cov_floor)
    w_tot = w.sum()
    for j in range(k):
        sel = labels == j
        mass = w[sel].sum()
        if mass <= 0 or int(sel.sum()) < 3:
            # tiny clusters start from the global shape rather than a
            # floored near-singular spike
            pis[j] = max(mass / w_tot, 1.0 / (k * len(X)))
            covs[j] = floor_cov
            continue
        pis[j] = mass / w_tot
        dx = X[sel] - means[j]
        cov = (w[sel, None, None] * (dx[:, :, None] * dx[:, None, :])).sum(axis=0) / mass
        covs[j] = _floor_spd(cov, cov_floor)
    pis = pis / pis.sum()
    return pis, covs


def _floor_spd(cov: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def fit_gmm(pmap: PointMap, k: int, opts: FitOpts | None = None) -> Gmm:
    """Weighted EM fit of a k-component mixture to a crossing map."""
    opts = opts or FitOpts()
    est = WeightedGaussianMixture(
        n_components=k,
        max_iter=opts.max_iter,
        tol=opts.tol,
        rel_tol=opts.rel_tol,
        cov_floor=opts.cov_floor,
        random_state=opts.seed,
    )
    est.fit(pmap.points, sample_weight=pmap.weights)
    return est.to_gmm()


def select_gmm(
    pmap: PointMap,
    k_range: tuple[int, int] = (1, 10),
    opts: FitOpts | None = None,
    aic_margin: float = 2.0,
) -> Gmm:
    """Fit each k in the inclusive range (with restarts, best likelihood
    kept) and return the minimum-AICc model.

    Ranking uses the small-sample corrected criterion
    AICc = AIC + 2p(p+1)/(n_eff - p - 1), with n_eff the map's total
    crossing weight (crossings of one ray share weights summing to 1, so
    this counts independent rays, not dependent crossings).  Sparse maps
    can put ~30 free parameters on under 100 effective samples, where
    plain AIC is known to overfit badly; the correction vanishes on dense
    maps.  A candidate whose p reaches n_eff - 1 gets an infinite score
    and is chosen only if nothing else fits.

    Candidates within aic_margin of the incumbent count as ties and the
    smaller k is kept (the usual parsimony reading of AIC differences
    below ~2; without it, spurious one-component splits that gain just
    over the 6-unit likelihood threshold flip the selection on perfectly
    Gaussian clusters).

    Fits containing a near-singular component (is_well_conditioned false)
    are degenerate local optima of the unbounded mixture likelihood:
    their log-likelihood is inflated by a spike collapsing onto a few
    points, so AIC comparisons against them are meaningless and the
    resulting density is useless as p(x|y).  Such candidates are
    considered only if every candidate for every k is degenerate; this
    matters most on sparse maps, where a spiked restart would otherwise
    out-score an honest fit."""
    opts = opts or FitOpts()
    k_lo, k_hi = int(k_range[0]), int(k_range[1])
    if not (1 <= k_lo <= k_hi <= 20):
        raise ValueError(f"k_range {k_range} outside [1, 20]")
    if pmap.is_empty():
        raise ValueError("cannot fit an empty map")

    n_eff = pmap.total_weight

    def aicc(g: Gmm) -> float:
        p = 6 * g.k - 1
        if n_eff - p - 1 <= 0:
            return math.inf
        return g.aic + 2.0 * p * (p + 1) / (n_eff - p - 1)

    best: Gmm | None = None
    best_score = math.inf
    best_bad: Gmm | None = None
    best_bad_score = math.inf
    last_err: Exception | None = None
    for k in range(k_lo, k_hi + 1):
        best_k: Gmm | None = None
        best_k_bad: Gmm | None = None
        for r in range(opts.restarts):
            seed = int(
                np.random.SeedSequence([0x5E1, opts.seed, k, r]).generate_state(1)[0]
            )
            try:
                g = fit_gmm(pmap, k, replace(opts, seed=seed))
            except (ValueError, DegenerateFitError, FloatingPointError) as exc:
                last_err = exc
                continue
            if is_well_conditioned(g):
                if best_k is None or g.log_likelihood > best_k.log_likelihood:
                    best_k = g
            elif best_k_bad is None or g.log_likelihood > best_k_bad.log_likelihood:
                best_k_bad = g
        if best_k is not None and (best is None or aicc(best_k) < best_score - aic_margin):
            best, best_score = best_k, aicc(best_k)
        if best_k_bad is not None and (
            best_bad is None or aicc(best_k_bad) < best_bad_score - aic_margin
        ):
            best_bad, best_bad_score = best_k_bad, aicc(best_k_bad)
    if best is None:
        best = best_bad
    if best is None:
        raise last_err if last_err is not None else DegenerateFitError("no k could be fitted")
    return best


# ---------------------------------------------------------------------------
# Square-counting baseline


@dataclass
class SquareGrid:
    square_size: float
    origin: np.ndarray  # (2,) xy min
    shape: tuple[int, int]  # (nx, ny)
    counts: np.ndarray  # (n_stations, nx, ny) point counts


def build_square_grid(
    maps: list[PointMap], square_size: float, bounds_xy: np.ndarray
) -> SquareGrid:
    lo = np.asarray(bounds_xy[0], dtype=np.float64)
    hi = np.asarray(bounds_xy[1], dtype=np.float64)
    nx = max(1, int(math.ceil((hi[0] - lo[0]) / square_size)))
    ny = max(1, int(math.ceil((hi[1] - lo[1]) / square_size)))
    counts = np.zeros((len(maps), nx, ny), dtype=np.int64)
    for s, pmap in enumerate(maps):
        if pmap.is_empty():
            continue
        ij = np.clip(
            ((pmap.points - lo) / square_size).astype(np.int64), 0, [nx - 1, ny - 1]
        )
        np.add.at(counts[s], (ij[:, 0], ij[:, 1]), 1)
    return SquareGrid(square_size, lo, (nx, ny), counts)


def square_method(
    maps: list[PointMap],
    square_size: float,
    min_stations: int,
    bounds_xy: np.ndarray,
) -> np.ndarray | None:
    """Square-counting estimate: center of the square with the highest total
    point count among squares holding points from >= min_stations distinct
    stations (row-major tie-break); None when no square is eligible."""
    if len(maps) < 2:
        raise ValueError("square_method needs at least 2 maps")
    if square_size <= 0:
        raise ValueError("square_size must be positive")
    grid = build_square_grid(maps, square_size, bounds_xy)
    occupancy = (grid.counts > 0).sum(axis=0)
    eligible = occupancy >= min_stations
    if not eligible.any():
        return None
    total = grid.counts.sum(axis=0).astype(np.float64)
    total[~eligible] = -1.0
    flat = int(np.argmax(total))  # first max = lowest row-major index
    ix, iy = divmod(flat, grid.shape[1])
    return grid.origin + (np.array([ix, iy]) + 0.5) * grid.square_size
