# gmm.py
"""
Baseline generator: a full-covariance Gaussian mixture fitted by EM in PCA
space, BIC model selection, and conditional generation by rejection.

The joint vector per observation is the scaled concatenation
[u_1..u_A, v_1..v_A, macro_u, macro_v]; conditioning keeps only the draws
whose reconstructed macro elements decode to the requested label.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from data import ConditionLabel, Dataset, DirectionSet, Scaler, SpeedBins, uv_to_codes
from stats import PcaModel, pca_fit, pca_project, pca_reconstruct, pca_variance_curve

logger = logging.getLogger(__name__)

REG_COVAR = 1e-6
COLLAPSE_WEIGHT = 1e-8
MONOTONE_SLACK = 1e-9
DEFAULT_MAX_DRAWS = 10 ** 8
DEFAULT_PCA_COMPONENTS = 7
DEFAULT_K_GRID = tuple(range(1, 41))
BIC_TOLERANCE = 0.01
DRAW_CHUNK = 100_000


class FitError(RuntimeError):
    pass


class NoMassError(RuntimeError):
    def __init__(self, condition, draws):
        super().__init__(
            f"no probability mass on condition {condition}: zero of {draws} draws accepted"
        )
        self.condition = condition
        self.draws = draws


@dataclass(frozen=True, eq=False)
class Gmm:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    cholesky: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        covs = 0.5 * (self.covariances + np.swapaxes(self.covariances, 1, 2))
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "cholesky", np.stack([linalg.cholesky(c, lower=True) for c in covs]))

    @property
    def n_components(self) -> int:
        return int(self.weights.size)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def to_dict(self) -> Dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covariances": self.covariances.tolist()}

    @classmethod
    def from_dict(cls, raw: Dict) -> "Gmm":
        return cls(*(np.asarray(raw[k], dtype=float) for k in ("weights", "means", "covariances")))


def parameter_count(k: int, dim: int) -> int:
    """Free parameters per the mixture definition: weight, mean and symmetric covariance per component."""
    return k * (1 + dim + (dim * dim + dim) // 2)


def _component_log_prob(Y: np.ndarray, gmm: Gmm) -> np.ndarray:
    """log pi_k + log N(y; mu_k, Sigma_k) for every row, shape (N, K)."""
    n, dim = Y.shape
    out = np.empty((n, gmm.n_components))
    for k in range(gmm.n_components):
        chol = gmm.cholesky[k]
        diff = linalg.solve_triangular(chol, (Y - gmm.means[k]).T, lower=True)
        log_det = 2.0 * np.log(np.diag(chol)).sum()
        out[:, k] = -0.5 * (dim * np.log(2 * np.pi) + log_det + (diff ** 2).sum(axis=0))
    with np.errstate(divide="ignore"):
        return out + np.log(gmm.weights)


def gmm_logpdf(gmm: Gmm, y):
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    if Y.shape[1] != gmm.dim:
        raise ValueError(f"expected dimension {gmm.dim}, got {Y.shape[1]}")
    values = logsumexp(_component_log_prob(Y, gmm), axis=1)
    return float(values[0]) if single else values


def _kmeans_plusplus(Y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = Y.shape[0]
    centers = [Y[rng.integers(n)]]
    closest = ((Y - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else rng.integers(n)
        centers.append(Y[idx])
        closest = np.minimum(closest, ((Y - Y[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _m_step(Y: np.ndarray, resp: np.ndarray, reg: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, dim = Y.shape
    mass = resp.sum(axis=0)
    safe = np.maximum(mass, np.finfo(float).tiny)
    weights = mass / n
    means = (resp.T @ Y) / safe[:, None]
    covs = np.empty((resp.shape[1], dim, dim))
    for k in range(resp.shape[1]):
        diff = Y - means[k]
        covs[k] = (resp[:, k, None] * diff).T @ diff / safe[k] + reg * np.eye(dim)
    return weights, means, covs


def _reseed_collapsed(Y, weights, means, covs, log_prob, reg) -> List[int]:
    collapsed = np.flatnonzero(weights < COLLAPSE_WEIGHT)
    if collapsed.size == 0:
        return []
    point_ll = logsumexp(log_prob, axis=1)
    worst = np.argsort(point_ll, kind="stable")
    global_cov = np.cov(Y.T, bias=True).reshape(Y.shape[1], Y.shape[1]) + reg * np.eye(Y.shape[1])
    for i, k in enumerate(collapsed):
        means[k] = Y[worst[i]]
        covs[k] = global_cov
        weights[k] = 1.0 / Y.shape[0]
        logger.warning("[em_fit] Component %d collapsed; re-seeded at point %d", k, worst[i])
    weights /= weights.sum()
    return collapsed.tolist()


def _em_single(Y: np.ndarray, k: int, rng: np.random.Generator, tol: float, max_iter: int,
               reg: float) -> Tuple[Gmm, List[float]]:
    n, dim = Y.shape
    centers = _kmeans_plusplus(Y, k, rng)
    assign = np.argmin(((Y[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), assign] = 1.0
    weights, means, covs = _m_step(Y, resp, reg)
    reseeded = _reseed_collapsed(Y, weights, means, covs, np.zeros((n, k)), reg)

    trace: List[float] = []
    for iteration in range(max_iter):
        gmm = Gmm(weights, means, covs)
        log_prob = _component_log_prob(Y, gmm)
        point_ll = logsumexp(log_prob, axis=1)
        ll = float(point_ll.mean())
        if trace and not reseeded and ll < trace[-1] - MONOTONE_SLACK * max(1.0, abs(trace[-1])):
            logger.warning("[em_fit] Log-likelihood decreased at iteration %d: %.12f -> %.12f", iteration, trace[-1], ll)
        converged = bool(trace) and not reseeded and ll - trace[-1] < tol
        trace.append(ll)
        if converged:
            break
        resp = np.exp(log_prob - point_ll[:, None])
        weights, means, covs = _m_step(Y, resp, reg)
        reseeded = _reseed_collapsed(Y, weights, means, covs, log_prob, reg)
    else:
        logger.info("[em_fit] K=%d reached max_iter=%d without converging", k, max_iter)
    return gmm, trace


def em_fit(Y, k: int, seed: int = 0, tol: float = 1e-6, max_iter: int = 500, restarts: int = 3,
           reg: float = REG_COVAR) -> Tuple[Gmm, List[float]]:
    """Fit a K-component full-covariance mixture; best of `restarts` k-means++ starts.

    The trace holds the mean per-sample log-likelihood after each E-step.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise ValueError(f"expected an N x C matrix, got shape {Y.shape}")
    n = Y.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"component count must satisfy 1 <= K < N, got K={k}, N={n}")
    if tol <= 0:
        raise ValueError(f"tol must be > 0, got {tol}")

    best: Optional[Tuple[Gmm, List[float]]] = None
    for restart, child in enumerate(np.random.SeedSequence(seed).spawn(max(restarts, 1))):
        gmm, trace = _em_single(Y, k, np.random.default_rng(child), tol, max_iter, reg)
        logger.debug("[em_fit] K=%d restart %d: %d iterations, ll=%.6f", k, restart, len(trace), trace[-1])
        if best is None or trace[-1] > best[1][-1]:
            best = (gmm, trace)
    return best


def bic(gmm: Gmm, Y) -> float:
    Y = np.asarray(Y, dtype=float)
    total_ll = float(gmm_logpdf(gmm, Y).sum())
    return -2.0 * total_ll + parameter_count(gmm.n_components, gmm.dim) * np.log(Y.shape[0])


def select_k(Y, k_grid: Iterable[int], seed: int = 0, **fit_kwargs) -> Tuple[int, Gmm, Dict[int, float]]:
    """Smallest K whose BIC is within 1% of the minimum BIC over the grid."""
    Y = np.asarray(Y, dtype=float)
    k_grid = sorted(set(int(k) for k in k_grid))
    if not k_grid:
        raise ValueError("k_grid must not be empty")
    fits: Dict[int, Gmm] = {}
    curve: Dict[int, float] = {}
    for k in k_grid:
        try:
            gmm, _ = em_fit(Y, k, seed=seed, **fit_kwargs)
            curve[k] = bic(gmm, Y)
            fits[k] = gmm
            logger.info("[select_k] K=%d BIC=%.3f", k, curve[k])
        except (ValueError, linalg.LinAlgError, FloatingPointError) as exc:
            logger.warning("[select_k] Skipping K=%d: %s", k, exc)
    if not curve:
        raise FitError(f"EM failed for every K in {k_grid}")
    best = min(curve.values())
    threshold = best + BIC_TOLERANCE * abs(best)
    chosen = min(k for k, value in curve.items() if value <= threshold)
    logger.info("[select_k] Selected K=%d (min BIC %.3f)", chosen, best)
    return chosen, fits[chosen], curve


def _sample_with_components(gmm: Gmm, n: int, seed) -> Tuple[np.ndarray, np.ndarray]:
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    comps = rng.choice(gmm.n_components, size=n, p=gmm.weights / gmm.weights.sum())
    z = rng.standard_normal((n, gmm.dim))
    return gmm.means[comps] + np.einsum("nij,nj->ni", gmm.cholesky[comps], z), comps


def gmm_sample(gmm: Gmm, n: int, seed) -> np.ndarray:
    return _sample_with_components(gmm, n, seed)[0]


# ─── Conditional pipeline ─────────────────────────────

ConditionQuery = Union[None, ConditionLabel, Sequence[ConditionLabel]]


class ConditionalSamples(NamedTuple):
    samples: np.ndarray
    acceptance_rate: float
    draws: int


@dataclass(frozen=True, eq=False)
class GmmPipeline:
    scaler: Scaler
    pca: PcaModel
    gmm: Gmm
    condition_layout: Tuple[int, int]
    altitudes: np.ndarray
    speed_bins: SpeedBins = field(default_factory=SpeedBins)
    directions: DirectionSet = field(default_factory=DirectionSet)
    bic_curve: Dict[int, float] = field(default_factory=dict)
    variance_curve: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.gmm.dim != self.pca.n_components:
            raise ValueError(f"GMM dimension {self.gmm.dim} != PCA components {self.pca.n_components}")

    @property
    def n_altitudes(self) -> int:
        return int(np.asarray(self.altitudes).size)

    def decode_conditions(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(speed bin, direction) codes of PCA-space draws, decoded from their reconstructed macro (u, v) elements."""
        cols = list(self.condition_layout)
        macro = y @ self.pca.components[:, cols] + self.pca.column_means[cols]
        macro = macro * self.scaler.std[cols] + self.scaler.mean[cols]
        return uv_to_codes(macro[:, 0], macro[:, 1], self.speed_bins, self.directions)

    def to_physical(self, y: np.ndarray) -> np.ndarray:
        return self.scaler.inverse(pca_reconstruct(self.pca, y))

    def to_profiles(self, x: np.ndarray) -> np.ndarray:
        a = self.n_altitudes
        return np.stack([x[:, :a], x[:, a:2 * a]], axis=1)

    def sample(self, condition: ConditionQuery, n: int, seed, max_draws: int = DEFAULT_MAX_DRAWS) -> np.ndarray:
        """(n, 2, A) profiles in m/s; raises NoMassError when nothing is accepted."""
        result = conditional_sample(self, condition, n, seed, max_draws)
        return self.to_profiles(result.samples)


def pipeline_matrix(dataset: Dataset) -> np.ndarray:
    x = dataset.to_array()
    return np.concatenate([x[:, 0, :], x[:, 1, :], dataset.macro_uv()], axis=1)


def _accept_mask(condition: ConditionQuery, speed_bins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    if condition is None:
        return np.ones(speed_bins.shape, dtype=bool)
    labels = [condition] if isinstance(condition, ConditionLabel) else list(condition)
    keep = np.zeros(speed_bins.shape, dtype=bool)
    for label in labels:
        hit = speed_bins == label.speed_bin
        if label.direction is not None:
            hit &= directions == label.direction
        keep |= hit
    return keep


def conditional_sample(pipeline: GmmPipeline, condition: ConditionQuery, n: int, seed,
                       max_draws: int = DEFAULT_MAX_DRAWS, chunk: int = DRAW_CHUNK) -> ConditionalSamples:
    if max_draws < n:
        raise ValueError(f"max_draws ({max_draws}) must be >= n ({n})")
    accepted: List[np.ndarray] = []
    n_accepted = 0
    draws = 0
    chunk_index = 0
    while n_accepted < n and draws < max_draws:
        size = min(chunk, max_draws - draws)
        y = gmm_sample(pipeline.gmm, size, np.random.SeedSequence([int(seed), chunk_index]))
        keep = _accept_mask(condition, *pipeline.decode_conditions(y))
        draws += size
        chunk_index += 1
        if keep.any():
            accepted.append(y[keep])
            n_accepted += int(keep.sum())
    rate = n_accepted / draws if draws else 0.0
    logger.info("[conditional_sample] condition=%s accepted=%d draws=%d rate=%.3g", condition, n_accepted, draws, rate)
    if n_accepted == 0:
        raise NoMassError(condition, draws)
    y = np.concatenate(accepted)[:n]
    return ConditionalSamples(pipeline.to_physical(y), rate, draws)


def fit_pipeline(dataset: Dataset, n_components: int = DEFAULT_PCA_COMPONENTS, k_grid: Iterable[int] = DEFAULT_K_GRID,
                 seed: int = 0, **fit_kwargs) -> GmmPipeline:
    x = pipeline_matrix(dataset)
    scaler = Scaler.fit(x)
    scaled = scaler.transform(x)
    pca = pca_fit(scaled, n_components)
    y = pca_project(pca, scaled)
    k_grid = [k for k in k_grid if k < len(y)]
    chosen, gmm, curve = select_k(y, k_grid, seed=seed, **fit_kwargs)
    a = dataset.n_altitudes
    logger.info("[fit_pipeline] PCA C=%d, GMM K=%d on %d observations", n_components, chosen, len(y))
    return GmmPipeline(
        scaler=scaler,
        pca=pca,
        gmm=gmm,
        condition_layout=(2 * a, 2 * a + 1),
        altitudes=dataset.altitudes,
        speed_bins=dataset.speed_bins,
        directions=dataset.directions,
        bic_curve=curve,
        variance_curve=pca_variance_curve(scaled),
    )
