"""Closed-form noise-contrastive mathematics.

Densities, the in/out-of-distribution posterior, soft labels, the auxiliary
and test-time losses, and the noise-ratio selection curve. All probability
arithmetic is carried out on logits or in log space; ``posterior_direct`` is
the one deliberate exception and exists only as an equivalence oracle.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor

PER_LOCATION = "per_location"
WHOLE_VECTOR = "whole_vector"
NOISE_MODES = (PER_LOCATION, WHOLE_VECTOR)


class PosteriorRangeError(ArithmeticError):
    """The literal posterior formula left the float64 range."""


@dataclass(frozen=True)
class NoiseConfig:
    sigma_s: float
    sigma_o: float
    dim: int
    M: int = 1
    mode: str = PER_LOCATION

    def __post_init__(self):
        if self.sigma_s < 0:
            raise ValueError(f"sigma_s must be >= 0, got {self.sigma_s}")
        if not self.sigma_o > self.sigma_s:
            raise ValueError(f"sigma_o must exceed sigma_s, got sigma_s={self.sigma_s}, sigma_o={self.sigma_o}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.mode not in NOISE_MODES:
            raise ValueError(f"mode must be one of {NOISE_MODES}, got {self.mode!r}")

    @property
    def hard_labels(self) -> bool:
        return self.sigma_s == 0

    def beta(self) -> float:
        if self.hard_labels:
            raise ValueError("noise ratio is undefined when sigma_s = 0")
        return self.sigma_o / self.sigma_s

    def with_dim(self, dim: int) -> NoiseConfig:
        return NoiseConfig(self.sigma_s, self.sigma_o, dim, self.M, self.mode)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NoisyViews:
    """``2M`` noisy copies of each of ``N`` points; in-class rows come first."""

    views: np.ndarray
    eps: np.ndarray
    eps_norm_sq: np.ndarray
    origin_index: np.ndarray
    is_in: np.ndarray

    def __len__(self) -> int:
        return self.views.shape[0]


# -- kernel density estimate ----------------------------------------------------------

def _check_kde(query, centers, sigma, dim):
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    query = np.asarray(query, dtype=np.float64)
    if centers.shape[0] == 0:
        raise ValueError("centers must be nonempty")
    if centers.shape[1] != dim or query.shape[-1] != dim:
        raise ShapeError(f"query shape {query.shape} and centers shape {centers.shape} must both have dim={dim}")
    return query, centers


def kde_log_density(query, centers, sigma: float, dim: int) -> np.ndarray:
    """Log of the isotropic Gaussian KDE; ``query`` may be one point or a stack."""
    query, centers = _check_kde(query, centers, sigma, dim)
    q = query.reshape(-1, dim)
    d2 = ((q[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    n = centers.shape[0]
    log_norm = np.log(n) + 0.5 * dim * np.log(2.0 * np.pi) + dim * np.log(sigma)
    out = logsumexp(-d2 / (2.0 * sigma ** 2), axis=1) - log_norm
    return out.reshape(query.shape[:-1])


def kde_density(query, centers, sigma: float, dim: int):
    out = np.exp(kde_log_density(query, centers, sigma, dim))
    return float(out) if np.ndim(out) == 0 else out


def kde_posterior(query, centers, sigma_s: float, sigma_o: float, dim: int):
    """In-distribution posterior under equal priors, computed as a sigmoid of a log-ratio."""
    if not sigma_o > sigma_s > 0:
        raise ValueError(f"need sigma_o > sigma_s > 0, got sigma_s={sigma_s}, sigma_o={sigma_o}")
    log_s = kde_log_density(query, centers, sigma_s, dim)
    log_o = kde_log_density(query, centers, sigma_o, dim)
    out = expit(log_s - log_o)
    return float(out) if np.ndim(out) == 0 else out


def kde_nll(queries, centers, sigma_s: float, dim: int) -> float:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[0] == 0:
        raise ValueError("kde_nll needs at least one query")
    return float(-np.mean(kde_log_density(queries, centers, sigma_s, dim)))


# -- noisy views and soft labels ----------------------------------------------------------

def sample_noise(n: int, cfg: NoiseConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Perturbations for ``n`` points: returns (eps, origin_index, is_in).

    Rows are ordered as M in-class blocks followed by M out-class blocks,
    each block covering the ``n`` points in order.
    """
    m = cfg.M
    eps_in = rng.standard_normal((m * n, cfg.dim)) * cfg.sigma_s
    eps_out = rng.standard_normal((m * n, cfg.dim)) * cfg.sigma_o
    eps = np.concatenate([eps_in, eps_out], axis=0)
    origin = np.tile(np.arange(n), 2 * m)
    is_in = np.repeat([True, False], m * n)
    return eps, origin, is_in


def sample_noisy_views(z, cfg: NoiseConfig, seed) -> NoisyViews:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != cfg.dim:
        raise ShapeError(f"z shape {z.shape} does not match noise dim {cfg.dim}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps, origin, is_in = sample_noise(z.shape[0], cfg, rng)
    return NoisyViews(
        views=z[origin] + eps,
        eps=eps,
        eps_norm_sq=(eps ** 2).sum(axis=1),
        origin_index=origin,
        is_in=is_in,
    )


def _require_soft(cfg: NoiseConfig) -> None:
    if cfg.hard_labels:
        raise ValueError("sigma_s = 0: the posterior is undefined, use hard labels (soft_labels handles this mode)")


def posterior_logit(eps_norm_sq, cfg: NoiseConfig):
    _require_soft(cfg)
    e = np.asarray(eps_norm_sq, dtype=np.float64)
    u = 0.5 * (1.0 / cfg.sigma_o ** 2 - 1.0 / cfg.sigma_s ** 2) * e + cfg.dim * np.log(cfg.sigma_o / cfg.sigma_s)
    return float(u) if u.ndim == 0 else u


def posterior_direct(eps_norm_sq, cfg: NoiseConfig):
    """The un-simplified posterior ratio, evaluated literally.

    Raises PosteriorRangeError whenever an intermediate overflows or
    underflows, which for large ``dim`` is almost always.
    """
    _require_soft(cfg)
    e = np.asarray(eps_norm_sq, dtype=np.float64)
    d = cfg.dim
    try:
        with np.errstate(over="raise", under="raise", divide="raise", invalid="raise"):
            num = cfg.sigma_s ** (-d) * np.exp(-e / (2.0 * cfg.sigma_s ** 2))
            other = cfg.sigma_o ** (-d) * np.exp(-e / (2.0 * cfg.sigma_o ** 2))
            out = num / (num + other)
    except (FloatingPointError, OverflowError) as exc:
        raise PosteriorRangeError(f"direct posterior out of float64 range for dim={d}: {exc}") from None
    if not (np.all(np.isfinite(num)) and np.all(num > 0) and np.all(other > 0)):
        raise PosteriorRangeError(f"direct posterior out of float64 range for dim={d}")
    return float(out) if out.ndim == 0 else out


def in_domain_radius(cfg: NoiseConfig) -> float:
    """Perturbation norm at which the posterior crosses 1/2."""
    _require_soft(cfg)
    s, o = cfg.sigma_s, cfg.sigma_o
    return float(s * o * np.sqrt(2.0 * cfg.dim / (s * s - o * o) * np.log(s / o)))


def soft_labels(views: NoisyViews, cfg: NoiseConfig) -> np.ndarray:
    if cfg.hard_labels:
        return views.is_in.astype(np.float64)
    return expit(posterior_logit(views.eps_norm_sq, cfg))


def labels_from_noise(eps_norm_sq: np.ndarray, is_in: np.ndarray, cfg: NoiseConfig) -> np.ndarray:
    if cfg.hard_labels:
        return np.asarray(is_in, dtype=np.float64)
    return expit(posterior_logit(eps_norm_sq, cfg))


# -- losses ------------------------------------------------------------------------------

def aux_loss(logits, labels) -> Tensor:
    """Soft-label BCE between discriminator logits and posterior targets."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise ShapeError(f"aux_loss: predictions shape {logits.shape} vs labels shape {labels.shape}")
    return ops.bce_with_soft_targets(logits, labels)


def test_loss(logits) -> Tensor:
    """Mean negative log in-distribution probability of unperturbed test features."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.size == 0:
        raise ValueError("test_loss of an empty batch")
    return ops.mul(ops.mean(ops.log_sigmoid(logits)), -1.0)


test_loss.__test__ = False  # keep pytest from collecting it when imported


def binary_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log(p) + (1 - p) * np.log1p(-p))
    return np.nan_to_num(h, nan=0.0)


# -- noise-ratio selection ------------------------------------------------------------------

def expected_logit(beta: float, dim: int, uncorrected: bool = False) -> float:
    """Mean posterior logit of out-of-distribution perturbations at noise ratio ``beta``.

    The default form uses E||eps||^2 = dim * sigma_o^2. ``uncorrected`` drops
    the factor ``dim`` from the quadratic term, which is kept only so the two
    curves can be compared.
    """
    if not beta > 1:
        raise ValueError(f"beta must be > 1, got {beta}")
    quad = 0.5 * (beta * beta - 1.0)
    if uncorrected:
        return float(-quad + dim * np.log(beta))
    return float(dim * (np.log(beta) - quad))


def expected_label(beta: float, dim: int, uncorrected: bool = False) -> float:
    if beta == 1:
        return 0.5
    return float(expit(expected_logit(beta, dim, uncorrected)))


def monte_carlo_logits(beta: float, dim: int, n: int, seed, sigma_s: float = 1.0) -> np.ndarray:
    """Posterior logits of ``n`` draws eps ~ N(0, (beta*sigma_s)^2 I)."""
    cfg = NoiseConfig(sigma_s, beta * sigma_s, dim)
    rng = np.random.default_rng(seed)
    norm_sq = rng.chisquare(dim, size=n) * cfg.sigma_o ** 2
    return posterior_logit(norm_sq, cfg)


def select_beta(dim: int, target_ood_label: float, tol: float = 1e-6) -> float:
    """Smallest noise ratio whose expected OOD label is at most the target."""
    if not 0.0 < target_ood_label < 0.5:
        raise ValueError(f"target must lie in (0, 0.5), got {target_ood_label}")
    lo, hi = 1.0, 2.0
    while expected_label(hi, dim) > target_ood_label:
        lo, hi = hi, hi * 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if expected_label(mid, dim) <= target_ood_label:
            hi = mid
        else:
            lo = mid
    return hi
