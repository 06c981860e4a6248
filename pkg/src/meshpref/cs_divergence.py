"""Empirical Cauchy-Schwarz divergence between two embedding samples.

With Gaussian kernel sums ``S_xx``, ``S_yy`` and ``S_xy`` normalised by
``m*m``, ``n*n`` and ``m*n``::

    D = log S_xx + log S_yy - 2 log S_xy

which equals ``-2 log`` of the cosine between the two kernel mean
embeddings. All arithmetic is float64 and every kernel sum is accumulated
block by block in index order, so results do not depend on thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import DimensionMismatchError, InvalidBandwidthError, NonFiniteError, NotSPDError, NumericDomainError

_BLOCK_ELEMS = 1 << 22


def gaussian_kernel(x, y, sigma: float) -> float:
    """``exp(-|x - y|^2 / (2 sigma^2))``."""
    if not sigma > 0:
        raise InvalidBandwidthError(f"bandwidth must be positive, got {sigma}")
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.exp(-np.dot(d.ravel(), d.ravel()) / (2.0 * sigma * sigma)))


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth choice: a positive float or ``"median"``.

    With ``through_bandwidth`` the gradient also follows the median rule's
    dependence on the samples; otherwise the bandwidth is a constant.
    """

    bandwidth: Union[float, str] = "median"
    through_bandwidth: bool = False

    def __post_init__(self):
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise InvalidBandwidthError(f"unknown bandwidth rule {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise InvalidBandwidthError(f"bandwidth must be positive, got {self.bandwidth}")

    @classmethod
    def parse(cls, text: str) -> "KernelConfig":
        if text == "median":
            return cls("median")
        try:
            return cls(float(text))
        except ValueError:
            raise InvalidBandwidthError(f"bandwidth must be 'median' or a number, got {text!r}") from None


@dataclass
class CSReport:
    value: float
    bandwidth_used: float
    term_logs: tuple
    grad_x: Optional[np.ndarray] = field(default=None, repr=False)
    grad_y: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {
            "value": self.value,
            "bandwidth_used": self.bandwidth_used,
            "term_logs": list(self.term_logs),
        }
        if self.grad_x is not None:
            d["grad_x"] = self.grad_x.tolist()
            d["grad_y"] = self.grad_y.tolist()
        return d


def as_batch(a, name="batch") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DimensionMismatchError(f"{name} must be a non-empty N x d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def _check_pair(X, Y):
    X, Y = as_batch(X, "X"), as_batch(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatchError(f"X has dimension {X.shape[1]} but Y has {Y.shape[1]}")
    return X, Y


def median_bandwidth(X, Y) -> float:
    """Median of the nonzero pairwise distances in the pooled sample; 1.0 if none."""
    X, Y = _check_pair(X, Y)
    return _median_pairs(np.concatenate([X, Y]))[0]


def _median_pairs(pooled):
    """Median nonzero distance and the index pairs it averages (1 or 2 of them)."""
    from scipy.spatial.distance import pdist

    n = len(pooled)
    if n < 2:
        return 1.0, []
    d = pdist(pooled)
    nz = np.flatnonzero(d > 0)
    if not nz.size:
        return 1.0, []
    order = nz[np.argsort(d[nz], kind="stable")]
    k = len(order)
    mids = [order[k // 2]] if k % 2 else [order[k // 2 - 1], order[k // 2]]
    sigma = float(np.median(d[nz]))
    # condensed index -> (i, j)
    rows, cols = np.triu_indices(n, 1)
    return sigma, [(int(rows[c]), int(cols[c])) for c in mids]


def _resolve(X, Y, cfg):
    if cfg is None:
        cfg = KernelConfig()
    elif not isinstance(cfg, KernelConfig):
        cfg = KernelConfig(cfg)
    if cfg.bandwidth == "median":
        sigma, pairs = _median_pairs(np.concatenate([X, Y]))
        return sigma, (pairs if cfg.through_bandwidth else None)
    return float(cfg.bandwidth), None


def _resolve_sigma(X, Y, cfg) -> float:
    return _resolve(X, Y, cfg)[0]


def _kernel_block_sums(A, B, sigma, want_moments=False):
    """Sum of all ``k(a_i, b_j)``.

    With ``want_moments`` also returns ``K @ B``, ``K.sum(1)`` and
    ``sum(K * dist^2)``.
    """
    scale = -0.5 / (sigma * sigma)
    rows = max(1, _BLOCK_ELEMS // max(1, len(B) * A.shape[1]))
    total = 0.0
    kb = np.zeros_like(A) if want_moments else None
    ksum = np.zeros(len(A)) if want_moments else None
    kd2 = 0.0
    for start in range(0, len(A), rows):
        a = A[start:start + rows]
        diff = a[:, None, :] - B[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        K = np.exp(scale * d2)
        total += float(K.sum())
        if want_moments:
            kb[start:start + rows] = K @ B
            ksum[start:start + rows] = K.sum(axis=1)
            kd2 += float((K * d2).sum())
    if want_moments:
        return total, kb, ksum, kd2
    return total, kb, ksum


def _safe_log(s: float, what: str) -> float:
    if not s > 0.0:
        raise NumericDomainError(f"kernel sum {what} is {s!r}; bandwidth too small for these samples")
    return math.log(s)


def _kernel_sums(X, Y, sigma, moments=False):
    sxx = _kernel_block_sums(X, X, sigma, moments)
    syy = _kernel_block_sums(Y, Y, sigma, moments)
    sxy = _kernel_block_sums(X, Y, sigma, moments)
    syx = _kernel_block_sums(Y, X, sigma, True) if moments else None
    return sxx, syy, sxy, syx


def cs_divergence(X, Y, cfg=None) -> CSReport:
    """Empirical CS divergence between sample ``X`` (m x d) and ``Y`` (n x d)."""
    X, Y = _check_pair(X, Y)
    sigma, _ = _resolve(X, Y, cfg)
    return _report(X, Y, sigma, grad=False)


def cs_divergence_grad(X, Y, cfg=None) -> CSReport:
    """As :func:`cs_divergence` with ``grad_x`` and ``grad_y`` filled in.

    A median bandwidth is held fixed while differentiating unless
    ``cfg.through_bandwidth`` is set.
    """
    X, Y = _check_pair(X, Y)
    sigma, pairs = _resolve(X, Y, cfg)
    return _report(X, Y, sigma, grad=True, median_pairs=pairs)


def _report(X, Y, sigma, grad, median_pairs=None):
    m, n = len(X), len(Y)
    sums = _kernel_sums(X, Y, sigma, grad)
    (sxx, kxx_x, kxx_s), (syy, kyy_y, kyy_s), (sxy, kxy_y, kxy_s) = (t[:3] for t in sums[:3])
    lxx = _safe_log(sxx / (m * m), "S_xx")
    lyy = _safe_log(syy / (n * n), "S_yy")
    lxy = _safe_log(sxy / (m * n), "S_xy")
    value = lxx + lyy - 2.0 * lxy
    rep = CSReport(value=value, bandwidth_used=sigma, term_logs=(lxx, lyy, lxy))
    if grad:
        s2 = sigma * sigma
        _, kyx_x, kyx_s, _ = sums[3]
        # d/dx_a sum_ij k(x_i, x_j) = 2 sum_j k(x_a, x_j) (x_j - x_a) / sigma^2
        rep.grad_x = (2.0 * (kxx_x - kxx_s[:, None] * X) / sxx - 2.0 * (kxy_y - kxy_s[:, None] * X) / sxy) / s2
        rep.grad_y = (2.0 * (kyy_y - kyy_s[:, None] * Y) / syy - 2.0 * (kyx_x - kyx_s[:, None] * Y) / sxy) / s2
        if median_pairs:
            # d log S / d sigma = sum(K d^2) / (S sigma^3)
            dsig = (sums[0][3] / sxx + sums[1][3] / syy - 2.0 * sums[2][3] / sxy) / (s2 * sigma)
            pooled = np.concatenate([X, Y])
            g = np.zeros_like(pooled)
            w = dsig / len(median_pairs)
            for i, j in median_pairs:
                u = (pooled[i] - pooled[j]) / np.linalg.norm(pooled[i] - pooled[j])
                g[i] += w * u
                g[j] -= w * u
            rep.grad_x = rep.grad_x + g[:m]
            rep.grad_y = rep.grad_y + g[m:]
    return rep


def mean_embedding_identity_check(X, Y, sigma: float) -> float:
    """|cosine-of-mean-embeddings form - log-sum form| for the same kernel sums."""
    if not sigma > 0:
        raise InvalidBandwidthError(f"bandwidth must be positive, got {sigma}")
    X, Y = _check_pair(X, Y)
    m, n = len(X), len(Y)
    (sxx, _, _), (syy, _, _), (sxy, _, _), _ = _kernel_sums(X, Y, sigma)
    lxx = _safe_log(sxx / (m * m), "S_xx")
    lyy = _safe_log(syy / (n * n), "S_yy")
    lxy = _safe_log(sxy / (m * n), "S_xy")
    log_form = lxx + lyy - 2.0 * lxy
    inner = sxy / (m * n)
    norms = math.sqrt((sxx / (m * m)) * (syy / (n * n)))
    cosine_form = -2.0 * math.log(inner / norms)
    return abs(cosine_form - log_form)


def _gauss_logpdf_at(x, mean, cov):
    d = len(mean)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NotSPDError("covariance is not positive definite") from None
    z = np.linalg.solve(L, np.asarray(x) - np.asarray(mean))
    return -0.5 * float(z @ z) - float(np.log(np.diag(L)).sum()) - 0.5 * d * math.log(2 * math.pi)


def gaussian_closed_form(mu1, cov1, mu2, cov2) -> float:
    """Population CS divergence between N(mu1, cov1) and N(mu2, cov2)."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    d = len(mu1)
    if mu2.shape != (d,) or cov1.shape != (d, d) or cov2.shape != (d, d):
        raise DimensionMismatchError("means and covariances must agree in dimension")
    for c in (cov1, cov2):
        if not np.allclose(c, c.T, rtol=0, atol=1e-12 * max(1.0, np.abs(c).max())):
            raise NotSPDError("covariance is not symmetric")
    zero = np.zeros(d)
    log_pq = _gauss_logpdf_at(mu1, mu2, cov1 + cov2)
    log_pp = _gauss_logpdf_at(zero, zero, 2.0 * cov1)
    log_qq = _gauss_logpdf_at(zero, zero, 2.0 * cov2)
    return -(2.0 * log_pq - log_pp - log_qq)
