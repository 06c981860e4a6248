"""Paired versus unpaired CS divergence: how fast the gap closes.

Two conditional populations share a prompt variable ``c ~ U[-1, 1]``::

    x | c ~ N(offset + c * shift, I)      y | c ~ N(c * shift, I)

A *paired* sample conditions both populations on the same prompt list, an
*unpaired* sample conditions ``y`` on an independent list. Both estimates
target the same population divergence, so their difference should shrink
like ``1/sqrt(m) + 1/sqrt(n)``.

Within a trial the noise draws are shared between the paired and unpaired
estimates and the size ladder uses nested prefixes of one draw at the
largest size, so the two code paths differ only in which prompt list ``y``
sees. The bandwidth is fixed once (median rule on a pilot draw at the
largest size) and reused for every size and trial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cs_divergence import _median_pairs
from .errors import ConfigError, NumericDomainError

DEFAULT_SIZES = (50, 100, 200, 400, 800, 1600, 3200)


@dataclass(frozen=True)
class Scenario:
    """Conditional Gaussian pair; ``offset`` is the ``x``-only mean shift."""

    dim: int = 2
    offset: tuple = (1.0, 0.0)
    shift: tuple = (0.0, 1.5)
    prompt_range: float = 1.0

    def __post_init__(self):
        if len(self.offset) != self.dim or len(self.shift) != self.dim:
            raise ConfigError("offset and shift must have length dim")
        if not self.prompt_range > 0:
            raise ConfigError("prompt_range must be positive")

    @classmethod
    def identical(cls, dim: int = 2) -> "Scenario":
        return cls(dim=dim, offset=(0.0,) * dim, shift=(0.0, 1.5) + (0.0,) * (dim - 2))

    def to_dict(self) -> dict:
        return {"dim": self.dim, "offset": list(self.offset), "shift": list(self.shift),
                "prompt_range": self.prompt_range}


@dataclass
class Theorem1Report:
    sizes: list
    gaps: list
    median_gaps: list
    fitted_slope: float
    fitted_C: float
    sigma: float = 0.0
    scenario: dict = field(default_factory=dict)

    @property
    def monotone(self) -> bool:
        return all(b <= a for a, b in zip(self.median_gaps, self.median_gaps[1:]))

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "gaps": self.gaps,
            "median_gaps": self.median_gaps,
            "fitted_slope": self.fitted_slope,
            "fitted_C": self.fitted_C,
            "sigma": self.sigma,
            "scenario": self.scenario,
            "monotone": self.monotone,
        }


def _prefix_kernel_sums(A, B, sigma, sizes):
    """``sum(K[:s, :s])`` for each ``s`` in ``sizes`` with ``K = k(A, B)``."""
    from scipy.spatial.distance import cdist

    K = np.exp(cdist(A, B, "sqeuclidean") * (-0.5 / (sigma * sigma)))
    return np.array([K[:s, :s].sum() for s in sizes])


def _ladder_divergence(X, Y, sigma, sizes, sxx=None):
    sizes = np.asarray(sizes, dtype=np.float64)
    if sxx is None:
        sxx = _prefix_kernel_sums(X, X, sigma, sizes.astype(int))
    syy = _prefix_kernel_sums(Y, Y, sigma, sizes.astype(int))
    sxy = _prefix_kernel_sums(X, Y, sigma, sizes.astype(int))
    if np.any(sxy <= 0):
        raise NumericDomainError("cross kernel sum underflowed; scenario offset too large for the bandwidth")
    m2 = sizes * sizes
    return np.log(sxx / m2) + np.log(syy / m2) - 2.0 * np.log(sxy / m2), sxx


def _draw(rng, scen: Scenario, m: int):
    c = rng.uniform(-scen.prompt_range, scen.prompt_range, size=m)
    c_other = rng.uniform(-scen.prompt_range, scen.prompt_range, size=m)
    noise_x = rng.standard_normal((m, scen.dim))
    noise_y = rng.standard_normal((m, scen.dim))
    return c, c_other, noise_x, noise_y


def paired_unpaired(scen: Scenario, c, c_other, noise_x, noise_y):
    """Samples ``X``, ``Y_paired`` and ``Y_unpaired`` from shared noise."""
    offset = np.asarray(scen.offset, dtype=np.float64)
    shift = np.asarray(scen.shift, dtype=np.float64)
    X = noise_x + offset + c[:, None] * shift
    Yp = noise_y + c[:, None] * shift
    Yu = noise_y + np.asarray(c_other)[:, None] * shift
    return X, Yp, Yu


def trial_gaps(scen: Scenario, sizes, sigma, c, c_other, noise_x, noise_y) -> np.ndarray:
    X, Yp, Yu = paired_unpaired(scen, c, c_other, noise_x, noise_y)
    d_paired, sxx = _ladder_divergence(X, Yp, sigma, sizes)
    d_unpaired, _ = _ladder_divergence(X, Yu, sigma, sizes, sxx)
    return np.abs(d_paired - d_unpaired)


def _check(sizes, trials):
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or any(s < 10 for s in sizes):
        raise ConfigError("need at least two sizes, each >= 10")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ConfigError("sizes must be strictly increasing")
    if trials < 5:
        raise ConfigError(f"need trials >= 5, got {trials}")
    return sizes


def run_theorem1(sizes=DEFAULT_SIZES, trials: int = 20, seed: int = 0, scenario: Scenario = Scenario(),
                 inject_prompts: bool = False) -> Theorem1Report:
    """Gap statistics over a size ladder (``n = m``).

    ``inject_prompts`` reuses the paired prompt list for the unpaired draw; the
    two estimates must then agree exactly.
    """
    sizes = _check(sizes, trials)
    top = sizes[-1]
    pilot_ss, *trial_ss = np.random.SeedSequence(seed).spawn(trials + 1)
    X, Yp, _ = paired_unpaired(scenario, *_draw(np.random.default_rng(pilot_ss), scenario, top))
    sigma = _median_pairs(np.concatenate([X, Yp]))[0]

    table = np.empty((len(sizes), trials))
    for t, ss in enumerate(trial_ss):
        c, c_other, nx, ny = _draw(np.random.default_rng(ss), scenario, top)
        if inject_prompts:
            c_other = c
        table[:, t] = trial_gaps(scenario, sizes, sigma, c, c_other, nx, ny)

    medians = np.median(table, axis=1)
    m = np.asarray(sizes, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logs = np.log(medians)
    slope = float(np.polyfit(np.log(m), logs, 1)[0]) if np.all(np.isfinite(logs)) else float("nan")
    rate = 2.0 / np.sqrt(m)
    fitted_c = float(np.max(table / rate[:, None]))
    return Theorem1Report(
        sizes=sizes,
        gaps=table.tolist(),
        median_gaps=medians.tolist(),
        fitted_slope=slope,
        fitted_C=fitted_c,
        sigma=sigma,
        scenario=scenario.to_dict(),
    )


def monotone_fraction(master_seeds, **kw) -> float:
    """Share of master seeds whose median gaps never increase along the ladder."""
    hits = [run_theorem1(seed=s, **kw).monotone for s in master_seeds]
    return sum(hits) / len(hits)


def rate_bound(m: int, n: int) -> float:
    return 1.0 / math.sqrt(m) + 1.0 / math.sqrt(n)
