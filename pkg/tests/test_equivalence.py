import numpy as np
import pytest

from meshpref.cs_divergence import KernelConfig, cs_divergence
from meshpref.equivalence import Scenario, paired_unpaired, run_theorem1, trial_gaps
from meshpref.errors import ConfigError

SMALL = (50, 100, 200, 400)


def test_report_shape_and_fitted_constant():
    rep = run_theorem1(SMALL, 6, seed=1)
    assert rep.sizes == list(SMALL)
    assert np.array(rep.gaps).shape == (4, 6)
    assert np.all(np.array(rep.gaps) >= 0)
    assert rep.median_gaps == pytest.approx(np.median(rep.gaps, axis=1).tolist())
    bound = rep.fitted_C * 2 / np.sqrt(np.array(SMALL))[:, None]
    assert np.all(np.array(rep.gaps) <= bound * (1 + 1e-12))
    assert np.isfinite(rep.fitted_slope)


def test_ladder_matches_direct_estimator():
    scen = Scenario()
    rng = np.random.default_rng(0)
    c, c2 = rng.uniform(-1, 1, 80), rng.uniform(-1, 1, 80)
    nx, ny = rng.standard_normal((2, 80, 2))
    gaps = trial_gaps(scen, [30, 80], 0.9, c, c2, nx, ny)
    X, Yp, Yu = paired_unpaired(scen, c, c2, nx, ny)
    for k, m in enumerate((30, 80)):
        cfg = KernelConfig(0.9)
        direct = abs(cs_divergence(X[:m], Yp[:m], cfg).value - cs_divergence(X[:m], Yu[:m], cfg).value)
        assert gaps[k] == pytest.approx(direct, rel=1e-9, abs=1e-14)


def test_injected_prompts_give_zero_gap():
    rep = run_theorem1(SMALL, 5, seed=3, inject_prompts=True)
    assert np.max(rep.gaps) < 1e-12


def test_identical_populations_gap_shrinks():
    rep = run_theorem1((100, 400, 1600), 10, seed=2, scenario=Scenario.identical())
    assert rep.median_gaps[2] < rep.median_gaps[0]


def test_deterministic():
    a = run_theorem1(SMALL, 5, seed=4)
    b = run_theorem1(SMALL, 5, seed=4)
    assert a.to_dict() == b.to_dict()


@pytest.mark.parametrize("sizes,trials", [((50,), 5), ((5, 50), 5), ((100, 50), 5), ((50, 100), 4)])
def test_invalid_arguments(sizes, trials):
    with pytest.raises(ConfigError):
        run_theorem1(sizes, trials)


def test_scenario_validation():
    with pytest.raises(ConfigError):
        Scenario(dim=3)
