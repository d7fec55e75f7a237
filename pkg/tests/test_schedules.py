import math

import numpy as np
import pytest

from asgm import schedules as sc
from asgm.errors import TimeRangeError, UnknownPresetError


def test_geometric_values():
    tr = sc.geometric(0.5, 1000.0, T=2.0)
    assert tr(0.0) == pytest.approx(0.5)
    assert tr(2.0) == pytest.approx(1000.0)
    assert tr(1.0) == pytest.approx(22.3607, abs=1e-4)


def test_blowup_values():
    tr = sc.exponential_blowup(0.025, 0.5, T=2.0)
    assert tr(0.0) == pytest.approx(0.025)
    assert math.isfinite(tr(2.0 - 1e-9))
    assert tr(2.0) == math.inf
    vals = tr(np.linspace(0, 1.99, 50))
    assert np.all(np.diff(vals) > 0)


def test_power_and_constant():
    assert sc.power(1.0, 3.0, 2.0, T=2.0)(1.0) == pytest.approx(1.5)
    assert sc.constant(0.3)(1.7) == 0.3


@pytest.mark.parametrize("args", [(0.0, 1.0), (2.0, 1.0), (1.0, math.inf)])
def test_geometric_rejects_bad_bounds(args):
    with pytest.raises(ValueError):
        sc.geometric(*args)


def test_time_range():
    tr = sc.geometric(0.1, 1.0, T=1.0)
    with pytest.raises(TimeRangeError):
        tr(1.5)
    with pytest.raises(TimeRangeError):
        tr(-0.1)


def test_psi_examples():
    iso = sc.AnisotropyCoefficient(sc.constant(1.0), sc.INF)
    assert iso(0.3, [100.0, -7.0]) == 1.0
    aniso = sc.AnisotropyCoefficient(sc.constant(1.0), sc.constant(1.0))
    assert aniso(0.3, [3.0, 4.0]) == pytest.approx(1 / math.sqrt(26), abs=1e-6)
    assert aniso(0.3, [0.0, 0.0]) == 1.0


def test_psi_bounds_and_monotone(rng):
    coef = sc.AnisotropyCoefficient(sc.geometric(0.2, 3.0), sc.constant(0.4))
    r = np.linspace(0, 50, 200)
    p = np.stack([r, np.zeros_like(r)], axis=-1)
    vals = coef(1.0, p)
    phi = coef.phi_at(1.0)
    assert np.all(vals > 0) and np.all(vals <= phi)
    assert np.all(np.diff(vals) <= 0)


def test_threshold_boundary():
    # exactly at the threshold the anisotropic formula is still used
    assert sc.psi_from_sq(1.0, 1e12, 1e24) == pytest.approx(1 / math.sqrt(2))
    assert sc.psi_from_sq(1.0, 1e13, 1e30) == 1.0


def test_presets():
    a = sc.preset_schedule("aniso-heat", image_size=64)
    assert a.phi1(a.T) == pytest.approx(128.0)
    assert a.psi2.isotropic and not a.psi1.isotropic
    assert a.lambda1(0.0) == pytest.approx(0.025)
    i = sc.preset_schedule("iso-heat")
    assert i.phi2(i.T) == pytest.approx(0.5)
    assert i.phi2(0.0) == pytest.approx(0.01)
    v = sc.preset_schedule("ve-noise")
    assert v.phi1(1.0) == 0.0 and v.phi2(v.T) == pytest.approx(2.0)
    assert v.T == 2.0 and v.dt == 1e-2
    with pytest.raises(UnknownPresetError):
        sc.preset_schedule("bogus")
