import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from splinedeconv.error_models import ErrorLaw, normal_noise, parse_law

LAWS = [
    ErrorLaw("normal", 0.25),
    ErrorLaw("laplace", 0.5 / math.sqrt(2)),
    ErrorLaw("uniform", math.sqrt(0.75)),
    ErrorLaw("normal", 0.0025),
    ErrorLaw("laplace", 0.05 / math.sqrt(2)),
    ErrorLaw("uniform", 0.125),
]
IDS = [law.spec() for law in LAWS]


def test_uniform_peak():
    assert ErrorLaw("uniform", math.sqrt(0.75)).density(0.0) == pytest.approx(0.57735, abs=1e-5)


def test_laplace_peak():
    assert ErrorLaw("laplace", 0.5 / math.sqrt(2)).density(0.0) == pytest.approx(math.sqrt(2), rel=1e-12)


def test_normal_tails_vanish():
    law = ErrorLaw("normal", 0.25)
    assert law.density(1e3) == 0.0 and law.density(-1e3) == 0.0


@pytest.mark.parametrize("law", LAWS[:3], ids=IDS[:3])
def test_model_one_variances_match(law):
    assert law.variance == pytest.approx(0.25, rel=1e-12)


@pytest.mark.parametrize("law", LAWS, ids=IDS)
def test_symmetric(law):
    u = np.linspace(-3, 3, 1001)
    assert np.max(np.abs(law.density(u) - law.density(-u))) <= 1e-15


@pytest.mark.parametrize("law", LAWS, ids=IDS)
def test_mass(law):
    if law.kind == "uniform":
        mass = integrate.quad(law.density, -law.param, law.param)[0]
    else:
        s = 20 * law.std
        mass = integrate.quad(law.density, -s, s, points=[0.0], limit=200)[0]
    assert abs(mass - 1) < 1e-8


@pytest.mark.parametrize("law", LAWS, ids=IDS)
def test_matches_scipy(law):
    u = np.linspace(-2, 2, 401)
    ref = {
        "normal": stats.norm(scale=law.std),
        "laplace": stats.laplace(scale=law.param),
        "uniform": stats.uniform(loc=-law.param, scale=2 * law.param),
    }[law.kind]
    inside = np.abs(np.abs(u) - law.param) > 1e-9 if law.kind == "uniform" else slice(None)
    assert np.allclose(law.density(u)[inside], ref.pdf(u)[inside], rtol=1e-12, atol=1e-300)
    assert np.allclose(law.cdf(u), ref.cdf(u), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("law", LAWS, ids=IDS)
def test_char_fn_matches_numeric_transform(law):
    for t in (0.0, 0.7, 3.0, 11.0):
        lim = law.param if law.kind == "uniform" else 40 * law.std
        val = integrate.quad(lambda u: math.cos(t * u) * float(law.density(u)), -lim, lim, points=[0.0], limit=400)[0]
        assert float(law.char_fn(t)) == pytest.approx(val, abs=1e-8)


class TestDerivative:
    noise = normal_noise(0.25)

    def test_zero_at_origin(self):
        assert self.noise.density_deriv(0.0) == 0.0

    def test_example(self):
        e, h = 0.5, 1e-5
        fd = (self.noise.density(e + h) - self.noise.density(e - h)) / (2 * h)
        d = self.noise.density_deriv(e)
        assert d == pytest.approx(-2 * self.noise.density(e), rel=1e-12)
        assert abs(d - fd) / abs(d) < 1e-6

    @given(st.floats(min_value=-5, max_value=5).filter(lambda v: abs(v) > 1e-9))
    def test_sign(self, e):
        assert np.sign(self.noise.density_deriv(e)) == -np.sign(e)

    def test_unsupported(self):
        with pytest.raises(ValueError):
            ErrorLaw("laplace", 1.0).density_deriv(0.1)


class TestSample:
    def test_empty(self, rng):
        assert ErrorLaw("normal", 1.0).sample(rng, 0).size == 0

    def test_uniform_support(self, rng):
        assert np.all(np.abs(ErrorLaw("uniform", 0.125).sample(rng, 10_000)) <= 0.125)

    def test_normal_variance(self, rng):
        x = ErrorLaw("normal", 0.25).sample(rng, 100_000)
        se = 0.25 * math.sqrt(2 / (x.size - 1))
        assert abs(x.var(ddof=1) - 0.25) < 3 * se

    @pytest.mark.parametrize("law", LAWS, ids=IDS)
    def test_ks_distance(self, law, rng):
        x = law.sample(rng, 100_000)
        assert stats.kstest(x, law.cdf).statistic < 0.01

    def test_deterministic(self):
        law = ErrorLaw("laplace", 0.3)
        a = law.sample(np.random.default_rng(5), 50)
        b = law.sample(np.random.default_rng(5), 50)
        assert np.array_equal(a, b)


class TestParse:
    def test_string(self):
        assert parse_law("laplace:0.035") == ErrorLaw("laplace", 0.035)

    def test_mapping(self):
        assert parse_law({"kind": "uniform", "param": 0.125}) == ErrorLaw("uniform", 0.125)

    def test_round_trip(self):
        law = ErrorLaw("normal", 0.0025)
        assert parse_law(law.spec()) == law
        assert parse_law(law.to_dict()) == law

    @pytest.mark.parametrize(
        "bad",
        ["normal", "gamma:1", "normal:-1", "normal:abc", "uniform:0", {"kind": "normal"},
         {"kind": "normal", "param": 1, "mean": 0}, "normal:inf"],
    )
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            parse_law(bad)
