import datetime as dt

import numpy as np
import pytest
from hypothesis import given, strategies as st

from agro_pinn.errors import ConfigError, DataError
from agro_pinn.fao56 import (
    CropParameters,
    aggregate_to_acquisitions,
    basal_kcb,
    kc_curve,
    read_crop_parameters,
    simulate_etx,
    stress_ks,
)
from agro_pinn.meteo import DailyWeather, penman_monteith_et0, state_for

P = CropParameters()
START = dt.date(2021, 4, 1)


def days(n):
    return [START + dt.timedelta(days=i) for i in range(n)]


def flat_weather(n, **kw):
    base = dict(t_min=8.0, t_max=20.0, u2=2.0, rn=12.0, e_a=0.9)
    base.update(kw)
    return [DailyWeather(d, **base) for d in days(n)]


class TestKc:
    def test_plateau(self):
        assert kc_curve(P.len_ini + P.len_dev + 5, P) == P.kcb_mid

    def test_development_midpoint(self):
        p = CropParameters(len_dev=30)
        assert kc_curve(p.len_ini + 15, p) == pytest.approx((p.kcb_ini + p.kcb_mid) / 2, abs=1e-15)

    def test_dual_wet_surface(self):
        p = CropParameters(kcb_mid=1.15, ke_max=1.2)
        assert kc_curve(p.len_ini + p.len_dev + 1, p, "dual", wet_surface=True) == pytest.approx(1.20, abs=1e-15)

    def test_dual_drying(self):
        mid = P.len_ini + P.len_dev + 1
        ke = P.ke_max - P.kcb_mid
        assert kc_curve(mid, P, "dual", days_since_wet=2) == pytest.approx(P.kcb_mid + ke / 2)
        assert kc_curve(mid, P, "dual", days_since_wet=4) == P.kcb_mid
        assert kc_curve(mid, P, "dual") == P.kcb_mid

    def test_continuity_at_stage_boundaries(self):
        p = CropParameters(len_ini=3, len_dev=4, len_mid=2, len_late=5)
        ends = [p.len_ini, p.len_ini + p.len_dev, p.len_ini + p.len_dev + p.len_mid]
        # the linear segments reach the next segment's value exactly at the boundary
        assert basal_kcb(ends[0], p) == p.kcb_ini
        assert basal_kcb(ends[1], p) == p.kcb_mid
        assert basal_kcb(ends[2], p) == p.kcb_mid

    def test_errors(self):
        with pytest.raises(ConfigError):
            kc_curve(3, P, "triple")
        with pytest.raises(DataError):
            basal_kcb(P.season_length, P)
        with pytest.raises(ConfigError):
            CropParameters(len_dev=0)

    def test_scaled_keeps_total(self):
        assert P.scaled_to(57).season_length == 57

    def test_read_parameters(self, tmp_path):
        path = tmp_path / "crop.txt"
        path.write_text("# wheat\nkcb_mid = 1.15\nlen_mid=40\nky_stage = 0.4, 1.6, 1.0\n")
        p = read_crop_parameters(path)
        assert (p.kcb_mid, p.len_mid, p.ky_stage) == (1.15, 40, (0.4, 1.6, 1.0))
        path.write_text("kcb_top = 1\n")
        with pytest.raises(ConfigError, match="unknown"):
            read_crop_parameters(path)


class TestSimulate:
    def test_zero_et0_gives_zero_etx(self):
        w = flat_weather(5, rn=0.0, u2=0.0)
        assert np.all(simulate_etx(w, P).etx == 0.0)

    def test_unit_kc_reproduces_et0(self):
        p = CropParameters(kcb_ini=1, kcb_mid=1, kcb_end=1)
        tr = simulate_etx(flat_weather(10, rn=9.0), p)
        np.testing.assert_array_equal(tr.etx, tr.et0)

    def test_three_day_product(self):
        p = CropParameters(kcb_ini=0.3, kcb_mid=1.2, kcb_end=1.2, len_ini=2, len_dev=1, len_mid=1, len_late=1)
        w = flat_weather(3)
        tr = simulate_etx(w, p)
        e = penman_monteith_et0(w[0], state_for(w[0]))
        np.testing.assert_allclose(tr.kc, [0.3, 0.3, 0.3])
        np.testing.assert_allclose(tr.etx, 0.3 * np.full(3, e), rtol=1e-15)

    def test_trace_invariant_and_wet_days(self):
        w = flat_weather(30)
        w[10] = DailyWeather(w[10].date, 8.0, 20.0, u2=2.0, rn=12.0, e_a=0.9, precip=5.0)
        tr = simulate_etx(w, P, "dual")
        np.testing.assert_array_equal(tr.etx, tr.kc * tr.et0)
        assert tr.kc[10] == pytest.approx(P.ke_max)
        assert tr.kc[9] == P.kcb_ini

    def test_rejects_unsorted(self):
        w = flat_weather(3)
        with pytest.raises(DataError):
            simulate_etx([w[1], w[0]], P)

    def test_error_carries_day(self):
        short = CropParameters(len_ini=1, len_dev=1, len_mid=1, len_late=1)
        with pytest.raises(DataError, match="day 4"):
            simulate_etx(flat_weather(5), short)


class TestKs:
    def test_cases(self):
        assert stress_ks(10, 100, 40) == 1.0
        assert stress_ks(100, 100, 40) == 0.0
        assert stress_ks(70, 100, 40) == 0.5

    def test_rejects_raw_ge_taw(self):
        with pytest.raises(DataError):
            stress_ks(1, 50, 50)

    @given(st.floats(0, 200), st.floats(0, 200))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert stress_ks(hi, 120, 50) <= stress_ks(lo, 120, 50)

    def test_continuity(self):
        assert stress_ks(40 + 1e-12, 100, 40) == pytest.approx(1.0)
        assert stress_ks(100 - 1e-12, 100, 40) == pytest.approx(0.0, abs=1e-12)


class TestAggregation:
    def test_single_acquisition_at_end(self):
        d = days(6)
        assert aggregate_to_acquisitions(np.arange(6.0), d, [d[-1]]).tolist() == [15.0]

    def test_partition(self):
        d = days(4)
        assert aggregate_to_acquisitions([1, 2, 3, 4], d, [d[1], d[3]]).tolist() == [3.0, 7.0]

    def test_zeros(self):
        d = days(9)
        assert not aggregate_to_acquisitions(np.zeros(9), d, [d[2], d[5]]).any()

    @given(st.lists(st.floats(0, 10), min_size=10, max_size=10), st.sets(st.integers(0, 9), min_size=1))
    def test_conservation(self, values, picks):
        d = days(10)
        acq = [d[i] for i in sorted(picks)]
        steps = aggregate_to_acquisitions(values, d, acq)
        covered = sum(values[:max(picks) + 1])
        assert steps.sum() == pytest.approx(covered, rel=1e-12, abs=1e-12)

    def test_errors(self):
        d = days(5)
        with pytest.raises(DataError):
            aggregate_to_acquisitions(np.ones(5), d, [d[3], d[1]])
        with pytest.raises(DataError):
            aggregate_to_acquisitions(np.ones(5), d, [d[4] + dt.timedelta(days=1)])
