import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpsams.schedule import ScheduleParams, masked_count, masking_ratio

DEFAULTS = ScheduleParams(sigma0=0.25, tau=12.0)


def test_first_epoch_is_sigma0():
    assert masking_ratio(1, DEFAULTS) == 0.25


def test_epoch_800_reaches_about_80_percent():
    r = masking_ratio(800, DEFAULTS)
    assert r == pytest.approx(0.25 + math.log(800) / 12, abs=1e-12)
    assert r == pytest.approx(0.8071, abs=5e-5)


def test_fixed_mode():
    p = ScheduleParams.fixed(0.75)
    assert {masking_ratio(e, p) for e in (1, 7, 800, 10**6)} == {0.75}


def test_epoch_zero_rejected():
    with pytest.raises(ValueError):
        masking_ratio(0, DEFAULTS)


def test_sigma_max_clamps():
    p = ScheduleParams(sigma0=0.25, tau=1.0, sigma_max=0.9)
    assert masking_ratio(10**6, p) == 0.9


@pytest.mark.parametrize("kw", [dict(sigma0=0.0), dict(sigma0=0.96), dict(tau=0.0), dict(sigma_max=1.2)])
def test_invalid_params(kw):
    with pytest.raises(ValueError):
        ScheduleParams(**kw)


def test_crosses_half_at_epoch_21():
    # exhaustive scan; ln(e) >= 3 first holds at e = 21
    first = next(e for e in range(1, 1000) if masking_ratio(e, DEFAULTS) >= 0.5)
    assert first == 21


@given(st.integers(1, 5000), st.integers(1, 5000))
def test_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert masking_ratio(lo, DEFAULTS) <= masking_ratio(hi, DEFAULTS) <= DEFAULTS.sigma_max


@pytest.mark.parametrize("N, ratio, n", [(196, 0.25, 49), (196, 0.8071, 158), (10, 0.05, 1), (10, 0.0, 0), (10, 1.0, 10)])
def test_masked_count_examples(N, ratio, n):
    assert masked_count(N, ratio) == n


def test_masked_count_158_by_integer_oracle():
    # 196 * 8071 // 10000 computed on integers
    assert masked_count(196, 0.8071) == 196 * 8071 // 10000 == 158


@given(st.integers(2, 4096), st.floats(min_value=1e-9, max_value=1 - 1e-9))
def test_masked_count_keeps_both_sets_nonempty(N, ratio):
    assert 1 <= masked_count(N, ratio) <= N - 1
