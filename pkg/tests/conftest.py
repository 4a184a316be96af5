import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, settings

from causalpanel.core import validate_panel

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = Path(__file__).parent / "fixtures"


def long_frame(Y, cohort, years, treated=None, **covariates):
    """Long panel frame from a units x years outcome matrix (NaN = unobserved row)."""
    Y = np.asarray(Y, dtype=float)
    N, T = Y.shape
    years = np.asarray(years)
    cohort = np.asarray(cohort)
    ui, ti = np.nonzero(~np.isnan(Y))
    if treated is None:
        treated = (cohort[:, None] > 0) & (years[None, :] >= cohort[:, None])
    data = {
        "unit_id": ui,
        "region_id": "R",
        "year": years[ti],
        "outcome": Y[ui, ti],
        "treated": np.asarray(treated, dtype=int)[ui, ti],
        "age": 40,
        "gender": 0,
    }
    for name, X in covariates.items():
        data[name] = np.asarray(X, dtype=float)[ui, ti]
    return pd.DataFrame(data)


def make_panel(Y, cohort, years, binary=False, **covariates):
    return validate_panel(long_frame(Y, cohort, years, **covariates), binary_outcome=binary)


@pytest.fixture
def fixtures_dir():
    return FIXTURES
