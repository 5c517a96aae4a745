import os
from pathlib import Path

import pytest

# persistent on-disk quantile cache inside the repo so repeated test runs
# skip the expensive Monte Carlo calibrations
os.environ.setdefault(
    "JULES_CACHE_DIR", str(Path(__file__).resolve().parent.parent / ".jules-cache"))

from jules.filters import bessel_filter, truncate  # noqa: E402


@pytest.fixture(scope="session")
def ga_filter():
    """4-pole Bessel, 1 kHz cutoff at 10 kHz sampling, truncated at 1e-3."""
    return truncate(bessel_filter(4, 1000.0, 10000.0), 1e-3)


@pytest.fixture(scope="session")
def workers():
    return os.cpu_count() or 1
