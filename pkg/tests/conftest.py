import os

import pytest


def pytest_collection_modifyitems(config, items):
    if os.getenv("RLCC_LAB_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="long-running experiment; set RLCC_LAB_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
