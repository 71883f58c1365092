import os
from pathlib import Path

import pytest

from synthetic import write_chase, write_drive


@pytest.fixture(scope="session")
def drive_root(tmp_path_factory) -> Path:
    """Real DRIVE if $PYRAMID_UNET_DRIVE_ROOT is set, else a synthetic replica."""
    env = os.environ.get("PYRAMID_UNET_DRIVE_ROOT")
    if env:
        return Path(env)
    return write_drive(tmp_path_factory.mktemp("DRIVE"))


@pytest.fixture(scope="session")
def chase_root(tmp_path_factory) -> Path:
    env = os.environ.get("PYRAMID_UNET_CHASE_ROOT")
    if env:
        return Path(env)
    return write_chase(tmp_path_factory.mktemp("CHASEDB1"))
