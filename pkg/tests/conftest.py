import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from minichic.imageio import load_image

DATA = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def natural_256():
    return load_image(DATA / "astronaut_256.png")


@pytest.fixture(scope="session")
def small_64():
    return load_image(DATA / "chelsea_64.png")


def run_python(code: str, numba: bool = True, timeout: int = 600) -> str:
    """Run ``code`` in a fresh interpreter, optionally with numba disabled."""
    env = dict(os.environ)
    env["MINICHIC_DISABLE_NUMBA"] = "0" if numba else "1"
    proc = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env,
                          timeout=timeout)
    if proc.returncode != 0:
        raise AssertionError(proc.stderr)
    return proc.stdout
