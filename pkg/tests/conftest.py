import os
from pathlib import Path

import pytest

from dualmem.streams import load_mnist

DATA_ROOT = Path(os.environ.get("DUALMEM_DATA", Path(__file__).resolve().parent.parent / "data" / "mnist"))


@pytest.fixture(scope="session")
def mnist():
    if not DATA_ROOT.exists():
        pytest.skip(f"MNIST data not found under {DATA_ROOT}")
    return load_mnist(DATA_ROOT)
