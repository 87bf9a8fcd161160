import pytest

from couplformer.train import write_digit_idx


@pytest.fixture(scope="session")
def digit_dir(tmp_path_factory):
    """Rendered ten-digit IDX dataset shared by training/CLI/acceptance tests."""
    root = tmp_path_factory.mktemp("digits")
    write_digit_idx(root, n_train=3000, n_test=500, seed=0)
    return root
