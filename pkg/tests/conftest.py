import functools

import pytest

from ttsprune import toy

# default toy configuration
K, H, D, R = 16, 32, 8, 2
N_PAIRS, L_RANGE = 512, (4, 12)
BASE_OPTS = dict(lr=0.1, steps=2000, batch_size=32)


@functools.lru_cache(maxsize=None)
def trained_baseline(seed):
    """(initial model, trained model, training set, held-out set) for one seed."""
    ds = toy.gen_dataset(seed, N_PAIRS, K, D, L_RANGE, R)
    held = toy.gen_dataset(seed + 1000, 128, K, D, L_RANGE, R, codebook=ds.codebook)
    init = toy.init_model(K, H, D, R, seed=seed)
    model, curve = toy.train(init, ds, toy.TrainOptions(seed=seed, **BASE_OPTS))
    return init, model, ds, held


@pytest.fixture(scope="session")
def baseline0():
    return trained_baseline(0)


@pytest.fixture
def small():
    """Small model and data for quick schedule tests."""
    ds = toy.gen_dataset(3, 64, 6, 3, (2, 5), 2)
    model = toy.init_model(6, 8, 3, 2, seed=3)
    model, _ = toy.train(model, ds, toy.TrainOptions(lr=0.2, steps=150, batch_size=16, seed=3))
    return model, ds


def pytest_terminal_summary(terminalreporter):
    import re
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        def order(line):
            num, suffix = re.match(r"criterion\s+(\d+)(\w*)", line).groups()
            return int(num), suffix

        for line in sorted(mod.RESULTS, key=order):
            terminalreporter.write_line(line)
