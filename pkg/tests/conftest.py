import numpy as np
import pytest

from dpaudit import harness, nn


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def random_problem(rng, d_x=5, d_h=7, n_classes=4, n_tags=0, batch=3, h=2):
    """Small random network and batch with non-trivial biases."""
    params = nn.init_params(d_x, d_h, n_classes, rng, n_tags=n_tags)
    params.b1[:] = 0.1 * rng.standard_normal(d_h)
    params.b2[:] = 0.1 * rng.standard_normal(n_classes)
    if n_tags:
        params.tag_b[:] = 0.1 * rng.standard_normal(n_tags)
    x = rng.standard_normal((batch, d_x))
    y = rng.integers(0, n_classes, size=batch)
    tags = member = None
    if n_tags:
        tags = np.stack([np.sort(rng.choice(n_tags, h, replace=False)) for _ in range(batch)])
        member = rng.integers(0, 2, size=batch)
    return params, nn.Batch(x, y, tags, member)


def finite_difference(params, batch, spec, block, index, h=1e-5):
    """Central difference of the single-example loss w.r.t. one coordinate."""
    blocks = [b.copy() for b in params.blocks()]
    orig = blocks[block][index]
    blocks[block][index] = orig + h
    up = nn.per_sample_losses(params.replace_blocks(blocks), batch, spec)[0]
    blocks[block][index] = orig - h
    down = nn.per_sample_losses(params.replace_blocks(blocks), batch, spec)[0]
    return (up - down) / (2 * h)


def gradient_check(rng, spec, n_tags=0, coords_per_block=6, **dims):
    """Max relative error between analytic and central-difference gradients."""
    params, batch = random_problem(rng, n_tags=n_tags, batch=1, **dims)
    if batch.member is not None:
        batch.member[:] = 1
    analytic = nn.per_sample_grads(params, batch, spec)[0]
    worst = 0.0
    for k, g in enumerate(analytic):
        for _ in range(coords_per_block):
            idx = tuple(rng.integers(0, s) for s in g.shape)
            fd = finite_difference(params, batch, spec, k, idx)
            worst = max(worst, abs(g[idx] - fd) / max(abs(fd), abs(g[idx]), 1e-6))
    return worst


# Acceptance criteria report: one line per criterion after the test summary.
ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(number, name, passed, detail):
        ACCEPTANCE[number] = (name, bool(passed), detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {name}: {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {name}: {detail}")


DESK = dict(d_x=512, d_h=1024, C=256, epochs=100.0, lr=4.0, q=0.1, delta=1e-5)


@pytest.fixture(scope="session")
def honest_eps1_reports():
    """Correct DP-SGD claiming eps = 1, self-comparison on m = 512, 20 seeds."""
    cfg = harness.ExperimentConfig(m=512, eps_target=1.0, seeds=tuple(range(20)), **DESK)
    return harness.run_fault_demo(cfg, "none")
