import numpy as np
import pytest

from tsecl import datagen


@pytest.fixture(scope="session")
def tiny_splits():
    """A few short records per partition; enough for bookkeeping tests."""
    cfg = datagen.DatasetConfig(seed=11, train_profiles_per_gender=2, test_profiles_per_gender=2,
                                train_pairs=6, dev_pairs=2, test_pairs=2,
                                mixture_duration=0.25, reference_duration=0.5)
    return datagen.build_dataset(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_gradient_check(model, batch, kind, h=1e-5, rng=None, n_probe=None):
    """Max relative error between analytic and central-difference gradients.

    The error for each coordinate is |a - n| / max(|a|, |n|, 1e-8); every
    coordinate is checked unless ``n_probe`` limits it to a random subset.
    """
    from tsecl.model import batch_gradient, forward_batch, loss

    def total(m):
        mix = np.stack([b[0] for b in batch])
        emb = np.stack([b[1] for b in batch])
        est, _ = forward_batch(m, mix, emb)
        return np.mean([loss(est[i], batch[i][2], kind) for i in range(len(batch))])

    analytic = batch_gradient(model, batch, kind).grads
    worst = 0.0
    for name, p in model.params.items():
        idx = list(np.ndindex(p.shape))
        if n_probe is not None and len(idx) > n_probe:
            pick = (rng or np.random.default_rng(0)).choice(len(idx), n_probe, replace=False)
            idx = [idx[i] for i in pick]
        for i in idx:
            old = p[i]
            p[i] = old + h
            up = total(model)
            p[i] = old - h
            down = total(model)
            p[i] = old
            num = (up - down) / (2 * h)
            a = analytic[name][i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst


def tiny_batch(cfg, n=2, length=40, seed=0):
    """Random (mixture, embedding, target) triples for the tiny model."""
    r = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = r.standard_normal(length)
        m = s + 0.7 * r.standard_normal(length)
        e = r.standard_normal(cfg.embed_dim)
        out.append((m, e / np.linalg.norm(e), s))
    return out


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
