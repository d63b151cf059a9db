import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(2)


def finite_difference_check(make_loss, parameters, rel_tol=1e-3, eps=1e-5, per_param=6, seed=0):
    """Compare autograd parameter gradients against central differences.

    make_loss must rebuild the (double-precision) loss from scratch on
    every call. A random subset of entries per parameter is probed.
    """
    loss = make_loss()
    for p in parameters:
        if p.grad is not None:
            p.grad = None
    loss.backward()
    rng = np.random.default_rng(seed)
    checked = 0
    for param in parameters:
        grad = param.grad
        assert grad is not None, "parameter received no gradient"
        flat = param.detach().reshape(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(per_param, n), replace=False)
        for idx in picks:
            idx = int(idx)
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + eps
            up = float(make_loss().detach())
            with torch.no_grad():
                flat[idx] = orig - eps
            down = float(make_loss().detach())
            with torch.no_grad():
                flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = float(grad.reshape(-1)[idx])
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom < rel_tol, (
                f"gradient mismatch at element {idx}: analytic {an}, finite-diff {fd}"
            )
            checked += 1
    assert checked > 0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
