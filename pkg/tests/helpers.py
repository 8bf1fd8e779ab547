"""Shared finite-difference utilities for the test suite."""

import numpy as np


def central_diff(f, arr, h=1e-5, indices=None):
    """Numerical gradient of scalar ``f()`` wrt ``arr`` (mutated in place and restored)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def sample_indices(size, rng, limit=40):
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def assert_grad_close(analytic, numeric, indices=None, rel=1e-4, floor=1e-7):
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    if indices is not None:
        a, n = a[indices], n[indices]
    err = np.abs(a - n)
    tol = rel * np.maximum(np.abs(a), np.abs(n)) + floor
    bad = np.flatnonzero(err > tol)
    assert bad.size == 0, f"{bad.size} mismatches, worst {err.max():.3g} at {a[bad[:3]]} vs {n[bad[:3]]}"


def tiny_config(seed=0):
    """A pipeline config small enough to run end to end in a few seconds."""
    from retrocast.pipeline import PipelineConfig

    c = PipelineConfig().to_dict()
    for d in c["data"]["domains"]:
        d["length"] = 400
        d["n_series"] = 6 if d["name"] == "C" else 4
        if d["families"]:
            d["families"] = 2
    c["seed"] = seed
    c["holdout"]["count"] = 2
    c["backbone"].update(sl=32, fl=8, patch_len=8, d=4, epochs=2, stride=13)
    c["kb"]["per_domain_quota"] = 12
    c["pairs"].update(n_train=30, train_stride=17, test_stride=23)
    c["train"].update(k=4, retrieval_dim=8, epochs=2, seed=seed)
    return PipelineConfig.from_dict(c)


# criterion number -> one-line verdict, printed by the terminal summary hook
ACCEPTANCE = {}
