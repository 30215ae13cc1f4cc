import numpy as np
import pytest
import torch

from rtatl.config import AUSpec, HyperParams, RoIRule, load_config
from rtatl.data.synth import synth_dataset


@pytest.fixture(scope="session")
def synth_cfg():
    return load_config("synthetic.cfg")


@pytest.fixture(scope="session")
def bp4d_cfg():
    return load_config("bp4d.cfg")


@pytest.fixture(scope="session")
def synth_samples(synth_cfg):
    spec, hp = synth_cfg
    return synth_dataset(0, 2, 4, spec, size=hp.aligned_size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_spec(n: int = 3, patch: int = 8) -> AUSpec:
    """Three mirrored AUs around the eyes / mouth corners of a dlib68 layout."""
    rules = [
        (RoIRule(19, 0.0, -0.5), RoIRule(24, 0.0, -0.5)),
        (RoIRule(36, 0.0, 1.0), RoIRule(45, 0.0, 1.0)),
        (RoIRule(48, 0.0, 0.0), RoIRule(54, 0.0, 0.0)),
    ][:n]
    return AUSpec("synthetic", tuple(range(1, n + 1)), tuple(rules), patch_size=patch)


def finite_difference_check(loss_fn, tensors, n_coords: int = 24, h: float = 1e-6, seed: int = 0):
    """Max relative error between autograd and central differences.

    ``tensors`` are float64 leaves with ``requires_grad``; a random subset of
    ``n_coords`` coordinates across them is probed.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.detach().clone() for t in tensors]
    gen = torch.Generator().manual_seed(seed)
    picks = []
    for k, t in enumerate(tensors):
        count = max(1, n_coords // len(tensors))
        idx = torch.randint(t.numel(), (min(count, t.numel()),), generator=gen)
        picks += [(k, int(i)) for i in idx.unique()]
    a_vals, n_vals = [], []
    with torch.no_grad():
        for k, i in picks:
            flat = tensors[k].view(-1)
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(loss_fn())
            flat[i] = orig - h
            down = float(loss_fn())
            flat[i] = orig
            n_vals.append((up - down) / (2 * h))
            a_vals.append(float(analytic[k].view(-1)[i]))
    a, n = np.array(a_vals), np.array(n_vals)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)
