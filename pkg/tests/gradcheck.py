"""Central finite-difference gradient checks for float64 models."""

import numpy as np
import torch

from structsyn.networks import init_params


def fd_check(model, x, n_params=50, seed=0, h=1e-6, reseed=None, floor=1e-5):
    """Compare autograd and central-difference gradients of a random projection of the output.

    Returns the list of relative errors for ``n_params`` sampled scalar parameters.
    The denominator is floored at ``floor``: central differences at h=1e-6 carry
    about 1e-9 of float64 round-off, so structurally zero gradients (a conv bias
    feeding batch norm) would otherwise report large relative errors.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        if reseed is not None:
            torch.manual_seed(reseed)
        proj = torch.randn(model(x).shape, generator=g, dtype=torch.float64)

    def objective():
        if reseed is not None:
            torch.manual_seed(reseed)
        return (model(x) * proj).sum()

    model.zero_grad()
    objective().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(sizes.sum(), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors = []
    for fi in flat_idx:
        k = int(np.searchsorted(offsets, fi, side="right") - 1)
        p, j = params[k], int(fi - offsets[k])
        analytic = p.grad.reshape(-1)[j].item()
        with torch.no_grad():
            flat = p.view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            up = objective().item()
            flat[j] = orig - h
            down = objective().item()
            flat[j] = orig
        numeric = (up - down) / (2 * h)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return errors


def model64(cls, seed, **kw):
    m = cls(**kw).double()
    # the small default init makes many gradients vanish; a wider init exercises every path
    init_params(m, seed, std=0.2)
    return m


