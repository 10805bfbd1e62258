"""Central finite differences against autograd for selected scalar entries."""

import numpy as np
import torch


def fd_vs_autograd(fn, tensors, n_samples, rng, step=1e-4):
    """Compare d fn / d t[i] by autograd and by central differences.

    ``tensors`` are float64 leaf tensors; ``n_samples`` entries are drawn
    uniformly across all of them.  Returns (max relative error, list of
    (analytic, numeric) pairs).
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    grads = [t.grad.detach().clone().reshape(-1) for t in tensors]
    sizes = np.array([t.numel() for t in tensors])
    flat = rng.choice(sizes.sum(), size=min(n_samples, sizes.sum()), replace=False)
    offsets = np.cumsum(sizes) - sizes
    pairs = []
    with torch.no_grad():
        for k in flat:
            which = int(np.searchsorted(offsets, k, side="right") - 1)
            idx = int(k - offsets[which])
            view = tensors[which].view(-1)
            orig = view[idx].item()
            view[idx] = orig + step
            plus = fn().item()
            view[idx] = orig - step
            minus = fn().item()
            view[idx] = orig
            pairs.append((grads[which][idx].item(), (plus - minus) / (2 * step)))
    rel = [abs(a - n) / max(abs(a), abs(n), 1e-12) for a, n in pairs]
    return max(rel), pairs
