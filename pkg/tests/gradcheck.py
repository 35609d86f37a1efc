"""Central finite differences, independent of autograd.

``loss_fn`` must be a pure function of the model's current parameter
values returning a float; parameters are perturbed in place and restored.
"""

import numpy as np
import torch

H = 1e-5


@torch.no_grad()
def fd_gradient(model, loss_fn, name, coords, h=H):
    p = dict(model.named_parameters())[name]
    flat = p.view(-1)
    out = []
    for i in coords:
        orig = flat[i].item()
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        out.append((up - down) / (2 * h))
    return np.array(out)


def relative_error(analytic, numeric, floor=1e-10):
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:  # both (numerically) zero: unreachable parameter
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_all(model, loss_fn, grads, per_tensor=None, seed=0):
    """Relative error per parameter tensor.

    Every coordinate is checked unless ``per_tensor`` caps it, in which case
    a random sample plus the largest-gradient coordinate is used.
    """
    rs = np.random.default_rng(seed)
    errors = {}
    for name, p in model.named_parameters():
        g = grads[name].reshape(-1).numpy()
        if per_tensor is None or per_tensor >= p.numel():
            coords = np.arange(p.numel())
        else:
            coords = rs.choice(p.numel(), size=per_tensor, replace=False)
            coords = np.unique(np.append(coords, int(np.abs(g).argmax())))
        errors[name] = relative_error(g[coords], fd_gradient(model, loss_fn, name, coords))
    return errors
