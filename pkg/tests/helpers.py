import itertools
import math

import numpy as np
import torch


def central_diff_grad(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``fn`` at ``x`` (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def jaccard_loss_bruteforce(pred, target, cls) -> float:
    """1 - |P ∩ T| / |P ∪ T| for one class of two hard label lists."""
    p = [v == cls for v in pred]
    t = [v == cls for v in target]
    inter = sum(a and b for a, b in zip(p, t))
    union = sum(a or b for a, b in zip(p, t))
    return 1.0 - inter / union


def all_masks(n: int):
    return itertools.product((0, 1), repeat=n)


def one_hot_probs(labels, shape, n_classes=2, dtype=torch.float64) -> torch.Tensor:
    lab = torch.as_tensor(np.asarray(labels).reshape(shape))
    return torch.nn.functional.one_hot(lab.long(), n_classes).permute(0, 3, 1, 2).to(dtype)


def kl_direct(p, q) -> float:
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)
