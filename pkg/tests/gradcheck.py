"""Central finite-difference gradient checking for small float64 instances."""
import torch

EPS = 1e-4
TOL = 1e-3


def numeric_grad(fn, tensors, eps=EPS):
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat, gflat = t.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = fn().item()
            flat[i] = orig - eps
            minus = fn().item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grad(fn, tensors):
    for t in tensors:
        t.grad = None
    fn().backward()
    return [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]


def max_relative_error(fn, tensors, eps=EPS):
    """Largest elementwise |a - n| / max(|a|, |n|, 1e-6) over all entries."""
    assert sum(t.numel() for t in tensors) <= 100, "gradient checks run on <= 100 parameters"
    a = analytic_grad(fn, tensors)
    n = numeric_grad(fn, tensors, eps)
    worst = 0.0
    for x, y in zip(a, n):
        denom = torch.maximum(torch.maximum(x.abs(), y.abs()), torch.full_like(x, 1e-6))
        worst = max(worst, float(((x - y).abs() / denom).max()))
    return worst
