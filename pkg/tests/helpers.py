"""Central finite-difference oracle shared by the gradient tests."""
import torch

# filled by the acceptance tests, echoed in the terminal summary
ACCEPTANCE_LINES = []


def numeric_grad(fn, x, h=1e-6):
    """d fn / d x by central differences; ``fn`` maps a tensor to a scalar tensor."""
    x = x.detach().clone(memory_format=torch.contiguous_format)
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        hi = fn(x).item()
        flat[i] = orig - h
        lo = fn(x).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def analytic_grad(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(a, b):
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def grad_rel_error(fn, x, h=1e-6):
    return relative_error(analytic_grad(fn, x), numeric_grad(fn, x, h))
