"""Shared test utilities: finite-difference gradient comparison."""

import torch


def finite_difference_grad(fn, tensor, eps=1e-6):
    """Central-difference gradient of scalar fn w.r.t. tensor, elementwise."""
    assert tensor.is_contiguous()  # reshape must alias, not copy
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_grad_error(analytic, numeric, atol=1e-8):
    na = analytic.norm().item()
    nb = numeric.norm().item()
    if max(na, nb) <= atol:
        # both gradients vanish (e.g. a conv bias cancelled by normalization);
        # the ratio would only compare rounding noise
        return 0.0
    return (analytic - numeric).norm().item() / max(na, nb, 1e-12)


def check_gradients(make_scalar, tensors, tol, eps=1e-6):
    """Compare autograd gradients of make_scalar() against central differences.

    tensors: dict name -> float64 tensor with requires_grad=True. Returns the
    worst relative error observed; asserts every tensor is within tol.
    """
    out = make_scalar()
    grads = torch.autograd.grad(out, list(tensors.values()), allow_unused=False)
    worst = 0.0
    for (name, t), g in zip(tensors.items(), grads):
        with torch.no_grad():
            fd = finite_difference_grad(lambda: make_scalar().detach(), t.data, eps=eps)
        err = relative_grad_error(g, fd)
        worst = max(worst, err)
        assert err <= tol, f"gradient mismatch for {name}: rel err {err:.3e} > {tol:.0e}"
    return worst
