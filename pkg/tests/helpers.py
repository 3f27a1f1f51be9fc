import torch


def finite_difference_check(loss_fn, params, eps=1e-6, coords=6, seed=0, nonzero_only=False):
    """Max relative error between autograd and central differences.

    Checks ``coords`` random coordinates per parameter tensor; all tensors
    should be float64. ``nonzero_only`` samples among coordinates with a
    nonzero analytic gradient (e.g. embedding rows the batch actually uses).
    """
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        pool = (g.view(-1) != 0).nonzero().flatten() if nonzero_only else torch.arange(flat.numel())
        for idx in pool[torch.randint(0, len(pool), (coords,), generator=gen)].tolist():
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = g.view(-1)[idx].item()
            scale = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst
