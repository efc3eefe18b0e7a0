import numpy as np

from pcnode import tensor as T


def numeric_grad(f, arrays, i, h=1e-6):
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f(*arrays)
        x[idx] = old - h
        down = f(*arrays)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn, arrays, h=1e-6):
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps Tensors to a scalar Tensor; ``arrays`` are perturbed in place.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    params = [T.parameter(a) for a in arrays]
    fn(*params).backward()
    analytic = [p.grad for p in params]

    def value(*xs):
        with T.no_grad():
            return fn(*[T.Tensor(x) for x in xs]).item()

    return max(rel_err(analytic[i], numeric_grad(value, arrays, i, h)) for i in range(len(arrays)))


def module_gradcheck(module, loss_fn, h=1e-6):
    """Same check against every parameter of a module; ``loss_fn()`` rebuilds the scalar loss."""
    module.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in module.parameters():
        analytic = p.grad.copy()

        def value(_):
            with T.no_grad():
                return loss_fn().item()

        worst = max(worst, rel_err(analytic, numeric_grad(value, [p.data], 0, h)))
    return worst
