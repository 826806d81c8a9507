import numpy as np
import pytest

from sqakd.oracles import grad_oracle, relative_error
from sqakd.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def check_gradients(fn, arrays, tol=1e-5, h=1e-5):
    """Compare analytic gradients of ``fn(*tensors) -> scalar Tensor`` against
    the central finite-difference oracle at 64-bit precision."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    loss = fn(*tensors)
    loss.backward()

    for i in range(len(arrays)):

        def f(x, i=i):
            args = [Tensor(arrays[j].copy(), dtype=np.float64) for j in range(len(arrays))]
            args[i] = Tensor(np.asarray(x, dtype=np.float64).copy(), dtype=np.float64)
            return float(fn(*args).data)

        numeric = grad_oracle(f, arrays[i], h=h)
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        err = relative_error(analytic, numeric)
        assert err <= tol, f"gradient mismatch on input {i}: rel err {err:.3g} > {tol}"
