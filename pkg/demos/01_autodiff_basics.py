"""A short tour of the tape-based autodiff engine.

Builds a few small expressions, takes gradients (including a gradient of a
gradient), and cross-checks everything against finite differences.
"""

import numpy as np

from hkdistill import autodiff as ad
from hkdistill.autodiff import Tape, Tensor


def main():
    # --- first derivatives ---------------------------------------------
    with Tape():
        x = ad.leaf(2.0)
        f = ad.mul(ad.mul(x, x), x)          # f(x) = x^3
        (g,) = ad.grad(f, [x])
    print(f"f(x) = x^3 at x=2:  f = {float(f.data):g},  f' = {float(g.data):g}")

    # --- second derivatives (gradient of a gradient) --------------------
    with Tape():
        x = ad.leaf(2.0)
        f = ad.mul(ad.mul(x, x), x)
        (g,) = ad.grad(f, [x], create_graph=True)
        (h,) = ad.grad(g, [x])
    print(f"f'' = {float(h.data):g}  (expected 6x = 12)")

    # --- a small neural expression, checked against finite differences --
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal((4, 3))
    x0 = rng.standard_normal((5, 4))

    def network(params):
        (w,) = params
        return ad.reduce_mean(ad.square(ad.softmax(ad.matmul(Tensor(x0), w))))

    err = ad.finite_diff_check(network, [w0])
    print(f"softmax network gradient vs finite differences: rel err {err:.2e}")

    # gradients of a softmax sum vanish (the rows always sum to one)
    with Tape():
        z = ad.leaf(np.array([0.3, -1.0, 2.0]))
        (g,) = ad.grad(ad.reduce_sum(ad.softmax(z)), [z])
    print(f"grad of sum(softmax(z)) has max |entry| {np.abs(g.data).max():.1e}")


if __name__ == "__main__":
    main()
