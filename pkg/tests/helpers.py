"""Shared test utilities: finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from dfmnet.tensor import DTYPE, Tensor, mul, no_grad, tsum

RTOL = 1e-3
ATOL = 1e-5


def _projection(fn, tensors, r):
    with no_grad():
        out = fn(*tensors)
    return float(np.sum(out.data.astype(np.float64) * r))


def _central(fn, tensors, r64, flat, k, h):
    x0 = flat[k]
    xp, xm = DTYPE(x0 + h), DTYPE(x0 - h)
    flat[k] = xp
    lp = _projection(fn, tensors, r64)
    flat[k] = xm
    lm = _projection(fn, tensors, r64)
    flat[k] = x0
    return (lp - lm) / (float(xp) - float(xm))


def gradient_errors(fn, inputs, h=1e-2, seed=0, wrt=None, richardson=False):
    """Analytic and central-difference gradients of ``sum(r * fn(*inputs))``.

    ``r`` is a fixed random projection.  Each perturbation divides by the
    step actually realized in float32.  With ``richardson`` the steps h and
    h/2 are combined to cancel the h^2 error term, which permits steps large
    enough to swamp float32 rounding in ops whose every output moves.
    Returns a list of (analytic, numeric) pairs, one per checked input.
    """
    rng = np.random.default_rng(seed + 7919)
    wrt = range(len(inputs)) if wrt is None else wrt
    tensors = [Tensor(np.array(a, DTYPE), requires_grad=(i in wrt)) for i, a in enumerate(inputs)]
    out = fn(*tensors)
    r = rng.standard_normal(out.shape).astype(DTYPE)
    tsum(mul(out, Tensor(r))).backward()
    r64 = r.astype(np.float64)
    pairs = []
    for i in wrt:
        t = tensors[i]
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        numeric = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            d = _central(fn, tensors, r64, flat, k, h)
            if richardson:
                d = (4.0 * _central(fn, tensors, r64, flat, k, h / 2) - d) / 3.0
            numeric.reshape(-1)[k] = d
        pairs.append((analytic, numeric))
    return pairs


def assert_gradients(fn, inputs, h=1e-2, seed=0, wrt=None, rtol=RTOL, atol=ATOL, richardson=False):
    for i, (a, n) in enumerate(gradient_errors(fn, inputs, h, seed, wrt, richardson)):
        bad = ~np.isclose(a, n, rtol=rtol, atol=atol)
        if bad.any():
            k = np.argmax(np.abs(a - n) - rtol * np.abs(n))
            raise AssertionError(
                f"input {i}: {bad.sum()} of {a.size} entries disagree; worst analytic "
                f"{a.reshape(-1)[k]:.6g} vs numeric {n.reshape(-1)[k]:.6g} (seed {seed})"
            )


def away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Shift entries within ``margin`` of any kink in ``points`` out of the way."""
    x = x.copy()
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.where(x[near] >= p, margin, -margin) * 2
    return x


# -- acceptance reporting -------------------------------------------------------

RESULTS: list[str] = []


class criterion:
    """Record one PASS/FAIL line for an acceptance criterion; failures still raise."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        extra = "; ".join(self.details)
        if exc_type is not None:
            extra = f"{extra}; {exc_type.__name__}: {exc}".lstrip("; ")
        line = f"[{status}] criterion {self.number:>2}: {self.title}" + (f" ({extra})" if extra else "")
        RESULTS.append(line)
        print(line)
        return False
