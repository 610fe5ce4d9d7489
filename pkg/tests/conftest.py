"""Shared test helpers: finite-difference gradient checking and a dense
attention oracle, both independent of the implementation paths they verify."""

import math

import numpy as np
import pytest
import torch


def finite_difference_max_rel_error(fn, tensors, n_samples=200, h=1e-6, seed=0, floor=1e-4):
    """Max relative error between autodiff and central differences.

    ``fn`` is a deterministic scalar-valued closure over ``tensors`` (float64
    leaves with requires_grad).  Coordinates are sampled uniformly over the
    concatenated parameter/input space.  The denominator floor sits above the
    central-difference roundoff scale (~|f| * 1e-10 at h=1e-6) so exactly-zero
    gradients compared against pure FD noise do not blow up the ratio.
    """
    for t in tensors:
        assert t.dtype == torch.float64
        if t.grad is not None:
            t.grad = None
    out = fn()
    out.backward()

    sizes = np.array([t.numel() for t in tensors])
    cum = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, cum[-1], size=n_samples)
    max_rel = 0.0
    for pick in picks:
        ti = int(np.searchsorted(cum, pick, side="right"))
        offset = int(pick - (cum[ti - 1] if ti else 0))
        t = tensors[ti]
        flat = t.detach().reshape(-1)
        orig = flat[offset].item()
        with torch.no_grad():
            flat[offset] = orig + h
            f_plus = fn().item()
            flat[offset] = orig - h
            f_minus = fn().item()
            flat[offset] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        ad = t.grad.reshape(-1)[offset].item()
        rel = abs(fd - ad) / max(abs(fd), abs(ad), floor)
        max_rel = max(max_rel, rel)
    return max_rel


def dense_attention_oracle(q, k, v, heads, mask=None):
    """Naive O(n^2) per-window per-head attention in float64 numpy.

    q, k, v: (windows, n, dim) arrays already projected; mask: (n_mask, n, n)
    additive logits tiled over windows, or None.
    """
    b, n, dim = q.shape
    head_dim = dim // heads
    out = np.zeros((b, n, dim))
    for w in range(b):
        for hd in range(heads):
            sl = slice(hd * head_dim, (hd + 1) * head_dim)
            qs, ks, vs = q[w, :, sl], k[w, :, sl], v[w, :, sl]
            for i in range(n):
                logits = np.empty(n)
                for j in range(n):
                    logits[j] = float(qs[i] @ ks[j]) / math.sqrt(head_dim)
                if mask is not None:
                    logits = logits + mask[w % mask.shape[0], i]
                logits -= logits.max()
                weights = np.exp(logits)
                weights /= weights.sum()
                out[w, i, sl] = weights @ vs
    return out


def linear_np(x, weight, bias):
    return x @ weight.T + bias


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
