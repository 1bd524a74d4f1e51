"""ADAM, the step learning-rate schedule and kernel orthogonalization."""

from dataclasses import dataclass, field
import logging

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected ADAM update, applied to ``params`` in place.

    ``params`` and ``grads`` are dicts of arrays keyed by parameter name;
    parameters without a gradient entry are left alone.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for name in sorted(grads):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter {name!r} of shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params


def lr_for_epoch(schedule, epoch):
    """Piecewise-constant lookup in ``[(start_epoch, rate), ...]``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    rate = schedule[0][1]
    for start, r in schedule:
        if epoch >= start:
            rate = r
        else:
            break
    return rate


def orthogonalize_matrix(mat):
    """Replace the singular values of ``mat`` by one (``U @ V^T``).

    Returns ``(result, ok)``; rank-deficient input comes back unchanged with
    ``ok`` false.
    """
    work = mat.astype(np.float64)
    u, s, vt = np.linalg.svd(work, full_matrices=False)
    tol = (s[0] if s.size else 0.0) * max(mat.shape) * np.finfo(mat.dtype).eps
    if s.size == 0 or s[0] == 0.0 or s[-1] <= tol:
        return mat, False
    return (u @ vt).astype(mat.dtype), True


def orthogonalize_kernels(weights):
    """Orthogonalize every convolution kernel of ``weights`` in place.

    Each kernel group is viewed as an ``(out, in * 9)`` matrix. Biases and
    batch-norm tensors are not touched. Returns the number of degenerate
    kernels that were skipped.
    """
    skipped = 0
    for name, groups in weights.conv_kernels():
        kernel = weights.tensors[name]
        og, cg = kernel.shape[0] // groups, kernel.shape[1]
        for g in range(groups):
            block = kernel[g * og:(g + 1) * og]
            mat, ok = orthogonalize_matrix(block.reshape(og, cg * 9))
            if not ok:
                skipped += 1
                log.debug("orthogonalization skipped degenerate kernel %s[%d]", name, g)
                continue
            block[...] = mat.reshape(block.shape)
    return skipped
