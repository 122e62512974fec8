"""Selective state-space scan: ZOH discretization, input-conditioned step
parameters, and the sequence recurrence in recurrent and kernel forms.

The recurrent path is the only autodiff path. A whole scan is one fused tape
node: the forward stores the state history, the backward replays the
recurrence in reverse with hand-derived gradients (validated against the
finite-difference oracle in the tests). The kernel form exists as an
equivalence oracle for the time-invariant case and is not differentiable.

State transition matrix A is diagonal per (channel, state) pair and stored as
log(-A), which keeps A strictly negative and the recurrence contractive for
any positive step size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from igmamba import tensor as T
from igmamba.tensor import ContractError, ShapeError, Tensor


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inv_softplus(y):
    """Inverse of softplus, i.e. log(exp(y) - 1); y must be positive."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ContractError("inv_softplus needs positive inputs")
    return np.log(np.expm1(y))


# -- parameter containers ----------------------------------------------------


@dataclass
class SsmParams:
    """Learnable parameters of one selective scan over D channels, N states.

    ``a_log`` stores log(-A) per (channel, state). ``dt_w``/``dt_b`` project a
    token to the pre-softplus step sizes; ``b_w``/``c_w`` project it to the
    per-step input/output mixing vectors (bias-free). ``d_skip`` is the
    per-channel residual coefficient.
    """

    a_log: Tensor  # [D, N]
    dt_w: Tensor  # [D, D]
    dt_b: Tensor  # [D]
    b_w: Tensor  # [D, N]
    c_w: Tensor  # [D, N]
    d_skip: Tensor  # [D]

    @property
    def channels(self):
        return self.a_log.shape[0]

    @property
    def states(self):
        return self.a_log.shape[1]

    def fields(self):
        return [
            ("a_log", self.a_log),
            ("dt_w", self.dt_w),
            ("dt_b", self.dt_b),
            ("b_w", self.b_w),
            ("c_w", self.c_w),
            ("d_skip", self.d_skip),
        ]


def init_ssm_params(channels, states, rng, dtype=np.float32):
    """Standard selective-scan init.

    -A_n = n+1 per state (real diagonal ramp); dt bias chosen so
    softplus(dt_b) is uniform in [1e-3, 1e-1]; projection weights uniform in
    +-1/sqrt(D); skip coefficients start at 1.
    """
    d, n = int(channels), int(states)
    bound = 1.0 / np.sqrt(d)
    a_log = np.broadcast_to(np.log(np.arange(1, n + 1, dtype=np.float64)), (d, n)).copy()
    dt_target = rng.uniform(1e-3, 1e-1, size=d)
    return SsmParams(
        a_log=Tensor(a_log.astype(dtype), requires_grad=True),
        dt_w=Tensor(rng.uniform(-bound, bound, size=(d, d)).astype(dtype), requires_grad=True),
        dt_b=Tensor(inv_softplus(dt_target).astype(dtype), requires_grad=True),
        b_w=Tensor(rng.uniform(-bound, bound, size=(d, n)).astype(dtype), requires_grad=True),
        c_w=Tensor(rng.uniform(-bound, bound, size=(d, n)).astype(dtype), requires_grad=True),
        d_skip=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
    )


@dataclass
class FrozenScanParams:
    """Time-invariant scan parameters given directly (no input conditioning).

    ``b``, ``c`` may be [N] (constant) or [L, N] (per step); ``delta`` may be
    [D] or [L, D]. The kernel form accepts only the constant shapes.
    """

    a: np.ndarray  # [D, N], the true (negative) A
    b: np.ndarray
    c: np.ndarray
    delta: np.ndarray
    d_skip: np.ndarray  # [D]


# -- discretization ----------------------------------------------------------


def discretize(a, b_t, delta_t):
    """ZOH step: Abar = exp(delta (x) A), Bbar = delta (x) B.

    The B path uses the simplified first-order form delta*B, not the exact
    integral (exp(delta A) - 1)/A * B; the two coincide as delta -> 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b_t = np.asarray(b_t, dtype=np.float64)
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if a.ndim != 2 or b_t.ndim != 1 or delta_t.ndim != 1 or a.shape != (delta_t.size, b_t.size):
        raise ShapeError(
            f"discretize: A {a.shape} must be [D,N] with delta [D]={delta_t.shape}, B [N]={b_t.shape}"
        )
    if np.any(delta_t <= 0):
        raise ContractError("discretize needs delta > 0 elementwise")
    abar = np.exp(delta_t[:, None] * a)
    bbar = delta_t[:, None] * b_t[None, :]
    return abar, bbar


# -- fused selective scan (autodiff) ----------------------------------------


def scan_stacked(x, a_log, dt_w, dt_b, b_w, c_w, d_skip):
    """Fused selective scan over stacked groups.

    ``x`` is [batch, groups, L, D]; every parameter carries a leading groups
    axis. Each (batch, group) runs an independent recurrence with zero initial
    state; only the time loop is sequential.
    """
    if x.ndim != 4:
        raise ShapeError(f"scan_stacked: x must be [batch, groups, L, D], got {x.shape}")
    nb, ng, length, d = x.shape
    n = a_log.shape[-1]
    if a_log.shape != (ng, d, n) or dt_w.shape != (ng, d, d) or dt_b.shape != (ng, d):
        raise ShapeError(
            f"scan_stacked: parameter shapes {a_log.shape}/{dt_w.shape}/{dt_b.shape} "
            f"do not match x {x.shape}"
        )
    if b_w.shape != (ng, d, n) or c_w.shape != (ng, d, n) or d_skip.shape != (ng, d):
        raise ShapeError("scan_stacked: B/C/D_skip shapes do not match x")

    xd = x.data
    a_neg = -np.exp(a_log.data)  # [G,D,N], strictly negative
    dt_pre = np.einsum("bgld,gde->bgle", xd, dt_w.data) + dt_b.data[None, :, None, :]
    dt = np.logaddexp(0.0, dt_pre)  # softplus keeps every step positive
    bm = np.einsum("bgld,gdn->bgln", xd, b_w.data)
    cm = np.einsum("bgld,gdn->bgln", xd, c_w.data)

    # every per-step factor precomputed; the loop only carries the state
    das = np.exp(dt[..., None] * a_neg[None, :, None])  # [B,G,L,D,N]
    drive = (dt * xd)[..., None] * bm[:, :, :, None, :]
    hs = np.empty_like(das)
    h = np.zeros((nb, ng, d, n), dtype=das.dtype)
    for t in range(length):
        h = das[:, :, t] * h + drive[:, :, t]
        hs[:, :, t] = h
    y = np.einsum("bgldn,bgln->bgld", hs, cm) + d_skip.data[None, :, None, :] * xd

    def backward_fn(g):
        g_dskip = np.einsum("bgld,bgld->gd", g, xd)
        gc_seq = np.einsum("bgld,bgldn->bgln", g, hs)
        # reverse recurrence for dL/dh_t; reductions happen after the loop
        inject = g[..., None] * cm[:, :, :, None, :]
        ghs = np.empty_like(das)
        gh = inject[:, :, length - 1]
        ghs[:, :, length - 1] = gh
        for t in range(length - 2, -1, -1):
            gh = gh * das[:, :, t + 1] + inject[:, :, t]
            ghs[:, :, t] = gh
        gda = ghs[:, :, 1:] * hs[:, :, :-1] * das[:, :, 1:]
        ga = np.einsum("bgtdn,bgtd->gdn", gda, dt[:, :, 1:])
        g_dt = np.zeros_like(dt)
        g_dt[:, :, 1:] = (gda * a_neg[None, :, None]).sum(-1)
        s_all = np.einsum("bgldn,bgln->bgld", ghs, bm)
        g_dt += s_all * xd
        gb_seq = np.einsum("bgldn,bgld->bgln", ghs, dt * xd)
        gx = g * d_skip.data[None, :, None, :] + s_all * dt
        g_dt_pre = g_dt * _sigmoid_np(dt_pre)
        gx += np.einsum("bgle,gde->bgld", g_dt_pre, dt_w.data)
        gx += np.einsum("bgln,gdn->bgld", gb_seq, b_w.data)
        gx += np.einsum("bgln,gdn->bgld", gc_seq, c_w.data)
        T.accumulate(x, gx)
        T.accumulate(a_log, ga * a_neg)  # dA/d a_log = -exp(a_log) = A
        T.accumulate(dt_w, np.einsum("bgld,bgle->gde", xd, g_dt_pre))
        T.accumulate(dt_b, g_dt_pre.sum((0, 2)))
        T.accumulate(b_w, np.einsum("bgld,bgln->gdn", xd, gb_seq))
        T.accumulate(c_w, np.einsum("bgld,bgln->gdn", xd, gc_seq))
        T.accumulate(d_skip, g_dskip)

    return T.make_node(y, (x, a_log, dt_w, dt_b, b_w, c_w, d_skip), backward_fn, "scan")


def selective_scan_recurrent(x, params):
    """Selective scan of ``x`` ([L, D] or [batch, L, D]) with one parameter set."""
    if x.ndim == 2:
        return selective_scan_recurrent(T.reshape(x, (1,) + x.shape), params).reshape(x.shape)
    if x.ndim != 3:
        raise ShapeError(f"selective_scan_recurrent: x must be [L,D] or [batch,L,D], got {x.shape}")
    d, n = params.channels, params.states
    if x.shape[-1] != d:
        raise ShapeError(f"selective_scan_recurrent: x channels {x.shape[-1]} != params D={d}")
    nb, length, _ = x.shape
    y = scan_stacked(
        T.reshape(x, (nb, 1, length, d)),
        T.reshape(params.a_log, (1, d, n)),
        T.reshape(params.dt_w, (1, d, d)),
        T.reshape(params.dt_b, (1, d)),
        T.reshape(params.b_w, (1, d, n)),
        T.reshape(params.c_w, (1, d, n)),
        T.reshape(params.d_skip, (1, d)),
    )
    return T.reshape(y, (nb, length, d))


# -- time-invariant oracles --------------------------------------------------


def _per_step(arr, t):
    return arr[t] if arr.ndim == 2 else arr


def scan_frozen(x, frozen, return_state_history=False):
    """Reference recurrence with directly-given parameters (numpy, no tape)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"scan_frozen: x must be [L,D], got {x.shape}")
    length, d = x.shape
    a = np.asarray(frozen.a, dtype=np.float64)
    n = a.shape[1]
    h = np.zeros((d, n))
    y = np.empty_like(x)
    history = np.empty((length, d, n)) if return_state_history else None
    for t in range(length):
        delta = _per_step(np.asarray(frozen.delta, dtype=np.float64), t)
        b_t = _per_step(np.asarray(frozen.b, dtype=np.float64), t)
        c_t = _per_step(np.asarray(frozen.c, dtype=np.float64), t)
        abar, bbar = discretize(a, b_t, delta)
        h = abar * h + bbar * x[t][:, None]
        if return_state_history:
            history[t] = h
        y[t] = h @ c_t + np.asarray(frozen.d_skip, dtype=np.float64) * x[t]
    return (y, history) if return_state_history else y


def kernel_convolve(x, frozen):
    """Causal convolution with the closed-form kernel K = (CB, CAB, ..., CA^{L-1}B).

    Only valid for time-invariant parameters; the selective (per-step) case
    has no fixed kernel and is rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"kernel_convolve: x must be [L,D], got {x.shape}")
    b = np.asarray(frozen.b, dtype=np.float64)
    c = np.asarray(frozen.c, dtype=np.float64)
    delta = np.asarray(frozen.delta, dtype=np.float64)
    if b.ndim != 1 or c.ndim != 1 or delta.ndim != 1:
        raise ContractError("kernel_convolve: parameters are time-varying; use the recurrent form")
    length = x.shape[0]
    abar, bbar = discretize(frozen.a, b, delta)
    kernel = np.empty((length, x.shape[1]))
    tap = bbar.copy()  # tap_l = abar^l * bbar
    for lag in range(length):
        kernel[lag] = tap @ c
        tap = tap * abar
    y = np.zeros_like(x)
    for lag in range(length):
        y[lag:] += kernel[lag][None, :] * x[: length - lag]
    return y + np.asarray(frozen.d_skip, dtype=np.float64)[None, :] * x
