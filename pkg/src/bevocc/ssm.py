"""Selective state-space (S6) layer: input-dependent parameters, zero-order-hold
discretization and the diagonal linear recurrence

    h_t = A_bar_t * h_{t-1} + B_bar_t * x_t,     y_t = sum_n C_t[n] h_t[:, n]

Time is axis -3 of every ``[..., L, d_inner, n_state]`` array.  Leading
axes are free batch axes (the 2D scanner stacks scan directions there).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, ops, parameter, record
from .autodiff.ops import unbroadcast
from .errors import DomainError, NumericsError, ShapeError
from .nn import Module


class SsmParams(Module):
    """Parameters of one S6 layer, optionally stacked along leading axes.

    ``A`` is stored through ``A_log`` (``A = -exp(A_log)``) so the decay
    stays strictly negative while training.  ``dt_bias`` is the system
    parameter added inside the softplus.  ``dt_down @ dt_up`` is the
    (rank-reduced) Δ projection.
    """

    def __init__(self, A_log, dt_bias, w_B, w_C, dt_down, dt_up, D, b_B=None, b_C=None, use_d_skip=True):
        self.A_log = parameter(A_log)
        self.dt_bias = parameter(dt_bias)
        self.w_B = parameter(w_B)
        self.w_C = parameter(w_C)
        self.b_B = parameter(np.zeros(self.w_B.shape[:-2] + self.w_B.shape[-1:]) if b_B is None else b_B)
        self.b_C = parameter(np.zeros(self.w_C.shape[:-2] + self.w_C.shape[-1:]) if b_C is None else b_C)
        self.dt_down = parameter(dt_down)
        self.dt_up = parameter(dt_up)
        self.D = parameter(D)
        self.use_d_skip = use_d_skip
        d, n = self.A_log.shape[-2:]
        for name, p, tail in [
            ("dt_bias", self.dt_bias, (d,)),
            ("w_B", self.w_B, (d, n)),
            ("w_C", self.w_C, (d, n)),
            ("dt_down", self.dt_down, (d, self.dt_down.shape[-1])),
            ("dt_up", self.dt_up, (self.dt_down.shape[-1], d)),
            ("D", self.D, (d,)),
        ]:
            if p.shape[-len(tail):] != tail:
                raise ShapeError(f"{name} has shape {p.shape}, expected trailing {tail}")

    @property
    def A(self) -> Tensor:
        return ops.neg(ops.exp(self.A_log))

    @property
    def d_inner(self) -> int:
        return self.A_log.shape[-2]

    @property
    def n_state(self) -> int:
        return self.A_log.shape[-1]

    @classmethod
    def init(
        cls,
        d_inner: int,
        n_state: int,
        rng: np.random.Generator,
        dt_rank: int | None = 1,
        stack: tuple[int, ...] = (),
        use_d_skip: bool = True,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ) -> "SsmParams":
        """Standard initialization; ``dt_rank=None`` gives a full-rank Δ projection."""
        r = d_inner if dt_rank is None else dt_rank
        A_log = np.broadcast_to(np.log(np.arange(1, n_state + 1, dtype=np.float64)), stack + (d_inner, n_state))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=stack + (d_inner,)))
        dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus
        scale = 1.0 / math.sqrt(d_inner)
        return cls(
            A_log=A_log.copy(),
            dt_bias=dt_bias,
            w_B=rng.normal(0.0, scale, size=stack + (d_inner, n_state)),
            w_C=rng.normal(0.0, scale, size=stack + (d_inner, n_state)),
            dt_down=rng.normal(0.0, scale, size=stack + (d_inner, r)),
            dt_up=rng.normal(0.0, 1.0 / math.sqrt(r), size=stack + (r, d_inner)) * 0.1,
            D=np.ones(stack + (d_inner,)),
            use_d_skip=use_d_skip,
        )

    @classmethod
    def zeros(cls, d_inner, n_state, dt_rank=1, stack=(), use_d_skip=False) -> "SsmParams":
        """All projections and W_Δ zero, ``A = -(1..n_state)``; readout is identically 0."""
        A_log = np.broadcast_to(np.log(np.arange(1, n_state + 1, dtype=np.float64)), stack + (d_inner, n_state))
        return cls(
            A_log=A_log.copy(),
            dt_bias=np.zeros(stack + (d_inner,)),
            w_B=np.zeros(stack + (d_inner, n_state)),
            w_C=np.zeros(stack + (d_inner, n_state)),
            dt_down=np.zeros(stack + (d_inner, dt_rank)),
            dt_up=np.zeros(stack + (dt_rank, d_inner)),
            D=np.zeros(stack + (d_inner,)) if not use_d_skip else np.ones(stack + (d_inner,)),
            use_d_skip=use_d_skip,
        )


@dataclass
class DiscretizedStep:
    """Per-step discretized system: ``A_bar``/``B_bar_x`` are ``[..., L, d, n]``, ``C`` is ``[..., L, n]``."""

    A_bar: Tensor
    B_bar_x: Tensor
    C: Tensor | None = None


def _insert_time_axis(t: Tensor) -> Tensor:
    return t.reshape(t.shape[:-1] + (1, t.shape[-1]))


def project_params(x, params: SsmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-conditioned ``B = s_B(x)``, ``C = s_C(x)``, ``Δ = softplus(W_Δ + s_Δ(x))``."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != params.d_inner:
        raise ShapeError(f"expected [..., L, {params.d_inner}], got {x.shape}")
    if x.shape[-2] < 1:
        raise ShapeError("sequence length must be >= 1")
    if not np.all(np.isfinite(x.data)):
        raise NumericsError("non-finite input to project_params")
    B = ops.matmul(x, params.w_B) + _insert_time_axis(params.b_B)
    C = ops.matmul(x, params.w_C) + _insert_time_axis(params.b_C)
    dt = ops.matmul(ops.matmul(x, params.dt_down), params.dt_up)
    delta = ops.softplus(dt + _insert_time_axis(params.dt_bias))
    return B, C, delta


def discretize(delta, A, B, x, C=None) -> DiscretizedStep:
    """Zero-order hold: ``A_bar = exp(ΔA)``, ``B_bar = (ΔA)^-1 (exp(ΔA) - 1) ΔB``.

    A is diagonal per (channel, state) pair, so everything is elementwise.
    The ratio falls back to its Euler limit ``B_bar = ΔB`` when ``|ΔA| < 1e-6``.
    """
    delta, A, B, x = as_tensor(delta), as_tensor(A), as_tensor(B), as_tensor(x)
    if np.any(delta.data <= 0):
        raise DomainError("discretize needs Δ > 0")
    d3 = delta.reshape(delta.shape + (1,))  # [..., L, d, 1]
    z = d3 * A.reshape(A.shape[:-2] + (1,) + A.shape[-2:])  # [..., L, d, n]
    A_bar = ops.exp(z)
    B3 = B.reshape(B.shape[:-1] + (1, B.shape[-1]))  # [..., L, 1, n]
    B_bar_x = ops.expm1_ratio(z) * (d3 * x.reshape(x.shape + (1,))) * B3
    return DiscretizedStep(A_bar, B_bar_x, None if C is None else as_tensor(C))


# ---------------------------------------------------------------- scan kernels


def _data(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def recurrence_sequential(a: np.ndarray, b: np.ndarray, h0=None) -> np.ndarray:
    """All states of ``h_t = a_t h_{t-1} + b_t`` by direct iteration (time axis -3)."""
    a, b = np.broadcast_arrays(a, b)
    h = np.zeros(a.shape[:-3] + a.shape[-2:]) if h0 is None else np.array(np.broadcast_to(h0, a.shape[:-3] + a.shape[-2:]), dtype=float)
    out = np.empty(a.shape, dtype=np.result_type(a, b))
    for t in range(a.shape[-3]):
        h = a[..., t, :, :] * h + b[..., t, :, :]
        out[..., t, :, :] = h
    return out


def recurrence_chunked(a: np.ndarray, b: np.ndarray, h0=None, chunk_len: int | None = None) -> np.ndarray:
    """Same states as :func:`recurrence_sequential`, computed chunk-parallel.

    Every chunk is scanned from a zero state while accumulating the running
    product of ``a``; chunk-boundary states are then carried sequentially and
    folded back in as ``h = local + prefix_prod * h_start``.  The loop count
    is ``chunk_len + n_chunks`` instead of ``L``; no divisions, so there is
    no precision loss when decays underflow.
    """
    a, b = np.broadcast_arrays(a, b)
    length = a.shape[-3]
    c = default_chunk_len(length) if chunk_len is None else int(chunk_len)
    if c < 1:
        raise ValueError("chunk_len must be >= 1")
    c = min(c, length)
    n_chunks = -(-length // c)
    pad = n_chunks * c - length
    at = np.moveaxis(a, -3, 0)
    bt = np.moveaxis(b, -3, 0)
    if pad:
        at = np.concatenate([at, np.ones((pad,) + at.shape[1:], dtype=at.dtype)])
        bt = np.concatenate([bt, np.zeros((pad,) + bt.shape[1:], dtype=bt.dtype)])
    rest = at.shape[1:]
    at = at.reshape((n_chunks, c) + rest)
    bt = bt.reshape((n_chunks, c) + rest)

    local = np.empty(at.shape, dtype=np.result_type(at, bt))
    prod = np.empty_like(local)
    s = np.zeros((n_chunks,) + rest, dtype=local.dtype)
    p = np.ones_like(s)
    for j in range(c):
        s = at[:, j] * s + bt[:, j]
        p = p * at[:, j]
        local[:, j] = s
        prod[:, j] = p

    starts = np.empty_like(s)
    h = np.zeros(rest, dtype=local.dtype) if h0 is None else np.broadcast_to(h0, rest).astype(local.dtype)
    for k in range(n_chunks):
        starts[k] = h
        h = prod[k, -1] * h + local[k, -1]

    states = local + prod * starts[:, None]
    states = states.reshape((n_chunks * c,) + rest)[:length]
    return np.moveaxis(states, 0, -3)


def default_chunk_len(length: int) -> int:
    return max(1, int(math.isqrt(max(length, 1))))


def _readout(states: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.einsum("...ldn,...ln->...ld", states, C)


def scan_sequential(step: DiscretizedStep, h0=None) -> np.ndarray:
    """Reference scan; exact semantics every other implementation is checked against."""
    states = recurrence_sequential(_data(step.A_bar), _data(step.B_bar_x), None if h0 is None else _data(h0))
    return _readout(states, _data(step.C))


def scan_chunked(step: DiscretizedStep, h0=None, chunk_len: int | None = None) -> np.ndarray:
    states = recurrence_chunked(_data(step.A_bar), _data(step.B_bar_x), None if h0 is None else _data(h0), chunk_len)
    return _readout(states, _data(step.C))


def selective_scan(step: DiscretizedStep, h0=None, chunk_len: int | None = None, method: str = "chunked") -> Tensor:
    """Differentiable scan + readout ``y [..., L, d]``.

    The backward pass runs the adjoint recurrence
    ``g_t = C_t y'_t + A_bar_{t+1} g_{t+1}`` in reverse time with the same kernel.
    """
    A_bar, BBx, C = as_tensor(step.A_bar), as_tensor(step.B_bar_x), as_tensor(step.C)
    a, b = np.broadcast_arrays(A_bar.data, BBx.data)
    if C.shape[-2] != a.shape[-3] or C.shape[-1] != a.shape[-1]:
        raise ShapeError(f"C shape {C.shape} does not match states {a.shape}")
    inputs = [A_bar, BBx, C]
    h0_t = None
    if h0 is not None:
        h0_t = as_tensor(h0)
        inputs.append(h0_t)
    h0_d = None if h0_t is None else h0_t.data
    if method == "chunked":
        states = recurrence_chunked(a, b, h0_d, chunk_len)
    elif method == "sequential":
        states = recurrence_sequential(a, b, h0_d)
    else:
        raise ValueError(f"unknown scan method {method!r}")
    y = _readout(states, C.data)

    def bwd(gy):
        u = gy[..., :, :, None] * C.data[..., :, None, :]
        a_rev = np.flip(a, axis=-3)
        shifted = np.concatenate([np.ones_like(a_rev[..., :1, :, :]), a_rev[..., :-1, :, :]], axis=-3)
        gh = np.flip(recurrence_chunked(shifted, np.flip(u, axis=-3), None, chunk_len), axis=-3)
        prev = np.concatenate(
            [
                np.broadcast_to(
                    np.zeros(a.shape[:-3] + a.shape[-2:]) if h0_d is None else h0_d, a.shape[:-3] + a.shape[-2:]
                )[..., None, :, :],
                states[..., :-1, :, :],
            ],
            axis=-3,
        )
        gC = np.einsum("...ld,...ldn->...ln", gy, states)
        grads = [unbroadcast(gh * prev, A_bar.shape), unbroadcast(gh, BBx.shape), unbroadcast(gC, C.shape)]
        if h0_t is not None:
            grads.append(unbroadcast(a[..., 0, :, :] * gh[..., 0, :, :], h0_t.shape))
        return grads

    return record("selective_scan", y, inputs, bwd)


def s6_forward(x, params: SsmParams, h0=None, chunk_len: int | None = None, method: str = "chunked") -> Tensor:
    """Full S6 layer ``[..., L, d_inner] -> [..., L, d_inner]``."""
    x = as_tensor(x)
    B, C, delta = project_params(x, params)
    step = discretize(delta, params.A, B, x, C)
    y = selective_scan(step, h0, chunk_len, method)
    if params.use_d_skip:
        y = y + x * _insert_time_axis(params.D)
    return y
