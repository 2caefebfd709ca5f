"""Selective state-space sequence kernels.

Covers zero-order-hold discretization, the sequential and parallel forms of
the linear recurrence h_t = a_t * h_{t-1} + b_t, the LTI convolution-kernel
form (used as an equivalence oracle for the scan), input-dependent
(selective) parameterization, and bidirectional superposition.

Sequence layout conventions: the public scan entry points take [C, L]
arrays to mirror the per-channel view; internal batched code uses
[..., L, C, N] with the scan running over axis -3.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DomainError, ModeError, ShapeError
from .tensor import Tensor, _as_tensor, _make

_ZOH_SERIES_EPS = 1e-8


def _positive_delta(pre) -> Tensor:
    """softplus with a floor at the smallest normal float.

    softplus underflows to exactly 0.0 once its argument drops below about
    -745, which would violate the positivity contract of zoh_discretize;
    the gradient is already a hard zero there, so flooring is exact.
    """
    d = T.softplus(pre)
    tiny = np.finfo(d.data.dtype).tiny
    low = d.data < tiny
    if np.any(low):
        d = T.where(low, T.scale(T.ones(d.shape), tiny), d)
    return d


def inv_softplus(y):
    """Inverse of log(1+exp(x)); y must be positive."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class SSMLayerParams:
    """Per-channel diagonal SSM parameters, LTI or selective."""

    state_dim: int
    channels: int
    mode: str  # "lti" | "selective"
    A_raw: Tensor                      # [C, N]; A = -softplus(A_raw) <= 0
    delta_raw: Optional[Tensor] = None  # [C], LTI; delta = softplus(delta_raw)
    B: Optional[Tensor] = None          # [C, N], LTI
    C_out: Optional[Tensor] = None      # [C, N], LTI
    W_dt: Optional[Tensor] = None       # [C, C], selective
    b_dt: Optional[Tensor] = None       # [C], selective
    W_B: Optional[Tensor] = None        # [C, N], selective
    W_C: Optional[Tensor] = None        # [C, N], selective

    @property
    def A(self) -> Tensor:
        return T.neg(T.softplus(self.A_raw))

    def named_params(self, prefix: str = "") -> dict:
        names = ["A_raw", "delta_raw", "B", "C_out", "W_dt", "b_dt", "W_B", "W_C"]
        return {prefix + n: getattr(self, n) for n in names
                if getattr(self, n) is not None}


def _stable_a_raw(channels: int, state_dim: int) -> np.ndarray:
    # A init spread over [-1, -N] per state coordinate
    target = np.arange(1, state_dim + 1, dtype=np.float64)
    raw = inv_softplus(target)
    return np.broadcast_to(raw, (channels, state_dim)).copy()


def _delta_raw_init(shape, rng) -> np.ndarray:
    u = rng.uniform(1e-3, 1e-1, size=shape)
    return inv_softplus(u)


def init_lti(channels: int, state_dim: int, rng: np.random.Generator) -> SSMLayerParams:
    scale = 1.0 / np.sqrt(state_dim)
    return SSMLayerParams(
        state_dim=state_dim,
        channels=channels,
        mode="lti",
        A_raw=T.tensor(_stable_a_raw(channels, state_dim), requires_grad=True),
        delta_raw=T.tensor(_delta_raw_init((channels,), rng), requires_grad=True),
        B=T.tensor(rng.uniform(-1, 1, (channels, state_dim)), requires_grad=True),
        C_out=T.tensor(rng.uniform(-scale, scale, (channels, state_dim)),
                       requires_grad=True),
    )


def init_selective(channels: int, state_dim: int,
                   rng: np.random.Generator) -> SSMLayerParams:
    cs = 1.0 / np.sqrt(channels)
    return SSMLayerParams(
        state_dim=state_dim,
        channels=channels,
        mode="selective",
        A_raw=T.tensor(_stable_a_raw(channels, state_dim), requires_grad=True),
        W_dt=T.tensor(rng.uniform(-cs, cs, (channels, channels)), requires_grad=True),
        b_dt=T.tensor(_delta_raw_init((channels,), rng), requires_grad=True),
        W_B=T.tensor(rng.uniform(-cs, cs, (channels, state_dim)), requires_grad=True),
        W_C=T.tensor(rng.uniform(-cs, cs, (channels, state_dim)), requires_grad=True),
    )


@dataclass
class DiscreteParams:
    """ZOH-discretized transition/input terms.

    ``A_bar``/``B_bar`` are [C, N] in LTI mode or carry a leading per-step
    axis ([..., L, C, N]) in selective mode.
    """

    A_bar: Tensor
    B_bar: Tensor


@dataclass
class ConvKernel:
    """Structured causal kernel equivalent to an LTI scan."""

    K_bar: np.ndarray  # [C, L]
    L: int


def zoh_discretize(A, B, delta) -> DiscreteParams:
    """Zero-order-hold discretization of diagonal (A, B) with timescale delta.

    A_bar = exp(delta*A); B_bar = ((exp(delta*a) - 1)/a) * B per diagonal
    coordinate, with the series limit delta*B taken at |delta*a| < 1e-8.
    ``delta`` may be a positive scalar, [C], or per-step [..., L, C].
    """
    A, B, delta = _as_tensor(A), _as_tensor(B), _as_tensor(delta)
    if np.any(delta.data <= 0):
        raise DomainError("delta must be positive")
    de = delta if delta.ndim == 0 else T.reshape(delta, delta.shape + (1,))
    z = T.mul(de, A)
    A_bar = T.exp(z)
    mask = np.abs(z.data) < _ZOH_SERIES_EPS
    a_safe = T.where(mask, T.ones(A.shape), A)
    phi = T.where(mask, T.mul(de, T.ones(z.shape)), T.div(T.sub(A_bar, 1.0), a_safe))
    B_bar = T.mul(phi, B)
    return DiscreteParams(A_bar=A_bar, B_bar=B_bar)


# ---------------------------------------------------------------------------
# the scan primitive


def _hillis_steele(ad: np.ndarray, bd: np.ndarray) -> np.ndarray:
    P = ad.copy()
    H = bd.copy()
    L = ad.shape[-3]
    off = 1
    while off < L:
        Psh = np.ones_like(P)
        Hsh = np.zeros_like(H)
        Psh[..., off:, :, :] = P[..., :-off, :, :]
        Hsh[..., off:, :, :] = H[..., :-off, :, :]
        H = H + P * Hsh
        P = P * Psh
        off *= 2
    return H


def linear_scan(a, b, parallel: bool = False) -> Tensor:
    """h_t = a_t * h_{t-1} + b_t along axis -3, h_{-1} = 0.

    ``a`` and ``b`` must have identical shapes [..., L, C, N]. The parallel
    variant uses a doubling prefix combine under
    (a, b) o (a', b') = (a*a', b + a*b') and matches the sequential form.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"scan coefficient shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 3:
        raise ShapeError("scan expects [..., L, C, N]")
    ad, bd = a.data, b.data
    L = ad.shape[-3]

    if parallel:
        h = _hillis_steele(ad, bd)
    else:
        h = np.empty_like(bd)
        acc = np.zeros(bd.shape[:-3] + bd.shape[-2:], dtype=bd.dtype)
        for t in range(L):
            acc = ad[..., t, :, :] * acc + bd[..., t, :, :]
            h[..., t, :, :] = acc

    def bwd(gh):
        ga = np.empty_like(ad)
        gb = np.empty_like(bd)
        lam = np.zeros(bd.shape[:-3] + bd.shape[-2:], dtype=bd.dtype)
        for t in range(L - 1, -1, -1):
            lam = gh[..., t, :, :] + lam
            gb[..., t, :, :] = lam
            if t > 0:
                ga[..., t, :, :] = lam * h[..., t - 1, :, :]
            else:
                ga[..., t, :, :] = 0.0
            lam = ad[..., t, :, :] * lam
        return ga, gb

    return _make(h, (a, b), bwd)


def _readout(h: Tensor, C_out) -> Tensor:
    """y = <C, h> over the state axis; C broadcasts against [..., L, C, N]."""
    C_out = _as_tensor(C_out)
    return T.reduce_sum(T.mul(h, C_out), axes=-1)


def _scan_cl(params: DiscreteParams, C_out, x, parallel: bool) -> Tensor:
    """Scan on channel-major input [C, L] (optionally batched [..., C, L])."""
    x = _as_tensor(x)
    A_bar, B_bar = _as_tensor(params.A_bar), _as_tensor(params.B_bar)
    L = x.shape[-1]
    selective = A_bar.ndim >= 3
    if selective and A_bar.shape[-3] != L:
        raise ShapeError(f"per-step params length {A_bar.shape[-3]} != L={L}")
    C = x.shape[-2]
    if A_bar.shape[-2] != C:
        raise ShapeError(f"channel mismatch: params {A_bar.shape} vs x {x.shape}")

    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    xt = T.permute(x, axes)                      # [..., L, C]
    xe = T.reshape(xt, xt.shape + (1,))          # [..., L, C, 1]
    target = np.broadcast_shapes(A_bar.shape, B_bar.shape, xt.shape + (1,))
    a = T.expand(A_bar, target)
    b = T.mul(T.expand(B_bar, target), xe)
    h = linear_scan(a, b, parallel=parallel)
    y = _readout(h, C_out)                       # [..., L, C]
    return T.permute(y, axes)                    # [..., C, L]


def ssm_scan(params: DiscreteParams, C_out, x) -> Tensor:
    """Sequential discrete recurrence over [C, L]; strictly causal."""
    return _scan_cl(params, C_out, x, parallel=False)


def ssm_parallel_scan(params: DiscreteParams, C_out, x) -> Tensor:
    """Prefix-combine reformulation of ssm_scan; identical contract."""
    return _scan_cl(params, C_out, x, parallel=True)


def ssm_conv_kernel(params: DiscreteParams, C_out, L: int) -> ConvKernel:
    """Structured kernel K[c, j] = sum_n C[c,n] * A_bar[c,n]^j * B_bar[c,n].

    Defined for step-invariant (LTI) parameters only.
    """
    A_bar = np.asarray(params.A_bar.data if isinstance(params.A_bar, Tensor)
                       else params.A_bar)
    B_bar = np.asarray(params.B_bar.data if isinstance(params.B_bar, Tensor)
                       else params.B_bar)
    C_arr = np.asarray(C_out.data if isinstance(C_out, Tensor) else C_out)
    if A_bar.ndim != 2:
        raise ModeError("convolution kernel form requires LTI (step-invariant) params")
    C_, N = A_bar.shape
    pw = np.empty((L, C_, N), dtype=A_bar.dtype)
    pw[0] = 1.0
    for j in range(1, L):
        pw[j] = pw[j - 1] * A_bar
    K = np.einsum("jcn,cn->cj", pw, B_bar * C_arr)
    return ConvKernel(K_bar=K, L=L)


def ssm_conv_apply(k: ConvKernel, x) -> np.ndarray:
    """Causal convolution y_t = sum_{j<=t} K_j x_{t-j} on [C, L]."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    C_, L = x.shape
    if k.L != L:
        raise ShapeError(f"kernel length {k.L} != sequence length {L}")
    y = np.empty_like(x)
    for c in range(C_):
        y[c] = np.convolve(x[c], k.K_bar[c])[:L]
    return y


# ---------------------------------------------------------------------------
# selective parameterization


def selective_project(x, params: SSMLayerParams):
    """Map per-step features [..., L, C] to (delta, B_t, C_t).

    delta = softplus(x @ W_dt + b_dt) > 0, shape [..., L, C];
    B_t, C_t are linear maps of x, shape [..., L, N].
    """
    if params.mode != "selective":
        raise ModeError("selective_project requires selective mode")
    x = _as_tensor(x)
    delta = _positive_delta(T.add(T.matmul(x, params.W_dt), params.b_dt))
    Bsel = T.matmul(x, params.W_B)
    Csel = T.matmul(x, params.W_C)
    return delta, Bsel, Csel


def apply_ssm(params: SSMLayerParams, x, parallel: bool = False) -> Tensor:
    """Run one directional scan of a parameterized SSM layer on [..., C, L]."""
    x = _as_tensor(x)
    if params.mode == "lti":
        disc = zoh_discretize(params.A, params.B, _positive_delta(params.delta_raw))
        return _scan_cl(disc, params.C_out, x, parallel)

    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    xt = T.permute(x, axes)                      # [..., L, C]
    delta, Bsel, Csel = selective_project(xt, params)
    Bstep = T.reshape(Bsel, Bsel.shape[:-1] + (1, Bsel.shape[-1]))  # [..., L, 1, N]
    disc = zoh_discretize(params.A, Bstep, delta)
    xe = T.reshape(xt, xt.shape + (1,))
    target = np.broadcast_shapes(disc.A_bar.shape, disc.B_bar.shape, xt.shape + (1,))
    a = T.expand(disc.A_bar, target)
    b = T.mul(T.expand(disc.B_bar, target), xe)
    h = linear_scan(a, b, parallel=parallel)
    Cstep = T.reshape(Csel, Csel.shape[:-1] + (1, Csel.shape[-1]))
    y = _readout(h, Cstep)                       # [..., L, C]
    return T.permute(y, axes)


def bim_scan(x, fwd: SSMLayerParams, bwd: SSMLayerParams,
             parallel: bool = False) -> Tensor:
    """Forward scan plus reversed backward scan, superimposed.

    y = scan_fwd(x) + reverse(scan_bwd(reverse(x))) along the sequence axis
    of [..., C, L]. Direction parameters are independent.
    """
    x = _as_tensor(x)
    if fwd.channels != bwd.channels or fwd.state_dim != bwd.state_dim:
        raise ShapeError("direction parameter shapes differ")
    yf = apply_ssm(fwd, x, parallel)
    yb = T.flip(apply_ssm(bwd, T.flip(x, -1), parallel), -1)
    return T.add(yf, yb)


# ---------------------------------------------------------------------------
# the surrounding layer: projection -> (bi)scan -> SiLU gate -> projection


class MambaLayer:
    """Selective-scan sequence layer operating on [..., L, C] sequences."""

    def __init__(self, channels: int, state_dim: int, bidirectional: bool,
                 rng: np.random.Generator, out_scale: float = 1.0):
        self.channels = channels
        self.state_dim = state_dim
        self.bidirectional = bidirectional
        cs = 1.0 / np.sqrt(channels)
        self.W_in = T.tensor(rng.uniform(-cs, cs, (channels, channels)),
                             requires_grad=True)
        self.W_gate = T.tensor(rng.uniform(-cs, cs, (channels, channels)),
                               requires_grad=True)
        self.fwd = init_selective(channels, state_dim, rng)
        # backward-direction params always allocated so checkpoints keep a
        # stable layout; unused when bidirectional is off
        self.bwd = init_selective(channels, state_dim, rng)
        self.W_out = T.tensor(out_scale * rng.uniform(-cs, cs, (channels, channels)),
                              requires_grad=True)

    def named_params(self, prefix: str = "") -> dict:
        out = {prefix + "W_in": self.W_in, prefix + "W_gate": self.W_gate,
               prefix + "W_out": self.W_out}
        out.update(self.fwd.named_params(prefix + "fwd."))
        out.update(self.bwd.named_params(prefix + "bwd."))
        return out

    def forward(self, x: Tensor) -> Tensor:
        """x: [..., L, C] -> [..., L, C]."""
        u = T.matmul(x, self.W_in)
        z = T.matmul(x, self.W_gate)
        ucl = _seq_to_cl(u)
        y = apply_ssm(self.fwd, ucl)
        if self.bidirectional:
            y = T.add(y, T.flip(apply_ssm(self.bwd, T.flip(ucl, -1)), -1))
        y = _cl_to_seq(y)
        return T.matmul(T.mul(y, T.silu(z)), self.W_out)


def _seq_to_cl(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return T.permute(x, axes)


_cl_to_seq = _seq_to_cl  # the swap is an involution
