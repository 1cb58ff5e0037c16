"""The recurrent graph estimator.

One set of per-node parameters is shared by every body in the graph. Per
time step and body the network

1. computes an outgoing message from the node's upper GRU state,
2. gathers the parent's message and the sum of its children's messages,
3. updates the two stacked GRU cells (GRU, LayerNorm, GRU) on
   ``[parent msg | children msg | x_t]``,
4. maps the upper GRU state through LayerNorm + MLP to four numbers,
5. normalizes those to a unit quaternion.

All arrays broadcast over a leading batch dimension. The recurrent state
of a node is ``[h_lower | h_upper]`` with width ``2H``.

Parameter count for widths ``H`` (state) and ``M`` (message), input
width ``D = 2M + 10``::

    message MLP   H*H + H + H*M + M
    GRU 1         3H*D + 3H*H + 3H
    LayerNorm 1   2H
    GRU 2         3H*H + 3H*H + 3H
    output head   2H + H*H + H + 4H + 4

See :func:`param_count`.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kinematics import validate_parent_array

__all__ = [
    "INPUT_WIDTH",
    "NonFiniteStateError",
    "WidthMismatchError",
    "RingParams",
    "param_shapes",
    "param_count",
    "init_params",
    "init_state",
    "gru_cell",
    "gru_cell_vjp",
    "layer_norm",
    "layer_norm_vjp",
    "ring_step",
    "ring_apply",
    "Unroll",
]

INPUT_WIDTH = 10
LN_EPS = 1e-6


class NonFiniteStateError(FloatingPointError):
    pass


class WidthMismatchError(ValueError):
    pass


def param_shapes(H: int, M: int) -> dict[str, tuple[int, ...]]:
    D = 2 * M + INPUT_WIDTH
    return {
        "msg.w1": (H, H),
        "msg.b1": (H,),
        "msg.w2": (H, M),
        "msg.b2": (M,),
        "gru1.wx": (D, 3 * H),
        "gru1.wh": (H, 3 * H),
        "gru1.b": (3 * H,),
        "ln1.gain": (H,),
        "ln1.offset": (H,),
        "gru2.wx": (H, 3 * H),
        "gru2.wh": (H, 3 * H),
        "gru2.b": (3 * H,),
        "head.ln_gain": (H,),
        "head.ln_offset": (H,),
        "head.w1": (H, H),
        "head.b1": (H,),
        "head.w2": (H, 4),
        "head.b2": (4,),
    }


def param_count(H: int, M: int) -> int:
    D = 2 * M + INPUT_WIDTH
    return (
        (H * H + H + H * M + M)
        + (3 * H * D + 3 * H * H + 3 * H)
        + 2 * H
        + (6 * H * H + 3 * H)
        + (2 * H + H * H + H + 4 * H + 4)
    )


@dataclass
class RingParams:
    H: int
    M: int
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = param_shapes(self.H, self.M)
        if set(shapes) != set(self.tensors):
            missing = set(shapes) ^ set(self.tensors)
            raise WidthMismatchError(f"parameter names differ: {sorted(missing)}")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise WidthMismatchError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(param_shapes(self.H, self.M))

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "RingParams":
        return RingParams(self.H, self.M, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "RingParams":
        return RingParams(self.H, self.M, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def zeros_like(self) -> "RingParams":
        return RingParams(self.H, self.M, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def init_params(H: int, M: int, seed=0) -> RingParams:
    """Glorot-uniform weights, zero biases, unit LayerNorm gains."""
    if H < 1 or M < 0:
        raise ValueError("need H >= 1 and M >= 0")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(H, M).items():
        if name.endswith("gain"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            if name.endswith(("wx", "wh")):
                fan_out //= 3  # three stacked gates
            limit = np.sqrt(6.0 / max(fan_in + fan_out, 1))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return RingParams(H, M, tensors)


def init_state(n_bodies: int, H: int, batch: tuple[int, ...] = ()) -> np.ndarray:
    return np.zeros(batch + (n_bodies, 2 * H))


# --------------------------------------------------------------------------- #
# building blocks


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _gru_forward(h, x, wx, wh, b):
    H = h.shape[-1]
    gx = x @ wx + b
    grz = gx[..., : 2 * H] + h @ wh[:, : 2 * H]
    rz = _sigmoid(grz)
    r = rz[..., :H]
    z = rz[..., H:]
    rh = r * h
    n = np.tanh(gx[..., 2 * H :] + rh @ wh[:, 2 * H :])
    h_new = n + z * (h - n)
    return h_new, (r, z, n, rh)


def gru_cell(h, x, wx, wh, b):
    """GRU update ``h' = (1 - z) * n + z * h``.

    Gates are ``r, z = sigmoid(x Wx + h Wh + b)`` and the candidate
    ``n = tanh(x Wx_n + (r * h) Wh_n + b_n)``, with weight columns ordered
    ``[r | z | n]``.
    """
    return _gru_forward(np.asarray(h, float), np.asarray(x, float), wx, wh, b)[0]


def _gru_backward(dh_new, h, cache, wx, wh):
    """Returns ``(dh, dx, dpre)``; ``dpre`` holds the pre-activation gradients ``[r|z|n]``."""
    r, z, n, _ = cache
    H = h.shape[-1]
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    drh = dan @ wh[:, 2 * H :].T
    dr = drh * h
    dh += drh * r
    dar = dr * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    darz = np.concatenate([dar, daz], axis=-1)
    dh += darz @ wh[:, : 2 * H].T
    dpre = np.concatenate([darz, dan], axis=-1)
    dx = dpre @ wx.T
    return dh, dx, dpre


def gru_cell_vjp(dh_new, h, x, wx, wh, b):
    """Vector-Jacobian product of :func:`gru_cell`.

    Returns gradients for ``(h, x, wx, wh, b)`` given the output cotangent.
    """
    h = np.asarray(h, float)
    x = np.asarray(x, float)
    _, cache = _gru_forward(h, x, wx, wh, b)
    dh, dx, dpre = _gru_backward(dh_new, h, cache, wx, wh)
    H = h.shape[-1]
    rh = cache[3]
    rows = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    dwx = rows(x).T @ rows(dpre)
    dwh = np.concatenate([rows(h).T @ rows(dpre[..., : 2 * H]), rows(rh).T @ rows(dpre[..., 2 * H :])], axis=1)
    db = rows(dpre).sum(axis=0)
    return dh, dx, dwx, dwh, db


def _ln_forward(x, gain, offset):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc / sigma
    return xhat * gain + offset, (xhat, sigma)


def layer_norm(x, gain, offset):
    """Normalize over the last axis (eps 1e-6), then scale and shift."""
    return _ln_forward(np.asarray(x, float), gain, offset)[0]


def _ln_backward(dy, gain, cache):
    xhat, sigma = cache
    dxhat = dy * gain
    return (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    ) / sigma


def layer_norm_vjp(dy, x, gain, offset):
    """Gradients of :func:`layer_norm` for ``(x, gain, offset)``."""
    _, cache = _ln_forward(np.asarray(x, float), gain, offset)
    dx = _ln_backward(dy, gain, cache)
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * cache[0]).sum(axis=red), dy.sum(axis=red)


@functools.lru_cache(maxsize=64)
def _routing(parents: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """``(P, C)`` with ``P @ m`` the parent message and ``C @ m`` the children sum."""
    n = len(parents)
    P = np.zeros((n, n))
    C = np.zeros((n, n))
    for i, p in enumerate(parents):
        if p > 0:
            P[i, p - 1] = 1.0
            C[p - 1, i] = 1.0
    return P, C


def _normalize_output(ytil):
    norm = np.sqrt((ytil * ytil).sum(axis=-1, keepdims=True))
    zero = norm == 0.0
    out = ytil / np.where(zero, 1.0, norm)
    if zero.any():
        out = np.where(zero, np.array([1.0, 0.0, 0.0, 0.0]), out)
    return out, norm


def _check_widths(X_t, state, params):
    if X_t.shape[-1] != INPUT_WIDTH:
        raise WidthMismatchError(f"input width {X_t.shape[-1]}, expected {INPUT_WIDTH}")
    if state.shape[-1] != 2 * params.H:
        raise WidthMismatchError(f"state width {state.shape[-1]}, expected {2 * params.H}")
    if state.shape[:-1] != X_t.shape[:-1]:
        raise WidthMismatchError(f"state {state.shape} and input {X_t.shape} disagree")


# --------------------------------------------------------------------------- #
# step function and unroll


def _step(params: RingParams, routing, state, x, keep: bool):
    p = params.tensors
    H = params.H
    P, C = routing
    h1 = state[..., :H]
    h2 = state[..., H:]

    u1 = np.tanh(h2 @ p["msg.w1"] + p["msg.b1"])
    msg = u1 @ p["msg.w2"] + p["msg.b2"]
    inp = np.concatenate([P @ msg, C @ msg, x], axis=-1)

    h1n, g1 = _gru_forward(h1, inp, p["gru1.wx"], p["gru1.wh"], p["gru1.b"])
    l1, c1 = _ln_forward(h1n, p["ln1.gain"], p["ln1.offset"])
    h2n, g2 = _gru_forward(h2, l1, p["gru2.wx"], p["gru2.wh"], p["gru2.b"])

    o, c2 = _ln_forward(h2n, p["head.ln_gain"], p["head.ln_offset"])
    u2 = np.tanh(o @ p["head.w1"] + p["head.b1"])
    ytil = u2 @ p["head.w2"] + p["head.b2"]
    yhat, norm = _normalize_output(ytil)

    new_state = np.concatenate([h1n, h2n], axis=-1)
    cache = (h1, h2, u1, inp, g1, c1, l1, g2, c2, o, u2, yhat, norm) if keep else None
    return new_state, yhat, cache


def ring_step(state, X_t, parents: Sequence[int], params: RingParams):
    """One step: ``(state_prev, X_t) -> (state_next, unit quaternions)``.

    ``state`` is ``(..., N, 2H)`` and ``X_t`` is ``(..., N, 10)``.
    """
    lam = validate_parent_array(parents)
    state = np.asarray(state, float)
    X_t = np.asarray(X_t, float)
    _check_widths(X_t, state, params)
    if X_t.shape[-2] != len(lam):
        raise WidthMismatchError(f"{X_t.shape[-2]} nodes but parent array has {len(lam)}")
    new_state, yhat, _ = _step(params, _routing(lam), state, X_t, keep=False)
    if not np.isfinite(new_state).all():
        raise NonFiniteStateError("recurrent state became non-finite")
    return new_state, yhat


class Unroll:
    """Forward unroll that keeps what the backward pass needs.

    >>> u = Unroll(params, parents)
    >>> yhat = u.forward(X)              # X: (B, T, N, 10)
    >>> grads, dstate0 = u.backward(dyhat)
    """

    def __init__(self, params: RingParams, parents: Sequence[int]):
        self.params = params
        self.parents = validate_parent_array(parents)
        self.routing = _routing(self.parents)
        self.caches: list = []
        self.X = None

    def forward(self, X, state=None, keep: bool = True):
        X = np.asarray(X, float)
        B, T, N, _ = X.shape
        if N != len(self.parents):
            raise WidthMismatchError(f"{N} nodes but parent array has {len(self.parents)}")
        if state is None:
            state = init_state(N, self.params.H, (B,))
        _check_widths(X[:, 0], state, self.params)
        out = np.empty((B, T, N, 4))
        self.caches = []
        self.X = X
        for t in range(T):
            state, out[:, t], cache = _step(self.params, self.routing, state, X[:, t], keep)
            if keep:
                self.caches.append(cache)
        if not np.isfinite(state).all():
            raise NonFiniteStateError("recurrent state became non-finite during unroll")
        self.final_state = state
        return out

    def backward(self, dyhat, dstate_final=None):
        """Gradients of a scalar loss given ``dL/dyhat`` of shape ``(B, T, N, 4)``."""
        p = self.params.tensors
        H = self.params.H
        P, C = self.routing
        M = self.params.M
        T = len(self.caches)
        B, _, N, _ = dyhat.shape
        if dstate_final is None:
            dh1 = np.zeros((B, N, H))
            dh2 = np.zeros((B, N, H))
        else:
            dh1 = dstate_final[..., :H].copy()
            dh2 = dstate_final[..., H:].copy()

        # per-step pre-activation gradients, reduced into weight grads at the end
        d_msg_pre = np.empty((T, B, N, H))
        d_msg_out = np.empty((T, B, N, M))
        d_g1 = np.empty((T, B, N, 3 * H))
        d_g2 = np.empty((T, B, N, 3 * H))
        d_head_pre = np.empty((T, B, N, H))
        d_head_out = np.empty((T, B, N, 4))
        d_ln1 = np.empty((T, B, N, H))
        d_lnh = np.empty((T, B, N, H))

        for t in range(T - 1, -1, -1):
            h1, h2, u1, inp, g1, c1, l1, g2, c2, o, u2, yhat, norm = self.caches[t]
            dy = dyhat[:, t]
            dytil = (dy - yhat * (yhat * dy).sum(axis=-1, keepdims=True)) / np.where(norm == 0, 1.0, norm)
            d_head_out[t] = dytil
            da2 = (dytil @ p["head.w2"].T) * (1.0 - u2 * u2)
            d_head_pre[t] = da2
            do = da2 @ p["head.w1"].T
            d_lnh[t] = do
            dh2n = dh2 + _ln_backward(do, p["head.ln_gain"], c2)

            dh2_prev, dl1, dpre2 = _gru_backward(dh2n, h2, g2, p["gru2.wx"], p["gru2.wh"])
            d_g2[t] = dpre2
            d_ln1[t] = dl1
            dh1n = dh1 + _ln_backward(dl1, p["ln1.gain"], c1)
            dh1, dinp, dpre1 = _gru_backward(dh1n, h1, g1, p["gru1.wx"], p["gru1.wh"])
            d_g1[t] = dpre1

            dmsg = P.T @ dinp[..., :M] + C.T @ dinp[..., M : 2 * M]
            d_msg_out[t] = dmsg
            da1 = (dmsg @ p["msg.w2"].T) * (1.0 - u1 * u1)
            d_msg_pre[t] = da1
            dh2 = dh2_prev + da1 @ p["msg.w1"].T

        g = {}
        stack = lambda i: np.stack([c[i] for c in self.caches])  # noqa: E731

        def outer(a, b):
            return np.einsum("...i,...j->ij", a, b, optimize=True)

        def total(a):
            return a.reshape(-1, a.shape[-1]).sum(axis=0)

        h1s, h2s, u1s, inps = stack(0), stack(1), stack(2), stack(3)
        g["msg.w1"] = outer(h2s, d_msg_pre)
        g["msg.b1"] = total(d_msg_pre)
        g["msg.w2"] = outer(u1s, d_msg_out)
        g["msg.b2"] = total(d_msg_out)

        rh1 = np.stack([c[4][3] for c in self.caches])
        g["gru1.wx"] = outer(inps, d_g1)
        g["gru1.wh"] = np.concatenate([outer(h1s, d_g1[..., : 2 * H]), outer(rh1, d_g1[..., 2 * H :])], axis=1)
        g["gru1.b"] = total(d_g1)

        xhat1 = np.stack([c[5][0] for c in self.caches])
        l1s = stack(6)
        # LN1 gain/offset: cotangent of l1 is d_ln1
        g["ln1.gain"] = total(d_ln1 * xhat1)
        g["ln1.offset"] = total(d_ln1)

        rh2 = np.stack([c[7][3] for c in self.caches])
        g["gru2.wx"] = outer(l1s, d_g2)
        g["gru2.wh"] = np.concatenate([outer(h2s, d_g2[..., : 2 * H]), outer(rh2, d_g2[..., 2 * H :])], axis=1)
        g["gru2.b"] = total(d_g2)

        xhat2 = np.stack([c[8][0] for c in self.caches])
        os_, u2s = stack(9), stack(10)
        g["head.ln_gain"] = total(d_lnh * xhat2)
        g["head.ln_offset"] = total(d_lnh)
        g["head.w1"] = outer(os_, d_head_pre)
        g["head.b1"] = total(d_head_pre)
        g["head.w2"] = outer(u2s, d_head_out)
        g["head.b2"] = total(d_head_out)

        dstate0 = np.concatenate([dh1, dh2], axis=-1)
        return RingParams(self.params.H, self.params.M, g), dstate0


def ring_apply(X, parents: Sequence[int], params: RingParams, state=None, return_state: bool = False):
    """Unroll the step function over a sequence from the zero state.

    ``X`` is ``(T, N, 10)`` or batched ``(B, T, N, 10)``.
    """
    X = np.asarray(X, float)
    single = X.ndim == 3
    if single:
        X = X[None]
        if state is not None:
            state = np.asarray(state, float)[None]
    if not np.isfinite(X).all():
        raise ValueError("input contains non-finite values")
    u = Unroll(params, parents)
    out = u.forward(X, state, keep=False)
    final = u.final_state
    if single:
        out, final = out[0], final[0]
    return (out, final) if return_state else out
