"""From-scratch differentiable building blocks, float64 throughout.

GRU convention used everywhere (code, oracles, tests):

    z = sigmoid(Wz x + Uz h_prev + bz)
    r = sigmoid(Wr x + Ur h_prev + br)
    hc = tanh(Wh x + Uh (r * h_prev) + bh)
    h_next = (1 - z) * h_prev + z * hc

All operations are batch-first: inputs carry a leading batch axis B, so a
single sequence is shape (1, T, I). Forward passes return a cache holding
exactly the intermediates the matching backward pass needs; backwards are
exact BPTT, verified against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (split positive/negative)."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GruCellParams:
    """Weights of one GRU cell: W* are (H, I), U* are (H, H), b* are (H,)."""

    wz: np.ndarray
    wr: np.ndarray
    wh: np.ndarray
    uz: np.ndarray
    ur: np.ndarray
    uh: np.ndarray
    bz: np.ndarray
    br: np.ndarray
    bh: np.ndarray

    KEYS = ("wz", "wr", "wh", "uz", "ur", "uh", "bz", "br", "bh")

    @property
    def hidden_dim(self) -> int:
        return self.wz.shape[0]

    @property
    def input_dim(self) -> int:
        return self.wz.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.KEYS}

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(getattr(self, k)) for k in self.KEYS}


@dataclass
class AffineParams:
    """y = activation(W x + b): W is (O, H), b is (O,)."""

    w: np.ndarray
    b: np.ndarray
    activation: str = "identity"  # "relu" or "identity"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise DataError(f"unknown activation {self.activation!r}")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}


def init_gru_cell(rng: np.random.Generator, input_dim: int, hidden_dim: int) -> GruCellParams:
    """Uniform [-k, k] with k = 1/sqrt(fan-in); biases zero."""
    ki = 1.0 / np.sqrt(input_dim)
    kh = 1.0 / np.sqrt(hidden_dim)
    u = lambda k, shape: rng.uniform(-k, k, shape)
    return GruCellParams(
        wz=u(ki, (hidden_dim, input_dim)),
        wr=u(ki, (hidden_dim, input_dim)),
        wh=u(ki, (hidden_dim, input_dim)),
        uz=u(kh, (hidden_dim, hidden_dim)),
        ur=u(kh, (hidden_dim, hidden_dim)),
        uh=u(kh, (hidden_dim, hidden_dim)),
        bz=np.zeros(hidden_dim),
        br=np.zeros(hidden_dim),
        bh=np.zeros(hidden_dim),
    )


def init_affine(
    rng: np.random.Generator, in_dim: int, out_dim: int, activation: str = "identity"
) -> AffineParams:
    k = 1.0 / np.sqrt(in_dim)
    return AffineParams(
        w=rng.uniform(-k, k, (out_dim, in_dim)), b=np.zeros(out_dim), activation=activation
    )


# ---------------------------------------------------------------------------
# GRU cell


def gru_cell_forward(
    p: GruCellParams, x: np.ndarray, h_prev: np.ndarray
) -> tuple[np.ndarray, dict]:
    """One step. x is (B, I), h_prev is (B, H); returns (h_next, cache)."""
    if x.shape[1] != p.input_dim or h_prev.shape[1] != p.hidden_dim:
        raise DataError(
            f"shape mismatch: x {x.shape}, h {h_prev.shape}, "
            f"cell (I={p.input_dim}, H={p.hidden_dim})"
        )
    z = sigmoid(x @ p.wz.T + h_prev @ p.uz.T + p.bz)
    r = sigmoid(x @ p.wr.T + h_prev @ p.ur.T + p.br)
    rh = r * h_prev
    hc = np.tanh(x @ p.wh.T + rh @ p.uh.T + p.bh)
    h_next = (1.0 - z) * h_prev + z * hc
    cache = {"x": x, "h_prev": h_prev, "z": z, "r": r, "hc": hc}
    return h_next, cache


def gru_cell_backward(
    p: GruCellParams, cache: dict, dh_next: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of a scalar loss given d(loss)/d(h_next).

    Returns (parameter grads, dx, dh_prev).
    """
    x, h_prev, z, r, hc = cache["x"], cache["h_prev"], cache["z"], cache["r"], cache["hc"]

    dz = dh_next * (hc - h_prev)
    dhc = dh_next * z
    dh_prev = dh_next * (1.0 - z)

    da_h = dhc * (1.0 - hc * hc)
    d_rh = da_h @ p.uh
    dr = d_rh * h_prev
    dh_prev = dh_prev + d_rh * r

    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)
    dh_prev = dh_prev + da_z @ p.uz + da_r @ p.ur

    grads = {
        "wz": da_z.T @ x,
        "wr": da_r.T @ x,
        "wh": da_h.T @ x,
        "uz": da_z.T @ h_prev,
        "ur": da_r.T @ h_prev,
        "uh": da_h.T @ (r * h_prev),
        "bz": da_z.sum(axis=0),
        "br": da_r.sum(axis=0),
        "bh": da_h.sum(axis=0),
    }
    dx = da_z @ p.wz + da_r @ p.wr + da_h @ p.wh
    return grads, dx, dh_prev


# ---------------------------------------------------------------------------
# GRU over a sequence


def gru_sequence_forward(
    p: GruCellParams, xs: np.ndarray, h0: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Run the cell left to right over xs (B, T, I).

    Returns (hidden sequence (B, T, H), final hidden (B, H), caches).
    """
    if xs.ndim != 3:
        raise DataError(f"expected (B, T, I) inputs, got shape {xs.shape}")
    B, T, _ = xs.shape
    h = np.zeros((B, p.hidden_dim)) if h0 is None else h0
    hs = np.empty((B, T, p.hidden_dim))
    caches = []
    for t in range(T):
        h, cache = gru_cell_forward(p, xs[:, t], h)
        hs[:, t] = h
        caches.append(cache)
    return hs, h, caches


def gru_sequence_backward(
    p: GruCellParams,
    caches: list[dict],
    dhs: np.ndarray | None = None,
    dh_final: np.ndarray | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Exact BPTT through a forward sequence.

    dhs is the upstream gradient for every hidden output (B, T, H) or
    None; dh_final is an extra gradient on the last hidden state.
    Returns (parameter grads, d_inputs (B, T, I), dh0).
    """
    T = len(caches)
    B = caches[0]["x"].shape[0]
    grads = p.zero_grads()
    dxs = np.empty((B, T, p.input_dim))
    dh = np.zeros((B, p.hidden_dim))
    if dh_final is not None:
        dh = dh + dh_final
    for t in range(T - 1, -1, -1):
        if dhs is not None:
            dh = dh + dhs[:, t]
        g, dx, dh = gru_cell_backward(p, caches[t], dh)
        for k in grads:
            grads[k] += g[k]
        dxs[:, t] = dx
    return grads, dxs, dh


# ---------------------------------------------------------------------------
# Bidirectional encoder


def bidirectional_encode(
    fwd: GruCellParams, bwd: GruCellParams, xs: np.ndarray
) -> tuple[np.ndarray, dict]:
    """[forward final hidden || backward final hidden on reversed time]."""
    if fwd.hidden_dim != bwd.hidden_dim:
        raise DataError("forward and backward hidden dims differ")
    _, hf, cf = gru_sequence_forward(fwd, xs)
    _, hb, cb = gru_sequence_forward(bwd, xs[:, ::-1])
    return np.concatenate([hf, hb], axis=1), {"fwd": cf, "bwd": cb}


def bidirectional_encode_backward(
    fwd: GruCellParams, bwd: GruCellParams, cache: dict, dstate: np.ndarray
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], np.ndarray]:
    """Returns (fwd grads, bwd grads, d_inputs)."""
    H = fwd.hidden_dim
    gf, dxf, _ = gru_sequence_backward(fwd, cache["fwd"], dh_final=dstate[:, :H])
    gb, dxb, _ = gru_sequence_backward(bwd, cache["bwd"], dh_final=dstate[:, H:])
    return gf, gb, dxf + dxb[:, ::-1]


# ---------------------------------------------------------------------------
# Repeat vector, time-distributed affine, loss


def repeat_vector(state: np.ndarray, n: int) -> np.ndarray:
    """Copy state (B, D) into (B, n, D)."""
    if n < 1:
        raise DataError(f"repeat count must be >= 1, got {n}")
    return np.repeat(state[:, None, :], n, axis=1)


def repeat_vector_backward(dout: np.ndarray) -> np.ndarray:
    """Copying is linear: the state gradient is the sum over repeats."""
    return dout.sum(axis=1)


def time_distributed_affine(
    p: AffineParams, xs: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Apply the same affine map at every timestep of xs (B, T, H)."""
    if xs.shape[-1] != p.w.shape[1]:
        raise DataError(f"affine expects last dim {p.w.shape[1]}, got {xs.shape[-1]}")
    pre = xs @ p.w.T + p.b
    out = np.maximum(pre, 0.0) if p.activation == "relu" else pre
    return out, {"xs": xs, "pre": pre}


def time_distributed_affine_backward(
    p: AffineParams, cache: dict, dout: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    xs, pre = cache["xs"], cache["pre"]
    dpre = dout * (pre > 0.0) if p.activation == "relu" else dout
    B, T, H = xs.shape
    flat_x = xs.reshape(B * T, H)
    flat_d = dpre.reshape(B * T, -1)
    grads = {"w": flat_d.T @ flat_x, "b": flat_d.sum(axis=0)}
    return grads, dpre @ p.w


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over all entries of squared error, plus its gradient."""
    if pred.shape != target.shape:
        raise DataError(f"shape mismatch: pred {pred.shape}, target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(
        cls,
        params: dict[str, np.ndarray],
        alpha: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
            alpha=alpha,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One standard Adam update; returns fresh copies, inputs untouched."""
    if set(params) != set(grads):
        raise DataError("params and grads carry different keys")
    t = state.t + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, p in params.items():
        g = grads[k]
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[k] = p - state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k] = m
        new_v[k] = v
    new_state = AdamState(
        m=new_m, v=new_v, t=t,
        alpha=state.alpha, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    return new_params, new_state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients so their global L2 norm is at most max_norm.

    max_norm <= 0 disables clipping.
    """
    if max_norm <= 0.0:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}
