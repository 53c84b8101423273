"""Minimal differentiable substrate: dense layers, GRU cells, BPTT, Adam.

Everything is double precision and deterministic.  Forward passes have a
plain variant and a ``*_recorded`` variant that returns a record of the
intermediates; :func:`backward` consumes a record plus an upstream gradient
and returns exact analytic gradients.  Gradient correctness is enforced
against :func:`grad_check` central differences.

GRU convention, per cell step with input x and previous state h:

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    c = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * c
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import NumericalError, ShapeError

GRU_KEYS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")

FORMAT_VERSION = 1


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    # (function, derivative expressed in terms of the output)
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
    "sigmoid": (sigmoid, lambda y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
}


class ParamStore:
    """Named parameter blocks with a flat-vector correspondence.

    Blocks keep insertion order; ``unflatten(flatten())`` is the identity.
    Instances are treated as immutable values: updates go through
    :meth:`unflatten` on a modified flat vector.
    """

    def __init__(self, blocks: Mapping[str, np.ndarray]):
        self._blocks: dict[str, np.ndarray] = {}
        for name, value in blocks.items():
            arr = np.array(value, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"block {name!r} contains non-finite entries")
            self._blocks[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._blocks[name]

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __iter__(self):
        return iter(self._blocks)

    def items(self):
        return self._blocks.items()

    def names(self) -> list[str]:
        return list(self._blocks)

    @property
    def size(self) -> int:
        return sum(v.size for v in self._blocks.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._blocks.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamStore":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError(f"flat vector of length {flat.shape} does not match store size {self.size}")
        out: dict[str, np.ndarray] = {}
        offset = 0
        for name, v in self._blocks.items():
            out[name] = flat[offset : offset + v.size].reshape(v.shape)
            offset += v.size
        return ParamStore(out)

    def view(self, prefix: str) -> dict[str, np.ndarray]:
        """Blocks whose names start with ``prefix + '.'``, keyed by the suffix."""
        cut = len(prefix) + 1
        found = {name[cut:]: v for name, v in self._blocks.items() if name.startswith(prefix + ".")}
        if not found:
            raise KeyError(f"no blocks under prefix {prefix!r}")
        return found

    def zeros_like(self) -> "ParamStore":
        return ParamStore({name: np.zeros_like(v) for name, v in self._blocks.items()})

    def to_json(self) -> str:
        """Versioned, byte-stable JSON with row-major values as decimal strings."""
        obj = {
            "format_version": FORMAT_VERSION,
            "blocks": [
                {"name": name, "shape": list(v.shape), "values": [repr(float(x)) for x in v.ravel()]}
                for name, v in self._blocks.items()
            ],
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ParamStore":
        obj = json.loads(text)
        if obj.get("format_version") != FORMAT_VERSION:
            raise ShapeError(f"unsupported parameter format version {obj.get('format_version')!r}")
        blocks = {}
        for blk in obj["blocks"]:
            values = np.array([float(x) for x in blk["values"]], dtype=np.float64)
            blocks[blk["name"]] = values.reshape(blk["shape"])
        return cls(blocks)


def init_params(plan: Mapping[str, tuple], seed: int) -> ParamStore:
    """Glorot-uniform matrices (+/- sqrt(6/(fan_in+fan_out))), zero vectors."""
    rng = np.random.default_rng(seed)
    blocks: dict[str, np.ndarray] = {}
    for name, shape in plan.items():
        shape = tuple(int(s) for s in shape)
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            blocks[name] = rng.uniform(-bound, bound, size=shape)
        elif len(shape) == 1:
            blocks[name] = np.zeros(shape)
        else:
            raise ShapeError(f"block {name!r}: only matrices and vectors are supported, got {shape}")
    return ParamStore(blocks)


# ---------------------------------------------------------------------------
# Dense layer
# ---------------------------------------------------------------------------

@dataclass
class DenseRecord:
    W: np.ndarray
    b: np.ndarray
    x: np.ndarray
    out: np.ndarray
    activation: str


def _check_dense_shapes(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> None:
    if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
        raise ShapeError(f"W {W.shape} and b {b.shape} do not form an affine map")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match W {W.shape}")


def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray, activation: str = "identity") -> np.ndarray:
    """activation(W x + b), applied along the last axis of ``x``."""
    W, b, x = np.asarray(W, float), np.asarray(b, float), np.asarray(x, float)
    _check_dense_shapes(W, b, x)
    if activation not in _ACTIVATIONS:
        raise ShapeError(f"unknown activation {activation!r}")
    fn, _ = _ACTIVATIONS[activation]
    return fn(x @ W.T + b)


def dense_forward_recorded(
    W: np.ndarray, b: np.ndarray, x: np.ndarray, activation: str = "identity"
) -> tuple[np.ndarray, DenseRecord]:
    out = dense_forward(W, b, x, activation)
    return out, DenseRecord(W=np.asarray(W, float), b=np.asarray(b, float), x=np.asarray(x, float),
                            out=out, activation=activation)


def dense_backward(record: DenseRecord, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dW, db, dx) of a recorded dense step."""
    dout = np.asarray(dout, float)
    if dout.shape != record.out.shape:
        raise ShapeError(f"upstream gradient {dout.shape} does not match output {record.out.shape}")
    _, dact = _ACTIVATIONS[record.activation]
    dpre = dout * dact(record.out)
    flat_pre = dpre.reshape(-1, record.W.shape[0])
    flat_x = record.x.reshape(-1, record.W.shape[1])
    dW = flat_pre.T @ flat_x
    db = flat_pre.sum(axis=0)
    dx = dpre @ record.W
    return dW, db, dx


# ---------------------------------------------------------------------------
# GRU cell and sequence
# ---------------------------------------------------------------------------

def _check_gru_params(params: Mapping[str, np.ndarray]) -> None:
    missing = [k for k in GRU_KEYS if k not in params]
    if missing:
        raise ShapeError(f"GRU parameters missing blocks {missing}")


@dataclass
class GruCellRecord:
    params: Mapping[str, np.ndarray]
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    c: np.ndarray
    h: np.ndarray


def gru_cell(params: Mapping[str, np.ndarray], x: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """One GRU step; ``x`` and ``h_prev`` may carry leading batch axes."""
    return gru_cell_recorded(params, x, h_prev)[0]


def gru_cell_recorded(
    params: Mapping[str, np.ndarray], x: np.ndarray, h_prev: np.ndarray
) -> tuple[np.ndarray, GruCellRecord]:
    _check_gru_params(params)
    x = np.asarray(x, float)
    h_prev = np.asarray(h_prev, float)
    W_z, U_z = params["W_z"], params["U_z"]
    if x.shape[-1] != W_z.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match W_z {W_z.shape}")
    if h_prev.shape[-1] != U_z.shape[1]:
        raise ShapeError(f"state width {h_prev.shape[-1]} does not match U_z {U_z.shape}")
    z = sigmoid(x @ W_z.T + h_prev @ U_z.T + params["b_z"])
    r = sigmoid(x @ params["W_r"].T + h_prev @ params["U_r"].T + params["b_r"])
    c = np.tanh(x @ params["W_h"].T + (r * h_prev) @ params["U_h"].T + params["b_h"])
    h = (1.0 - z) * h_prev + z * c
    return h, GruCellRecord(params=params, x=x, h_prev=h_prev, z=z, r=r, c=c, h=h)


def gru_cell_backward(
    record: GruCellRecord, dh: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Gradients (dparams, dx, dh_prev) of one recorded GRU step."""
    p, x, h_prev = record.params, record.x, record.h_prev
    z, r, c = record.z, record.r, record.c
    dh = np.asarray(dh, float)

    dz = dh * (c - h_prev)
    da_z = dz * z * (1.0 - z)
    dc = dh * z
    da_h = dc * (1.0 - c * c)
    dh_prev = dh * (1.0 - z)

    drh = da_h @ p["U_h"]
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r
    da_r = dr * r * (1.0 - r)
    dh_prev = dh_prev + da_z @ p["U_z"] + da_r @ p["U_r"]
    dx = da_z @ p["W_z"] + da_r @ p["W_r"] + da_h @ p["W_h"]

    def mat(a: np.ndarray, by: np.ndarray) -> np.ndarray:
        return a.reshape(-1, a.shape[-1]).T @ by.reshape(-1, by.shape[-1])

    rh = r * h_prev
    dparams = {
        "W_z": mat(da_z, x), "U_z": mat(da_z, h_prev), "b_z": da_z.reshape(-1, da_z.shape[-1]).sum(0),
        "W_r": mat(da_r, x), "U_r": mat(da_r, h_prev), "b_r": da_r.reshape(-1, da_r.shape[-1]).sum(0),
        "W_h": mat(da_h, x), "U_h": mat(da_h, rh), "b_h": da_h.reshape(-1, da_h.shape[-1]).sum(0),
    }
    return dparams, dx, dh_prev


@dataclass
class GruSequenceRecord:
    params: Mapping[str, np.ndarray]
    xs: np.ndarray        # (L, R, I)
    states: np.ndarray    # (L+1, R, H) with states[0] = h0
    z: np.ndarray         # (L, R, H)
    r: np.ndarray
    c: np.ndarray
    squeeze: bool


def gru_sequence(
    params: Mapping[str, np.ndarray], xs: np.ndarray, h0: np.ndarray | None = None
) -> np.ndarray:
    return gru_sequence_recorded(params, xs, h0)[0]


def gru_sequence_recorded(
    params: Mapping[str, np.ndarray], xs: np.ndarray, h0: np.ndarray | None = None
) -> tuple[np.ndarray, GruSequenceRecord]:
    """Run a GRU over ``xs`` of shape (L, R, I) or (L, I); states after each step.

    The input projections for all steps are batched into three matrix
    products up front, leaving only the recurrent half in the time loop.
    """
    _check_gru_params(params)
    xs = np.asarray(xs, float)
    squeeze = xs.ndim == 2
    if squeeze:
        xs = xs[:, None, :]
    if xs.ndim != 3:
        raise ShapeError(f"xs must be (L, R, I) or (L, I), got {xs.shape}")
    L, R, I = xs.shape
    H = params["U_z"].shape[0]
    if params["W_z"].shape[1] != I:
        raise ShapeError(f"input width {I} does not match W_z {params['W_z'].shape}")
    if h0 is None:
        h = np.zeros((R, H))
    else:
        h = np.asarray(h0, float)
        if h.shape != (R, H):
            raise ShapeError(f"h0 must be (R, H) = ({R}, {H}), got {h.shape}")

    # x-side projections for every step at once; the z and r gates share one
    # stacked matrix so the loop runs two matmuls per step instead of three.
    flat = xs.reshape(L * R, I)
    w_zr = np.concatenate([params["W_z"], params["W_r"]], axis=0)
    b_zr = np.concatenate([params["b_z"], params["b_r"]])
    ax_zr = (flat @ w_zr.T + b_zr).reshape(L, R, 2 * H)
    ax_h = (flat @ params["W_h"].T + params["b_h"]).reshape(L, R, H)
    u_zr_t = np.concatenate([params["U_z"], params["U_r"]], axis=0).T
    u_h_t = params["U_h"].T

    states = np.empty((L + 1, R, H))
    states[0] = h
    zs = np.empty((L, R, H))
    rs = np.empty((L, R, H))
    cs = np.empty((L, R, H))
    for t in range(L):
        g = sigmoid(ax_zr[t] + h @ u_zr_t)
        z, r = g[:, :H], g[:, H:]
        c = np.tanh(ax_h[t] + (r * h) @ u_h_t)
        h = h + z * (c - h)
        zs[t], rs[t], cs[t], states[t + 1] = z, r, c, h

    record = GruSequenceRecord(params=params, xs=xs, states=states, z=zs, r=rs, c=cs, squeeze=squeeze)
    out = states[1:]
    return (out[:, 0, :] if squeeze else out), record


def gru_sequence_backward(
    record: GruSequenceRecord,
    dstates: np.ndarray,
    dh_last: np.ndarray | None = None,
    need_dx: bool = True,
) -> tuple[dict[str, np.ndarray], np.ndarray | None, np.ndarray]:
    """BPTT over a recorded sequence.

    ``dstates`` holds the loss gradient with respect to each emitted state
    (same shape as the forward output); ``dh_last`` optionally adds an
    extra gradient flowing into the final state.  Returns (dparams, dxs,
    dh0); ``dxs`` is None when ``need_dx`` is false.
    """
    p = record.params
    xs, states = record.xs, record.states
    L, R, I = xs.shape
    H = states.shape[-1]
    dstates = np.asarray(dstates, float)
    if record.squeeze and dstates.ndim == 2:
        dstates = dstates[:, None, :]
    if dstates.shape != (L, R, H):
        raise ShapeError(f"dstates must be {(L, R, H)}, got {dstates.shape}")

    da_zr = np.empty((L, R, 2 * H))
    da_h = np.empty((L, R, H))
    carry = np.zeros((R, H)) if dh_last is None else np.asarray(dh_last, float).reshape(R, H)
    u_zr = np.concatenate([p["U_z"], p["U_r"]], axis=0)
    u_h = p["U_h"]
    for t in range(L - 1, -1, -1):
        dh = dstates[t] + carry
        z, r, c, h_prev = record.z[t], record.r[t], record.c[t], states[t]
        dz = dh * (c - h_prev)
        ah = (dh * z) * (1.0 - c * c)
        drh = ah @ u_h
        azr = da_zr[t]
        azr[:, :H] = dz * z * (1.0 - z)
        azr[:, H:] = (drh * h_prev) * r * (1.0 - r)
        carry = dh * (1.0 - z) + drh * r + azr @ u_zr
        da_h[t] = ah

    flat_x = xs.reshape(L * R, I)
    h_prevs = states[:-1].reshape(L * R, H)
    rh = (record.r * states[:-1]).reshape(L * R, H)
    fzr = da_zr.reshape(L * R, 2 * H)
    fh = da_h.reshape(L * R, H)
    dw_zr = fzr.T @ flat_x
    du_zr = fzr.T @ h_prevs
    db_zr = fzr.sum(0)
    dparams = {
        "W_z": dw_zr[:H], "U_z": du_zr[:H], "b_z": db_zr[:H],
        "W_r": dw_zr[H:], "U_r": du_zr[H:], "b_r": db_zr[H:],
        "W_h": fh.T @ flat_x, "U_h": fh.T @ rh, "b_h": fh.sum(0),
    }
    dxs = None
    if need_dx:
        w_zr = np.concatenate([p["W_z"], p["W_r"]], axis=0)
        dxs = da_zr @ w_zr + da_h @ p["W_h"]
        if record.squeeze:
            dxs = dxs[:, 0, :]
    return dparams, dxs, carry


def backward(record, upstream: np.ndarray):
    """Reverse-mode gradients for a recorded forward step.

    Dispatches on the record type: dense records yield (dW, db, dx), GRU
    cell records (dparams, dx, dh_prev), GRU sequence records (dparams,
    dxs, dh0).
    """
    if isinstance(record, DenseRecord):
        return dense_backward(record, upstream)
    if isinstance(record, GruCellRecord):
        return gru_cell_backward(record, upstream)
    if isinstance(record, GruSequenceRecord):
        return gru_sequence_backward(record, upstream)
    raise ShapeError(f"unknown computation record type {type(record).__name__}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment running averages plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    k: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), k=0)


def adam_step(
    theta: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns fresh arrays and state."""
    theta = np.asarray(theta, float)
    grad = np.asarray(grad, float)
    if not (theta.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError("theta, grad, and Adam state lengths differ")
    k = state.k + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**k)
    v_hat = v / (1.0 - beta2**k)
    new_theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_theta, AdamState(m=m, v=v, k=k)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    fn: Callable[[ParamStore], tuple[float, ParamStore]],
    params: ParamStore,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``fn`` maps a parameter store to (loss, gradient store).  Per
    coordinate the relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    loss0, grads = fn(params)
    if not np.isfinite(loss0):
        raise NumericalError("loss is non-finite at the evaluation point")
    flat = params.flatten()
    gflat = grads.flatten()
    if gflat.shape != flat.shape:
        raise ShapeError("gradient store does not match the parameter store layout")
    max_err = 0.0
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + h
        up, _ = fn(params.unflatten(probe))
        probe[i] = flat[i] - h
        down, _ = fn(params.unflatten(probe))
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"non-finite loss while probing coordinate {i}")
        numeric = (up - down) / (2.0 * h)
        analytic = gflat[i]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        max_err = max(max_err, err)
    return max_err
