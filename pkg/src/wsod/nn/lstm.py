"""Single-layer LSTM with backpropagation through time.

Gate layout in the stacked weight matrix is (input, forget, output, candidate).
"""
from dataclasses import dataclass

import numpy as np

from .layers import uniform_init


@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ValueError(f"hidden {self.hidden.shape} and cell {self.cell.shape} differ")


@dataclass
class LstmParams:
    """``weight`` maps concat(x_t, h_{t-1}) to the four stacked gates."""

    weight: np.ndarray  # (D_in + D_h, 4 D_h)
    bias: np.ndarray  # (4 D_h,)

    @property
    def hidden_size(self):
        return self.bias.shape[0] // 4

    @property
    def input_size(self):
        return self.weight.shape[0] - self.hidden_size

    @classmethod
    def init(cls, rng, input_size, hidden_size):
        fan_in = input_size + hidden_size
        return cls(uniform_init(rng, (fan_in, 4 * hidden_size), fan_in), np.zeros(4 * hidden_size))

    @classmethod
    def zeros(cls, input_size, hidden_size):
        return cls(np.zeros((input_size + hidden_size, 4 * hidden_size)), np.zeros(4 * hidden_size))


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_step(x_t, prev, params):
    """One LSTM step. Works on single vectors or on a leading batch axis."""
    dh = params.hidden_size
    if x_t.shape[-1] != params.input_size or prev.hidden.shape[-1] != dh:
        raise ValueError(
            f"dimension mismatch: x_t {x_t.shape}, hidden {prev.hidden.shape}, "
            f"weights expect input {params.input_size} and hidden {dh}")
    z = np.concatenate([x_t, prev.hidden], axis=-1) @ params.weight + params.bias
    i = sigmoid(z[..., :dh])
    f = sigmoid(z[..., dh:2 * dh])
    o = sigmoid(z[..., 2 * dh:3 * dh])
    g = np.tanh(z[..., 3 * dh:])
    cell = f * prev.cell + i * g
    hidden = o * np.tanh(cell)
    return hidden, LstmState(hidden, cell)


def lstm_forward(xs, params, state=None):
    """Run over a (B, T, D_in) batch; returns hidden outputs (B, T, D_h) and a cache."""
    b, t_len, _ = xs.shape
    dh = params.hidden_size
    if state is None:
        state = LstmState(np.zeros((b, dh)), np.zeros((b, dh)))
    hs = np.empty((b, t_len, dh))
    gates = np.empty((b, t_len, 4 * dh))
    cells = np.empty((b, t_len + 1, dh))
    hprev = np.empty((b, t_len + 1, dh))
    cells[:, 0] = state.cell
    hprev[:, 0] = state.hidden
    wx, wh = params.weight[:params.input_size], params.weight[params.input_size:]
    xproj = xs @ wx + params.bias
    h, c = state.hidden, state.cell
    for t in range(t_len):
        z = xproj[:, t] + h @ wh
        act = np.empty_like(z)
        act[:, :3 * dh] = sigmoid(z[:, :3 * dh])
        act[:, 3 * dh:] = np.tanh(z[:, 3 * dh:])
        i, f, o, g = act[:, :dh], act[:, dh:2 * dh], act[:, 2 * dh:3 * dh], act[:, 3 * dh:]
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t] = act
        cells[:, t + 1] = c
        hprev[:, t + 1] = h
        hs[:, t] = h
    return hs, (xs, params, gates, cells, hprev)


def lstm_backward(dhs, cache):
    """BPTT. Returns (dxs, dweight, dbias)."""
    xs, params, gates, cells, hprev = cache
    b, t_len, _ = xs.shape
    dh = params.hidden_size
    wx, wh = params.weight[:params.input_size], params.weight[params.input_size:]
    dz_all = np.empty((b, t_len, 4 * dh))
    dh_next = np.zeros((b, dh))
    dc_next = np.zeros((b, dh))
    for t in range(t_len - 1, -1, -1):
        act = gates[:, t]
        i, f, o, g = act[:, :dh], act[:, dh:2 * dh], act[:, 2 * dh:3 * dh], act[:, 3 * dh:]
        c = cells[:, t + 1]
        tc = np.tanh(c)
        dh_t = dhs[:, t] + dh_next
        dc = dc_next + dh_t * o * (1 - tc ** 2)
        dz = dz_all[:, t]
        dz[:, :dh] = dc * g * i * (1 - i)
        dz[:, dh:2 * dh] = dc * cells[:, t] * f * (1 - f)
        dz[:, 2 * dh:3 * dh] = dh_t * tc * o * (1 - o)
        dz[:, 3 * dh:] = dc * i * (1 - g ** 2)
        dc_next = dc * f
        dh_next = dz @ wh.T
    dxs = dz_all @ wx.T
    dz2 = dz_all.reshape(-1, 4 * dh)
    dwx = xs.reshape(-1, xs.shape[-1]).T @ dz2
    dwh = hprev[:, :-1].reshape(-1, dh).T @ dz2
    return dxs, np.concatenate([dwx, dwh], axis=0), dz2.sum(axis=0)
