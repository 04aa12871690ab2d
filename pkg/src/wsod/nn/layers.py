"""Dense, convolutional and normalization layers with hand-derived backward passes.

Arrays are float64 numpy arrays in channels-last layout. Batched inputs carry a
leading batch axis: images are (B, H, W, C).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (H, W, C) or (B, H, W, C) input, got shape {x.shape}")


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x, kernels, stride, padding):
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ValueError(f"kernels must be (k, k, C_in, C_out), got {kernels.shape}")
    if x.shape[-1] != kernels.shape[2]:
        raise ValueError(
            f"input channels do not match kernel channels: input shape {x.shape}, "
            f"kernel shape {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    k = kernels.shape[0]
    h, w = x.shape[-3], x.shape[-2]
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"kernel size {k} exceeds padded input {h}x{w} (padding {padding})")


def _patches(xb, k, stride, padding):
    xp = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # (B, H', W', C, k, k) -> (B, H', W', k, k, C)
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv2d_forward(x, kernels, stride=1, padding=0, bias=None):
    """2-D cross-correlation of ``x`` with ``kernels``.

    ``x`` is (H, W, C_in) or (B, H, W, C_in); ``kernels`` is (k, k, C_in, C_out).
    """
    _check_conv(x, kernels, stride, padding)
    xb, single = _as_batch(x)
    k, _, cin, cout = kernels.shape
    cols = _patches(xb, k, stride, padding)
    b, ho, wo = cols.shape[:3]
    out = cols.reshape(b * ho * wo, k * k * cin) @ kernels.reshape(k * k * cin, cout)
    out = out.reshape(b, ho, wo, cout)
    if bias is not None:
        out = out + bias
    return out[0] if single else out


def conv2d_backward(dout, x, kernels, stride=1, padding=0):
    """Gradients of a conv2d_forward call: returns (dx, dkernels, dbias)."""
    xb, single = _as_batch(x)
    db, _ = _as_batch(dout)
    k, _, cin, cout = kernels.shape
    cols = _patches(xb, k, stride, padding)
    b, ho, wo = cols.shape[:3]
    dflat = db.reshape(-1, cout)
    dk = (cols.reshape(-1, k * k * cin).T @ dflat).reshape(kernels.shape)
    dbias = dflat.sum(axis=0)
    dcols = (dflat @ kernels.reshape(k * k * cin, cout).T).reshape(b, ho, wo, k, k, cin)
    hp, wp = xb.shape[1] + 2 * padding, xb.shape[2] + 2 * padding
    dxp = np.zeros((b, hp, wp, cin))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, padding:hp - padding, padding:wp - padding, :]
    return (dx[0] if single else dx), dk, dbias


def conv2d_naive(x, kernels, stride=1, padding=0):
    """Reference convolution written as explicit nested loops (slow)."""
    _check_conv(x, kernels, stride, padding)
    k, _, cin, cout = kernels.shape
    h, w = x.shape[0], x.shape[1]
    xp = np.zeros((h + 2 * padding, w + 2 * padding, cin))
    xp[padding:padding + h, padding:padding + w] = x
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    out = np.zeros((ho, wo, cout))
    for r in range(ho):
        for c in range(wo):
            for o in range(cout):
                acc = 0.0
                for i in range(k):
                    for j in range(k):
                        for ch in range(cin):
                            acc += xp[r * stride + i, c * stride + j, ch] * kernels[i, j, ch, o]
                out[r, c, o] = acc
    return out


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0)


def linear_forward(x, weight, bias):
    """Affine map over the last axis: ``x @ weight + bias``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    return x @ weight + bias


def linear_backward(dout, x, weight):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ weight.T, x2.T @ d2, d2.sum(axis=0)


def softmax(logits, axis=-1):
    """Numerically stable softmax; shifting by the max keeps large logits finite."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_backward(dout, probs, axis=-1):
    """Vector-Jacobian product of softmax given its output ``probs``."""
    return probs * (dout - np.sum(dout * probs, axis=axis, keepdims=True))


class BatchNorm:
    """Per-channel batch normalization over every axis except the last.

    Training mode normalizes with batch statistics and updates running
    estimates with ``momentum``; inference uses the running estimates.
    """

    def __init__(self, channels, epsilon=1e-5, momentum=0.9):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.epsilon = epsilon
        self.momentum = momentum
        self._cache = None

    def forward(self, x, training=True):
        if x.size == 0:
            raise ValueError("batch norm needs a nonempty batch")
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, training)
        return self.gamma * xhat + self.beta

    def backward(self, dout):
        xhat, inv, training = self._cache
        axes = tuple(range(dout.ndim - 1))
        dgamma = np.sum(dout * xhat, axis=axes)
        dbeta = np.sum(dout, axis=axes)
        dxhat = dout * self.gamma
        if not training:
            return dxhat * inv, dgamma, dbeta
        m = dout.size // dout.shape[-1]
        dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * np.sum(dxhat * xhat, axis=axes))
        return dx, dgamma, dbeta


def batchnorm_forward(x, mean=None, var=None, gamma=None, beta=None, epsilon=1e-5):
    """Functional batch norm. Statistics default to those of ``x`` itself."""
    if x.size == 0:
        raise ValueError("batch norm needs a nonempty batch")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    axes = tuple(range(x.ndim - 1))
    mean = x.mean(axis=axes) if mean is None else mean
    var = x.var(axis=axes) if var is None else var
    out = (x - mean) / np.sqrt(var + epsilon)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
