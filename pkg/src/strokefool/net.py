"""A small convolutional network, written directly on numpy arrays.

Layers operate on channels-last batches (B, H, W, C) and implement both
forward evaluation and reverse-mode gradients; convolutions are im2col
GEMMs.  Everything is deterministic given the arrays passed in: no
global RNG, no threading surprises.

``backward`` accumulates parameter gradients for training;
``backward_input`` propagates only the input gradient, which is all an
attack needs and noticeably cheaper.
"""

import threading
from dataclasses import dataclass

import numpy as np

from ._kernels import im2col, maxpool2_backward, maxpool2_forward


class _Buffers:
    """Per-thread reusable scratch arrays, keyed by tag + shape.

    Fresh multi-megabyte allocations per call dominate the runtime of
    small convolutions, so layers recycle their scratch space.  Buffers
    are thread-keyed: concurrent forward passes stay safe.
    """

    def __init__(self):
        self._store = {}

    def get(self, tag, shape, dtype, zero=False):
        key = (threading.get_ident(), tag, shape, np.dtype(dtype).str)
        buf = self._store.get(key)
        if buf is None:
            buf = np.zeros(shape, dtype) if zero else np.empty(shape, dtype)
            self._store[key] = buf
        return buf


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def like(params):
        return AdamState(m=np.zeros_like(params), v=np.zeros_like(params), t=0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if params.shape != grads.shape:
        raise ValueError("params and grads must have the same shape")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Conv2D:
    """3x3/5x5 same-padding convolution, stride 1, as an im2col GEMM."""

    def __init__(self, in_channels, out_channels, kernel, rng, dtype=np.float32):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        fan_in = in_channels * kernel * kernel
        scale = np.sqrt(2.0 / fan_in)
        # row order (ki, kj, c) to match the im2col column layout
        self.weights = (rng.standard_normal((fan_in, out_channels)) * scale).astype(dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self.d_weights = np.zeros_like(self.weights)
        self.d_bias = np.zeros_like(self.bias)
        self._cols = None
        self._in_shape = None
        self._bufs = _Buffers()

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.d_weights, self.d_bias]

    def _conv_cols(self, x, channels, tag):
        """im2col through recycled pad/column buffers."""
        k = self.kernel
        pad = k // 2
        b, h, w, _ = x.shape
        xp = self._bufs.get(tag + ".pad", (b, h + 2 * pad, w + 2 * pad, channels),
                            x.dtype, zero=True)  # border stays zero forever
        xp[:, pad:pad + h, pad:pad + w, :] = x
        cols = self._bufs.get(tag + ".cols", (b, h, w, k * k * channels), x.dtype)
        im2col(xp, k, cols)
        return cols.reshape(b * h * w, k * k * channels)

    def forward(self, x):
        b, h, w, _ = x.shape
        cols = self._conv_cols(x, self.in_channels, "fwd")
        self._cols = cols
        self._in_shape = x.shape
        y = self._bufs.get("fwd.out", (b * h * w, self.out_channels), x.dtype)
        np.matmul(cols, self.weights, out=y)
        y += self.bias
        return y.reshape(b, h, w, self.out_channels)

    def _input_gradient(self, dy):
        # transposed convolution == correlation of dy with the flipped,
        # channel-transposed kernel; reuses the same im2col machinery
        k = self.kernel
        w4 = self.weights.reshape(k, k, self.in_channels, self.out_channels)
        w_rot = w4[::-1, ::-1].transpose(0, 1, 3, 2)  # (k,k,Cout,Cin)
        w_rot = np.ascontiguousarray(w_rot).reshape(k * k * self.out_channels,
                                                    self.in_channels)
        cols = self._conv_cols(dy, self.out_channels, "bwd")
        dx = self._bufs.get("bwd.out", (cols.shape[0], self.in_channels), dy.dtype)
        np.matmul(cols, w_rot, out=dx)
        return dx.reshape(self._in_shape)

    def backward(self, dy):
        b, h, w, _ = dy.shape
        dy_flat = dy.reshape(b * h * w, self.out_channels)
        self.d_weights += self._cols.T @ dy_flat
        self.d_bias += dy_flat.sum(axis=0)
        return self._input_gradient(dy)

    def backward_input(self, dy):
        return self._input_gradient(dy)


class ReLU:
    def __init__(self):
        self._mask = None
        self._bufs = _Buffers()

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x):
        self._mask = self._bufs.get("mask", x.shape, bool)
        np.greater(x, 0, out=self._mask)
        out = self._bufs.get("fwd", x.shape, x.dtype)
        return np.multiply(x, self._mask, out=out)

    def backward(self, dy):
        out = self._bufs.get("bwd", dy.shape, dy.dtype)
        return np.multiply(dy, self._mask, out=out)

    backward_input = backward


class MaxPool2:
    """2x2 max pooling, stride 2; ties route to the first window slot."""

    def __init__(self):
        self._idx = None
        self._shape = None
        self._bufs = _Buffers()

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError("MaxPool2 needs even spatial dims")
        self._shape = x.shape
        out = self._bufs.get("fwd", (b, h // 2, w // 2, c), x.dtype)
        self._idx = self._bufs.get("idx", (b, h // 2, w // 2, c), np.int8)
        maxpool2_forward(np.ascontiguousarray(x), out, self._idx)
        return out

    def backward(self, dy):
        dx = self._bufs.get("bwd", self._shape, dy.dtype)
        maxpool2_backward(np.ascontiguousarray(dy), self._idx, dx)
        return dx

    backward_input = backward


class GlobalAvgPool:
    def __init__(self):
        self._spatial = None

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x):
        self._spatial = x.shape[1:3]
        return x.mean(axis=(1, 2))

    def backward(self, dy):
        h, w = self._spatial
        scale = np.asarray(1.0 / (h * w), dtype=dy.dtype)
        return np.broadcast_to(dy[:, None, None, :] * scale,
                               (dy.shape[0], h, w, dy.shape[1])).copy()

    backward_input = backward


class Dense:
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        scale = np.sqrt(2.0 / (in_features + out_features))
        self.weights = (rng.standard_normal((in_features, out_features)) * scale).astype(dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self.d_weights = np.zeros_like(self.weights)
        self.d_bias = np.zeros_like(self.bias)
        self._x = None

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.d_weights, self.d_bias]

    def forward(self, x):
        self._x = x
        return x @ self.weights + self.bias

    def backward(self, dy):
        self.d_weights += self._x.T @ dy
        self.d_bias += dy.sum(axis=0)
        return dy @ self.weights.T

    def backward_input(self, dy):
        return dy @ self.weights.T


def softmax(logits):
    """Row-wise stable softmax."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class Network:
    """An ordered stack of named layers ending in class logits."""

    def __init__(self, named_layers, arch_id, input_size, class_count,
                 dtype=np.float32):
        self.names = [name for name, _ in named_layers]
        self.layers = [layer for _, layer in named_layers]
        self.arch_id = arch_id
        self.input_size = input_size
        self.class_count = class_count
        self.dtype = np.dtype(dtype)

    def layer(self, name):
        try:
            return self.layers[self.names.index(name)]
        except ValueError:
            raise KeyError(f"no layer named {name!r}") from None

    def conv_layer_names(self):
        return [n for n, l in zip(self.names, self.layers) if isinstance(l, Conv2D)]

    # fixed input centering; [0, 1] images arrive zero-mean-ish at conv1,
    # which conditions He-initialized training far better
    INPUT_OFFSET = 0.5

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[np.newaxis]
        expected = (self.input_size, self.input_size, 3)
        if x.shape[1:] != expected:
            raise ValueError(f"input must be (B,) + {expected}, got {x.shape}")
        return x - np.asarray(self.INPUT_OFFSET, dtype=self.dtype)

    def forward(self, x):
        """Logits for a batch; caches activations for a later backward."""
        x = self._check_input(x)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def predict_proba(self, x):
        return softmax(self.forward(x))

    def zero_grads(self):
        for layer in self.layers:
            for g in layer.grads():
                g[...] = 0.0

    def backward(self, d_logits):
        """Full backward pass; accumulates parameter grads, returns dX."""
        dy = np.asarray(d_logits, dtype=self.dtype)
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def input_gradient(self, x, class_index):
        """Gradient of log softmax_s w.r.t. the input, plus f_s itself.

        ``class_index`` is a column index (int or length-B array).  The
        log-softmax seed (onehot - p) makes the gradient exact even when
        f_s underflows.
        """
        logits = self.forward(x)  # forward centers and validates the input
        p = softmax(logits)
        b = logits.shape[0]
        idx = np.broadcast_to(np.asarray(class_index), (b,))
        seed = -p
        seed[np.arange(b), idx] += 1.0
        dy = seed.astype(self.dtype)
        for layer in reversed(self.layers):
            dy = layer.backward_input(dy)
        # layers hand out recycled scratch space; detach before returning
        return dy.copy(), p[np.arange(b), idx]

    def activation_gradient(self, x, class_index, layer_name):
        """(activation, d pre-softmax logit_k / d activation) at a conv layer."""
        pos = self.names.index(layer_name) if layer_name in self.names else -1
        if pos < 0 or not isinstance(self.layers[pos], Conv2D):
            raise KeyError(f"{layer_name!r} does not name a conv layer")
        x = self._check_input(x)
        act = x
        for layer in self.layers[:pos + 1]:
            act = layer.forward(act)
        out = act
        for layer in self.layers[pos + 1:]:
            out = layer.forward(out)
        b = out.shape[0]
        seed = np.zeros_like(out)
        seed[np.arange(b), np.broadcast_to(np.asarray(class_index), (b,))] = 1.0
        dy = seed
        for layer in reversed(self.layers[pos + 1:]):
            dy = layer.backward_input(dy)
        return act.copy(), dy.copy()

    def parameter_arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def gradient_arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.grads())
        return out

    def set_parameters(self, arrays):
        current = self.parameter_arrays()
        if len(arrays) != len(current):
            raise ValueError("parameter count mismatch")
        for dst, src in zip(current, arrays):
            if dst.shape != src.shape:
                raise ValueError("parameter shape mismatch")
            dst[...] = src.astype(dst.dtype)


# ---------------------------------------------------------------------------
# Windowed evaluation against a fixed base image
# ---------------------------------------------------------------------------

def _clip(win, size):
    return (max(win[0], 0), min(win[1], size))


def _expand(win, halo, size):
    return _clip((win[0] - halo, win[1] + halo), size)


def _align_even(win, size):
    return _clip((win[0] - (win[0] % 2), win[1] + (win[1] % 2)), size)


class WindowedGradient:
    """Exact class-logit input gradients restricted to small windows.

    The doodle only influences the raster gradient inside each stroke's
    pixel window, so after a normal (full) forward pass the backward
    walk can stay inside the shrinking cone of layer windows above each
    rect.  The GAP head's gradient is spatially uniform, which seeds the
    cone exactly; transposed-conv patches use a one-pixel zero halo
    whose possibly-stale ring is cropped away at the next level.
    """

    def __init__(self, network):
        self.net = network
        if not isinstance(network.layers[-1], Dense) or \
                not isinstance(network.layers[-2], GlobalAvgPool):
            raise ValueError("WindowedGradient expects conv blocks + GAP + head")
        self.blocks = []
        idx = 0
        while idx + 2 < len(network.layers) - 2:
            conv, relu, pool = network.layers[idx:idx + 3]
            if not (isinstance(conv, Conv2D) and isinstance(relu, ReLU)
                    and isinstance(pool, MaxPool2) and conv.kernel == 3):
                raise ValueError("WindowedGradient expects 3x3 conv/relu/pool blocks")
            self.blocks.append((conv, relu, pool))
            idx += 3
        self.head = network.layers[-1]
        spatial = network.input_size // (2 ** len(self.blocks))
        self.final_spatial = spatial * spatial
        self._bufs = _Buffers()

    def _plan(self, rect):
        """Per-level (conv-out window, pool-out window) above one rect."""
        size = self.net.input_size
        wy = _clip((rect[0], rect[1]), size)
        wx = _clip((rect[2], rect[3]), size)
        cy, cx = _expand(wy, 1, size), _expand(wx, 1, size)
        plans = []
        level = size
        for _ in self.blocks:
            oy, ox = _align_even(cy, level), _align_even(cx, level)
            py, px = (oy[0] // 2, oy[1] // 2), (ox[0] // 2, ox[1] // 2)
            plans.append((oy, ox, py, px))
            level //= 2
            cy, cx = _expand(py, 1, level), _expand(px, 1, level)
        return (wy, wx), plans

    def input_gradient(self, x, class_index, rects):
        """log-softmax input gradients on each rect, plus f_s.

        Runs one full forward (so the layers hold this batch's masks and
        pooling choices), then one windowed backward per rect.  Returns
        ([(dX_patch, (h0, h1, w0, w1)), ...], f_s).
        """
        net = self.net
        logits = net.forward(x)
        p = softmax(logits)
        b = logits.shape[0]
        idx = np.broadcast_to(np.asarray(class_index), (b,))
        seed = -p
        seed[np.arange(b), idx] += 1.0
        d_gap = (seed @ self.head.weights.T.astype(np.float64)) \
            / self.final_spatial
        out = [self._backward_rect(rect, d_gap, b) for rect in rects]
        return out, p[np.arange(b), idx]

    def _backward_rect(self, rect, d_gap, b):
        net = self.net
        (wy, wx), plans = self._plan(rect)
        oy, ox, py, px = plans[-1]
        dy = np.broadcast_to(
            d_gap[:, None, None, :].astype(net.dtype),
            (b, py[1] - py[0], px[1] - px[0], d_gap.shape[1])).copy()

        for i in range(len(self.blocks) - 1, -1, -1):
            conv, relu, pool = self.blocks[i]
            oy, ox, py, px = plans[i]
            hh, ww = oy[1] - oy[0], ox[1] - ox[0]
            tag = f"r{i}."
            idx_patch = np.ascontiguousarray(
                pool._idx[:, py[0]:py[1], px[0]:px[1], :])
            dx_pool = self._bufs.get(tag + "pool", (b, hh, ww, dy.shape[3]),
                                     dy.dtype)
            maxpool2_backward(np.ascontiguousarray(dy), idx_patch, dx_pool)
            np.multiply(dx_pool, relu._mask[:, oy[0]:oy[1], ox[0]:ox[1], :],
                        out=dx_pool)
            padded = self._bufs.get(tag + "pad",
                                    (b, hh + 2, ww + 2, conv.out_channels),
                                    dy.dtype, zero=True)  # border stays zero
            padded[:, 1:-1, 1:-1, :] = dx_pool
            k = conv.kernel
            w4 = conv.weights.reshape(k, k, conv.in_channels, conv.out_channels)
            w_rot = np.ascontiguousarray(
                w4[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(
                    k * k * conv.out_channels, conv.in_channels)
            cols = self._bufs.get(tag + "cols",
                                  (b, hh, ww, k * k * conv.out_channels),
                                  dy.dtype)
            im2col(padded, k, cols)
            gemm = self._bufs.get(tag + "out", (b * hh * ww, conv.in_channels),
                                  dy.dtype)
            np.matmul(cols.reshape(b * hh * ww, -1), w_rot, out=gemm)
            dy = gemm.reshape(b, hh, ww, conv.in_channels)
            if i > 0:
                _, _, ppy, ppx = plans[i - 1]
                dy = dy[:, ppy[0] - oy[0]:ppy[1] - oy[0],
                        ppx[0] - ox[0]:ppx[1] - ox[0], :]
        dy = dy[:, wy[0] - plans[0][0][0]:wy[1] - plans[0][0][0],
                wx[0] - plans[0][1][0]:wx[1] - plans[0][1][0], :]
        return np.ascontiguousarray(dy), (wy[0], wy[1], wx[0], wx[1])
