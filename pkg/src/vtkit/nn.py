"""Numerical core of the CNN: layer passes, loss, SGD update and gradient checking.

Tensors are plain numpy arrays. Images and feature maps use the
``batch x channels x height x width`` layout; parameters are float32 unless a
caller explicitly converts a network (gradient checking runs in float64).
"""

from __future__ import annotations

import copy

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ParameterError, ShapeError, StateError

DTYPE = np.float32


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _check_conv_shapes(x, kernels, bias):
    if x.ndim != 4:
        raise ShapeError(f"input must be B x C x H x W, got ndim={x.ndim}")
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be M x C x k x k, got ndim={kernels.ndim}")
    m, c, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError(f"kernel height {kh} != kernel width {kw}")
    if kh % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kh}")
    if x.shape[1] != c:
        raise ShapeError(f"input channels {x.shape[1]} != kernel channels {c}")
    if bias.shape != (m,):
        raise ShapeError(f"bias length {bias.shape} != output maps {m}")


def im2col(x, k):
    """Same-padded patches of ``x`` as a ``(B*H*W) x (C*k*k)`` matrix."""
    b, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B C H W k k
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * k * k)


def col2im(cols, x_shape, k):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back onto the image."""
    b, c, h, w = x_shape
    p = (k - 1) // 2
    patches = cols.reshape(b, h, w, c, k, k)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[:, :, dy:dy + h, dx:dx + w] += patches[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
    return out[:, :, p:p + h, p:p + w]


def conv2d_forward(x, kernels, bias):
    """Stride-1 convolution with zero "same" padding; spatial size is preserved."""
    _check_conv_shapes(x, kernels, bias)
    out, _ = _conv2d_forward_cols(x, kernels, bias)
    return out


def _conv2d_forward_cols(x, kernels, bias):
    b, _, h, w = x.shape
    m, _, k, _ = kernels.shape
    cols = im2col(x, k)
    out = cols @ kernels.reshape(m, -1).T
    out += bias
    return np.ascontiguousarray(out.reshape(b, h, w, m).transpose(0, 3, 1, 2)), cols


def conv2d_backward(grad_out, x_shape, kernels, cols, need_input_grad=True):
    """Exact gradients of :func:`conv2d_forward`.

    Returns ``(grad_in, grad_kernels, grad_bias)``; ``grad_in`` is ``None`` when
    ``need_input_grad`` is false (the first layer never needs it).
    """
    m, c, k, _ = kernels.shape
    expected = (x_shape[0], m, x_shape[2], x_shape[3])
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, m)
    grad_k = (g2.T @ cols).reshape(kernels.shape)
    grad_b = g2.sum(axis=0)
    grad_in = None
    if need_input_grad:
        grad_in = col2im(g2 @ kernels.reshape(m, -1), x_shape, k)
    return grad_in, grad_k, grad_b


# ---------------------------------------------------------------------------
# Pooling, activation, dropout, dense
# ---------------------------------------------------------------------------


def _pool_windows(x):
    b, c, h, w = x.shape
    r = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return r.reshape(b, c, h // 2, w // 2, 4)


def maxpool2_forward(x):
    """2x2 max pooling over disjoint windows.

    Returns the pooled tensor and the argmax mask (row-major window index of
    the winner, first maximum on ties).
    """
    if x.ndim != 4:
        raise ShapeError(f"input must be B x C x H x W, got ndim={x.ndim}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"height {x.shape[2]} and width {x.shape[3]} must both be even")
    r = _pool_windows(x)
    mask = r.argmax(axis=-1)
    out = np.take_along_axis(r, mask[..., None], axis=-1)[..., 0]
    return out, mask


def maxpool2_backward(grad_out, mask):
    if grad_out.shape != mask.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != mask shape {mask.shape}")
    b, c, h, w = grad_out.shape
    z = np.zeros((b, c, h, w, 4), dtype=grad_out.dtype)
    np.put_along_axis(z, mask[..., None], grad_out[..., None], axis=-1)
    return z.reshape(b, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h, 2 * w)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, cached_input):
    return grad_out * (cached_input > 0)


def dropout(x, rate, mode, rng=None):
    """Inverted dropout. Returns ``(output, kept_mask)``; the mask is ``None`` at inference."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x, None
    if rng is None:
        raise ParameterError("train-mode dropout needs an explicit rng")
    kept = rng.random(x.shape, dtype=np.float32) >= rate
    return x * kept * x.dtype.type(1.0 / (1.0 - rate)), kept


def dense_forward(x, weights, bias):
    if x.ndim != 2:
        raise ShapeError(f"dense input must be B x N, got ndim={x.ndim}")
    if weights.shape[1] != x.shape[1]:
        raise ShapeError(f"input features {x.shape[1]} != weight columns {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias length {bias.shape} != output units {weights.shape[0]}")
    return x @ weights.T + bias


def dense_backward(grad_out, x, weights):
    """Returns ``(grad_in, grad_weights, grad_bias)``."""
    if grad_out.shape != (x.shape[0], weights.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} != ({x.shape[0]}, {weights.shape[0]})")
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy of a softmax over ``logits``.

    Returns ``(loss, probs, grad_logits)`` with ``grad = (probs - onehot) / B``.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be B x K, got ndim={logits.ndim}")
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels length {labels.shape} != batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(b)
    log_p = z[rows, labels] - np.log(s[:, 0])
    loss = float(-np.mean(log_p, dtype=np.float64))
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= b
    return loss, probs, grad


def sgd_step(params, grads, lr):
    """Plain SGD update ``w <- w - lr * g`` applied in place.

    The whole step is refused if any gradient is non-finite.
    """
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} != gradient shape {g.shape}")
        bad = ~np.isfinite(g)
        if bad.any():
            raise NonFiniteError(
                f"gradient {i} (shape {g.shape}) has {int(bad.sum())} non-finite entries; step aborted"
            )
    for p, g in zip(params, grads):
        p -= p.dtype.type(lr) * g


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, weights, bias):
        _check_conv_shapes(np.empty((1, weights.shape[1], 1, 1)), weights, bias)
        self.weights = weights
        self.bias = bias
        self.need_input_grad = True
        self.grad_weights = np.zeros_like(weights)
        self.grad_bias = np.zeros_like(bias)
        self._cols = None
        self._x_shape = None

    @property
    def kernel_size(self):
        return self.weights.shape[2]

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.grad_weights, self.grad_bias]

    def forward(self, x, train=False, rng=None):
        _check_conv_shapes(x, self.weights, self.bias)
        out, cols = _conv2d_forward_cols(x, self.weights, self.bias)
        if train:
            self._cols, self._x_shape = cols, x.shape
        else:
            self._cols = self._x_shape = None
        return out

    def backward(self, grad_out):
        if self._cols is None:
            raise StateError("conv backward called without a training-mode forward")
        grad_in, self.grad_weights, self.grad_bias = conv2d_backward(
            grad_out, self._x_shape, self.weights, self._cols, self.need_input_grad
        )
        self._cols = None
        return grad_in

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.weights.shape[1]:
            raise ShapeError(f"conv expects {self.weights.shape[1]} channels, got {c}")
        return (self.weights.shape[0], h, w)


class MaxPool2(Layer):
    kind = "maxpool"

    def __init__(self):
        self._mask = None

    def forward(self, x, train=False, rng=None):
        out, mask = maxpool2_forward(x)
        self._mask = mask if train else None
        return out

    def backward(self, grad_out):
        if self._mask is None:
            raise StateError("maxpool backward called without a training-mode forward")
        g = maxpool2_backward(grad_out, self._mask)
        self._mask = None
        return g

    def output_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"pooling needs even height/width, got {h}x{w}")
        return (c, h // 2, w // 2)


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._x = None

    def forward(self, x, train=False, rng=None):
        self._x = x if train else None
        return relu(x)

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("relu backward called without a training-mode forward")
        g = relu_backward(grad_out, self._x)
        self._x = None
        return g


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate=0.5):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._kept = None
        self._armed = False

    def forward(self, x, train=False, rng=None):
        out, self._kept = dropout(x, self.rate, "train" if train else "infer", rng)
        self._armed = train
        return out

    def backward(self, grad_out):
        if not self._armed:
            raise StateError("dropout backward called without a training-mode forward")
        self._armed = False
        if self._kept is None:
            return grad_out
        return grad_out * self._kept * grad_out.dtype.type(1.0 / (1.0 - self.rate))


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape if train else None
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        if self._shape is None:
            raise StateError("flatten backward called without a training-mode forward")
        g = grad_out.reshape(self._shape)
        self._shape = None
        return g

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    kind = "dense"

    def __init__(self, weights, bias):
        if bias.shape != (weights.shape[0],):
            raise ShapeError(f"bias length {bias.shape} != output units {weights.shape[0]}")
        self.weights = weights
        self.bias = bias
        self.grad_weights = np.zeros_like(weights)
        self.grad_bias = np.zeros_like(bias)
        self._x = None

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.grad_weights, self.grad_bias]

    def forward(self, x, train=False, rng=None):
        out = dense_forward(x, self.weights, self.bias)
        self._x = x if train else None
        return out

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("dense backward called without a training-mode forward")
        g, self.grad_weights, self.grad_bias = dense_backward(grad_out, self._x, self.weights)
        self._x = None
        return g

    def output_shape(self, shape):
        if shape != (self.weights.shape[1],):
            raise ShapeError(f"dense expects ({self.weights.shape[1]},) input, got {shape}")
        return (self.weights.shape[0],)


class Network:
    """Ordered layer stack producing class logits; the softmax lives in the loss."""

    def __init__(self, layers):
        self.layers = list(layers)
        for layer in self.layers:
            if layer.params():
                # the first parameterised layer never needs a gradient w.r.t. the image
                if isinstance(layer, Conv2D):
                    layer.need_input_grad = False
                break

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    @property
    def n_params(self):
        return sum(p.size for p in self.params())

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def loss_and_grads(self, x, labels, rng=None):
        """Training-mode forward + backward. Returns ``(loss, probs)``; grads stay on the layers."""
        logits = self.forward(x, train=True, rng=rng)
        loss, probs, g = softmax_xent(logits, labels)
        self.backward(g)
        return loss, probs

    def loss(self, x, labels, rng=None, train=True):
        logits = self.forward(x, train=train, rng=rng)
        loss, _, _ = softmax_xent(logits, labels)
        return loss

    def probabilities(self, x):
        return softmax(self.forward(x, train=False))

    def shapes(self, input_shape):
        """Per-layer output shapes for a single ``C x H x W`` input."""
        out = [tuple(input_shape)]
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    def astype(self, dtype):
        """Deep copy with every parameter cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for layer in clone.layers:
            for name in ("weights", "bias"):
                if hasattr(layer, name):
                    setattr(layer, name, getattr(layer, name).astype(dtype))
            for name in ("grad_weights", "grad_bias"):
                if hasattr(layer, name):
                    setattr(layer, name, getattr(layer, name).astype(dtype))
        return clone

    def copy(self):
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def gradient_check(network, x, labels, epsilon=1e-5, seed=0, scale_floor=0.0):
    """Max relative error between backprop and central finite differences.

    Backprop runs in the network's own precision; the finite differences run on
    a float64 copy. Dropout masks are frozen by reseeding ``seed`` for every
    evaluation. The error for one entry is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor = scale_floor * max|n|`` over all entries; the default of 0
    gives the plain relative error (exact zeros on both sides count as 0).
    """
    network.loss_and_grads(x, labels, rng=np.random.default_rng(seed))
    analytic = [g.astype(np.float64) for g in network.grads()]

    net64 = network.astype(np.float64)
    x64 = x.astype(np.float64)
    numeric = []
    for p in net64.params():
        num = np.zeros(p.shape)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = net64.loss(x64, labels, rng=np.random.default_rng(seed))
            flat[i] = orig - epsilon
            down = net64.loss(x64, labels, rng=np.random.default_rng(seed))
            flat[i] = orig
            num.reshape(-1)[i] = (up - down) / (2 * epsilon)
        numeric.append(num)

    scale = max((float(np.abs(n).max()) for n in numeric if n.size), default=0.0)
    floor = max(scale_floor * scale, np.finfo(np.float64).tiny)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        err = np.abs(a - n) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
