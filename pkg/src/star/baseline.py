"""Plain CNN baseline: the no-attention reference point for ablations.

Architecture (fixed): the window is a one-channel (time x channel) image.
conv 8@3x3 -> relu -> 2x2 mean pool -> conv 16@3x3 -> relu -> 2x2 mean pool
-> flatten -> linear -> softmax, trained by cross-entropy with the same SGD
and clipping as the main model. Convolutions are valid (no padding), stride
1, via im2col so the kernels live in ordinary ParamGroups.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .metrics import MetricsReport, compute_metrics
from .numerics import (
    ParamGroup,
    clip_gradients,
    cross_entropy_mean,
    cross_entropy_mean_backward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    sgd_step,
    softmax,
    softmax_backward,
    xavier_param,
)

KERNEL = 3
CONV1_FILTERS = 8
CONV2_FILTERS = 16


def im2col(x: np.ndarray, kh: int, kw: int):
    """(B, C, H, W) -> (B, out_h*out_w, C*kh*kw) patch matrix, valid padding."""
    b, c, h, w = x.shape
    out_h, out_w = h - kh + 1, w - kw + 1
    s0, s1, s2, s3 = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, (b, c, out_h, out_w, kh, kw), (s0, s1, s2, s3, s2, s3))
    cols = patches.transpose(0, 2, 3, 1, 4, 5).reshape(b, out_h * out_w, c * kh * kw)
    return np.ascontiguousarray(cols), out_h, out_w


def col2im(d_cols: np.ndarray, x_shape, kh: int, kw: int) -> np.ndarray:
    b, c, h, w = x_shape
    out_h, out_w = h - kh + 1, w - kw + 1
    dx = np.zeros(x_shape)
    d = d_cols.reshape(b, out_h, out_w, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + out_h, j:j + out_w] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx


def conv2d_forward(p: ParamGroup, x: np.ndarray):
    cols, out_h, out_w = im2col(x, KERNEL, KERNEL)
    out = linear_forward(p, cols)                       # (B, out_h*out_w, F)
    out = out.transpose(0, 2, 1).reshape(x.shape[0], p.out_width, out_h, out_w)
    return out, cols


def conv2d_backward(p: ParamGroup, x_shape, cols: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    b, f = d_out.shape[0], d_out.shape[1]
    d_flat = d_out.reshape(b, f, -1).transpose(0, 2, 1)
    d_cols = linear_backward(p, cols, d_flat)
    return col2im(d_cols, x_shape, KERNEL, KERNEL)


def pool2_forward(x: np.ndarray) -> np.ndarray:
    """2x2 mean pool, stride 2; trailing odd rows/cols are dropped."""
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2).mean(axis=(3, 5))


def pool2_backward(x_shape, d_out: np.ndarray) -> np.ndarray:
    b, c, h, w = x_shape
    h2, w2 = h // 2, w // 2
    dx = np.zeros(x_shape)
    spread = np.repeat(np.repeat(d_out, 2, axis=2), 2, axis=3) / 4.0
    dx[:, :, :2 * h2, :2 * w2] = spread
    return dx


class CnnBaseline:
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        k, p = cfg.window_len, cfg.n_channels
        h1, w1 = (k - 2) // 2, (p - 2) // 2
        h2, w2 = (h1 - 2) // 2, (w1 - 2) // 2
        if h2 < 1 or w2 < 1:
            raise ValueError(f"window {k}x{p} is too small for the baseline CNN")
        self.cfg = cfg
        self.flat_width = CONV2_FILTERS * h2 * w2
        self.conv1 = xavier_param("cnn_conv1", CONV1_FILTERS, KERNEL * KERNEL, rng)
        self.conv2 = xavier_param("cnn_conv2", CONV2_FILTERS, CONV1_FILTERS * KERNEL * KERNEL, rng)
        self.head = xavier_param("cnn_head", cfg.n_classes, self.flat_width, rng)

    def params(self):
        return [self.conv1, self.conv2, self.head]

    def forward(self, x: np.ndarray):
        """x: (B, window_len, n_channels) -> (probs (B, C), cache)."""
        x1 = x[:, None, :, :]
        a1, cols1 = conv2d_forward(self.conv1, x1)
        r1 = relu_forward(a1)
        p1 = pool2_forward(r1)
        a2, cols2 = conv2d_forward(self.conv2, p1)
        r2 = relu_forward(a2)
        p2 = pool2_forward(r2)
        flat = p2.reshape(x.shape[0], -1)
        logits = linear_forward(self.head, flat)
        probs = softmax(logits)
        cache = (x1.shape, cols1, a1, r1.shape, a2, cols2, p1.shape, r2.shape, flat, probs)
        return probs, cache

    def backward(self, cache, d_probs: np.ndarray):
        x1_shape, cols1, a1, r1_shape, a2, cols2, p1_shape, r2_shape, flat, probs = cache
        d_logits = softmax_backward(probs, d_probs)
        d_flat = linear_backward(self.head, flat, d_logits)
        b = d_flat.shape[0]
        h2, w2 = r2_shape[2] // 2, r2_shape[3] // 2
        d_p2 = d_flat.reshape(b, CONV2_FILTERS, h2, w2)
        d_r2 = pool2_backward(r2_shape, d_p2)
        d_a2 = relu_backward(a2, d_r2)
        d_p1 = conv2d_backward(self.conv2, p1_shape, cols2, d_a2)
        d_r1 = pool2_backward(r1_shape, d_p1)
        d_a1 = relu_backward(a1, d_r1)
        conv2d_backward(self.conv1, x1_shape, cols1, d_a1)

    def predict(self, windows) -> np.ndarray:
        x = np.stack([w.values for w in windows])
        probs, _ = self.forward(x)
        return np.argmax(probs, axis=1)


def train_baseline(model: CnnBaseline, cfg: RunConfig, windows, epochs: int | None = None):
    """Mini-batch cross-entropy training; returns per-epoch (loss, accuracy)."""
    epochs = cfg.epochs if epochs is None else epochs
    labels = np.array([w.label for w in windows])
    values = np.stack([w.values for w in windows])
    history = []
    for epoch in range(epochs):
        order = np.random.default_rng((cfg.seed, 11, epoch)).permutation(len(windows))
        losses = []
        hits = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = values[idx], labels[idx]
            for p in model.params():
                p.zero_grad()
            probs, cache = model.forward(x)
            losses.append(cross_entropy_mean(probs, y))
            hits += int((np.argmax(probs, axis=1) == y).sum())
            model.backward(cache, cross_entropy_mean_backward(probs, y))
            clip_gradients(model.params(), cfg.grad_clip)
            sgd_step(model.params(), cfg.learning_rate)
        history.append((epoch, float(np.mean(losses)), hits / len(windows)))
    return history


def cnn_baseline_train_eval(train_windows, test_windows, cfg: RunConfig,
                            epochs: int | None = None) -> MetricsReport:
    """Train the fixed CNN on the train split and score the test split."""
    rng = np.random.default_rng((cfg.seed, 10))
    model = CnnBaseline(cfg, rng)
    train_baseline(model, cfg, train_windows, epochs=epochs)
    preds = model.predict(test_windows)
    return compute_metrics([w.label for w in test_windows], preds, cfg.n_classes)
