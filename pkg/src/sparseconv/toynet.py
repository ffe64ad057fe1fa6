"""Minimal trainable CNN: conv+ReLU stack, global average pool, one dense
layer, softmax cross-entropy. Pure numpy forward/backward so gradients can be
checked against finite differences at f64.

This is the desk-scale stand-in network used by the pruning loop and the
quantization fidelity checks.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError, TrainingError
from .shapes import pad_input


class ToyNet:
    """Small CNN classifier over NCHW images.

    Parameters are held in a flat dict: conv{i}.w (C_out,C_in,k,k),
    conv{i}.b, fc.w (classes, C_last), fc.b. Conv layers use stride 1 and
    'same' padding (k//2) followed by ReLU.
    """

    def __init__(self, in_channels=1, image_size=12, conv_channels=(8, 8),
                 kernel_size=3, num_classes=4, dtype=np.float32, seed=0):
        self.in_channels = in_channels
        self.image_size = image_size
        self.conv_channels = tuple(conv_channels)
        self.kernel_size = kernel_size
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        c_prev = in_channels
        for i, c_out in enumerate(self.conv_channels):
            fan_in = c_prev * kernel_size * kernel_size
            self.params[f"conv{i}.w"] = (
                rng.standard_normal((c_out, c_prev, kernel_size, kernel_size))
                * np.sqrt(2.0 / fan_in)
            ).astype(self.dtype)
            self.params[f"conv{i}.b"] = np.zeros(c_out, dtype=self.dtype)
            c_prev = c_out
        self.params["fc.w"] = (
            rng.standard_normal((num_classes, c_prev)) * np.sqrt(2.0 / c_prev)
        ).astype(self.dtype)
        self.params["fc.b"] = np.zeros(num_classes, dtype=self.dtype)

    # ---- parameter plumbing -------------------------------------------------

    @property
    def weight_names(self) -> list[str]:
        """Prunable weight tensors (biases are never pruned)."""
        return [f"conv{i}.w" for i in range(len(self.conv_channels))] + ["fc.w"]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy_weights(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def set_weights(self, weights: dict[str, np.ndarray]) -> None:
        for k, v in weights.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ShapeError(f"weight {k} does not match this architecture")
            self.params[k] = v.astype(self.dtype, copy=True)

    # ---- forward / backward -------------------------------------------------

    def _conv_forward(self, x, w, b):
        c_out, c_in, kk, _ = w.shape
        pad = kk // 2
        xp = pad_input(x, pad)
        n, _, hp, wp = xp.shape
        e, f = hp - kk + 1, wp - kk + 1
        sn, sc, sh, sw = xp.strides
        cols = np.lib.stride_tricks.as_strided(
            xp, (n, c_in, kk, kk, e, f), (sn, sc, sh, sw, sh, sw), writeable=False
        ).reshape(n, c_in * kk * kk, e * f)
        out = np.matmul(w.reshape(c_out, -1), cols) + b[:, None]
        return out.reshape(n, c_out, e, f), (xp.shape, cols)

    def _conv_backward(self, dout, w, cache):
        xp_shape, cols = cache
        c_out, c_in, kk, _ = w.shape
        n = dout.shape[0]
        e, f = dout.shape[2], dout.shape[3]
        d2 = dout.reshape(n, c_out, e * f)
        dw = np.einsum("nkp,ncp->kc", d2, cols).reshape(w.shape)
        db = d2.sum(axis=(0, 2))
        dcols = np.einsum("kc,nkp->ncp", w.reshape(c_out, -1), d2)
        dcols = dcols.reshape(n, c_in, kk, kk, e, f)
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        for r in range(kk):
            for s in range(kk):
                dxp[:, :, r:r + e, s:s + f] += dcols[:, :, r, s]
        pad = kk // 2
        if pad:
            dxp = dxp[:, :, pad:-pad, pad:-pad]
        return dxp, dw, db

    def forward(self, x: np.ndarray, keep_cache: bool = False):
        x = np.asarray(x, dtype=self.dtype)
        caches = []
        a = x
        for i in range(len(self.conv_channels)):
            z, cache = self._conv_forward(a, self.params[f"conv{i}.w"],
                                          self.params[f"conv{i}.b"])
            a = np.maximum(z, 0)
            caches.append((cache, z))
        feats = a.mean(axis=(2, 3))
        logits = feats @ self.params["fc.w"].T + self.params["fc.b"]
        if keep_cache:
            return logits, (caches, a, feats)
        return logits

    def loss_and_grads(self, x, y):
        """Mean softmax cross-entropy and gradients for every parameter."""
        logits, (caches, a_last, feats) = self.forward(x, keep_cache=True)
        n = len(y)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(n), y].mean())
        probs = np.exp(logp)
        dlogits = probs
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        grads = {
            "fc.w": dlogits.T @ feats,
            "fc.b": dlogits.sum(axis=0),
        }
        dfeats = dlogits @ self.params["fc.w"]
        hw = a_last.shape[2] * a_last.shape[3]
        da = np.broadcast_to(
            dfeats[:, :, None, None] / hw, a_last.shape
        ).astype(self.dtype, copy=True)
        for i in reversed(range(len(self.conv_channels))):
            cache, z = caches[i]
            dz = da * (z > 0)
            da, dw, db = self._conv_backward(dz, self.params[f"conv{i}.w"], cache)
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db
        return loss, grads

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))


def train_batches(net: ToyNet, x, y, steps: int, lr: float, batch_size: int,
                  masks: dict[str, np.ndarray] | None, rng: np.random.Generator,
                  grad_stats: dict[str, np.ndarray] | None = None,
                  ema_decay: float = 0.9):
    """SGD for `steps` minibatches with mask-respecting updates.

    Weight updates apply only where mask=1 and masked positions are re-zeroed
    after every step. Returns the per-weight |gradient| EMA (decay
    `ema_decay`), updated in place when `grad_stats` is passed in.
    """
    masks = masks or {}
    if grad_stats is None:
        grad_stats = {}
    n = len(y)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        loss, grads = net.loss_and_grads(x[idx], y[idx])
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss}")
        for name, g in grads.items():
            if name in masks:
                g = g * masks[name]
            net.params[name] -= (lr * g).astype(net.dtype)
            if name in masks:
                net.params[name] *= masks[name]
        for name in net.weight_names:
            mag = np.abs(grads[name])
            if name in grad_stats:
                grad_stats[name] = ema_decay * grad_stats[name] + (1 - ema_decay) * mag
            else:
                grad_stats[name] = mag.astype(np.float64)
    return net, grad_stats
