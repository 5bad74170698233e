"""Layer operations with fused backward rules.

Image tensors are laid out ``B x C x H x W``. Convolutions use the
cross-correlation convention (no kernel flip) and zero padding.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..autograd import Tensor, _sigmoid, add, gather_rows, getitem, make_op, matmul, stack, transpose
from ..errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Strided k x k windows of a padded map, returned as (B, Ho, Wo, C, k, k)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _scatter_windows(cols: np.ndarray, out: np.ndarray, k: int, s: int) -> None:
    """Accumulate (B, Ho, Wo, C, k, k) window contributions into ``out`` (B, C, Hp, Wp)."""
    _, ho, wo = cols.shape[:3]
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (B,C,H,W) with ``weight`` (O,C,k,k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv2d weight {weight.shape} does not match input channels {c}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be {ho}x{wo} for input {h}x{w}, k={k}, s={stride}, p={padding}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _windows(xp, k, stride, ho, wo).reshape(b * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(b, ho, wo, c, k, k)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            _scatter_windows(dcols, dxp, k, stride)
            gx = dxp[:, :, p : p + h, p : p + w] if p else dxp
            gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward, "conv2d")


def deconv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int | tuple[int, int] = 0,
) -> Tensor:
    """Transposed convolution of ``x`` (B,C,H,W) with ``weight`` (C,O,k,k).

    ``padding`` may be ``(pad_h, pad_w)``; output height is
    ``(H - 1) * stride - 2 * pad_h + k``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"deconv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    cw, o, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeError(f"deconv2d weight {weight.shape} does not match input channels {c}")
    ph, pw = _pair(padding)
    s = stride
    ho, wo = deconv_output_size(h, k, s, ph), deconv_output_size(w, k, s, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"deconv2d output would be {ho}x{wo} for input {h}x{w}, k={k}, s={s}, p=({ph},{pw})")
    hf, wf = (h - 1) * s + k, (w - 1) * s + k
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = weight.data.reshape(c, o * k * k)
    full = np.zeros((b, o, hf, wf), dtype=x.dtype)
    _scatter_windows((xm @ wmat).reshape(b, h, w, o, k, k), full, k, s)
    out = full[:, :, ph : ph + ho, pw : pw + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((b, o, hf, wf), dtype=g.dtype)
        gfull[:, :, ph : ph + ho, pw : pw + wo] = g
        gcols = _windows(gfull, k, s, h, w).reshape(b * h * w, o * k * k)
        gx = (gcols @ wmat.T).reshape(b, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (None if gx is None else np.ascontiguousarray(gx)), gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward, "deconv2d")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over (B,C) or (B,C,H,W) inputs, per channel.

    Train mode normalizes with biased batch statistics and updates the running
    buffers in place (running variance uses the unbiased estimate). Eval mode
    normalizes with the running buffers.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects rank 2 or 4 input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm affine params must have shape ({c},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    n = x.data.size // c
    if training:
        if n == 1:
            raise ShapeError("batchnorm in train mode needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            sum_d = dxhat.sum(axis=axes).reshape(bshape)
            sum_dx = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (inv_std.reshape(bshape) / n) * (n * dxhat - sum_d - xhat * sum_dx)
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx.astype(x.dtype), ggamma, gbeta

    return make_op(out.astype(x.dtype), (x, gamma, beta), backward, "batchnorm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Window max; padded cells never win. Gradient goes to the first (lowest-index) max."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects rank-4 input, got {x.shape}")
    b, c, h, w = x.shape
    k, s, p = kernel, stride, padding
    ho, wo = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d output would be {ho}x{wo} for input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x.data
    win = _windows(xp, k, s, ho, wo).reshape(b, ho, wo, c, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0].transpose(0, 3, 1, 2)

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.where(arg == i * k + j, gt, 0).transpose(0, 3, 1, 2)
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += contrib
        gx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        return (np.ascontiguousarray(gx),)

    return make_op(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x (B,F), weight (F',F)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
        out = add(out, bias)
    return out


# -- recurrent ----------------------------------------------------------------


def _lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One LSTM step returning ``[h' | c']`` concatenated along axis 1."""
    hs = h.shape[1]
    if x.ndim != 2 or h.ndim != 2 or c.shape != h.shape:
        raise ShapeError(f"lstm_step: bad state shapes x={x.shape} h={h.shape} c={c.shape}")
    if w_ih.shape != (4 * hs, x.shape[1]) or w_hh.shape != (4 * hs, hs):
        raise ShapeError(f"lstm_step: weights {w_ih.shape}/{w_hh.shape} do not match input {x.shape[1]}, hidden {hs}")
    if b_ih.shape != (4 * hs,) or b_hh.shape != (4 * hs,):
        raise ShapeError("lstm_step: biases must have shape (4*hidden,)")
    pre = x.data @ w_ih.data.T + h.data @ w_hh.data.T + (b_ih.data + b_hh.data)
    i = _sigmoid(pre[:, :hs])
    f = _sigmoid(pre[:, hs : 2 * hs])
    g = np.tanh(pre[:, 2 * hs : 3 * hs])
    o = _sigmoid(pre[:, 3 * hs :])
    c_new = f * c.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(grad):
        gh, gc = grad[:, :hs], grad[:, hs:]
        dc = gc + gh * o * (1 - tc * tc)
        dpre = np.concatenate(
            [
                dc * g * i * (1 - i),
                dc * c.data * f * (1 - f),
                dc * i * (1 - g * g),
                gh * tc * o * (1 - o),
            ],
            axis=1,
        )
        db = dpre.sum(axis=0)
        return (
            dpre @ w_ih.data,
            dpre @ w_hh.data,
            dc * f,
            dpre.T @ x.data,
            dpre.T @ h.data,
            db,
            db.copy(),
        )

    out = np.concatenate([h_new, c_new], axis=1)
    return make_op(out, (x, h, c, w_ih, w_hh, b_ih, b_hh), backward, "lstm_step")


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> tuple[Tensor, Tensor]:
    """LSTM cell with gate order (input, forget, cell, output)."""
    hs = h.shape[1]
    state = _lstm_cell(x, h, c, w_ih, w_hh, b_ih, b_hh)
    return getitem(state, (slice(None), slice(0, hs))), getitem(state, (slice(None), slice(hs, 2 * hs)))


def lstm_forward(
    seq: Tensor,
    layers: Sequence[tuple[Tensor, Tensor, Tensor, Tensor]],
    lengths: Sequence[int],
) -> tuple[list[Tensor], Tensor]:
    """Run a stacked LSTM over ``seq`` (T,B,I) from zero initial state.

    ``layers`` holds ``(w_ih, w_hh, b_ih, b_hh)`` per layer. Returns the
    top-layer hidden state at every time step and, per batch item, the
    top-layer hidden state at time ``lengths[i] - 1``. Rows are independent,
    so padded steps after an item's length never reach its returned state.
    """
    if seq.ndim != 3:
        raise ShapeError(f"lstm_forward expects (T, B, I), got {seq.shape}")
    t_max, bsz, _ = seq.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (bsz,):
        raise ShapeError(f"lengths must have {bsz} entries, got {lengths.shape}")
    if (lengths < 1).any():
        raise ShapeError("lstm_forward: sequence length must be >= 1")
    if (lengths > t_max).any():
        raise ShapeError(f"lstm_forward: length exceeds padded size {t_max}")
    inputs = [getitem(seq, t) for t in range(t_max)]
    for w_ih, w_hh, b_ih, b_hh in layers:
        hs = w_hh.shape[1]
        h = Tensor(np.zeros((bsz, hs), dtype=seq.dtype))
        c = Tensor(np.zeros((bsz, hs), dtype=seq.dtype))
        outputs = []
        for x_t in inputs:
            h, c = lstm_step(x_t, h, c, w_ih, w_hh, b_ih, b_hh)
            outputs.append(h)
        inputs = outputs
    # rows of the (T*B, H) stack are ordered t-major
    stacked = stack(inputs, axis=0)
    flat = stacked.reshape(t_max * bsz, stacked.shape[2])
    final = gather_rows(flat, (lengths - 1) * bsz + np.arange(bsz))
    return inputs, final


# -- losses -------------------------------------------------------------------


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(_log_softmax(z, axis))


def softmax_cross_entropy(logits: Tensor, target: Sequence[int]) -> Tensor:
    """Mean cross-entropy of (B,K) logits against integer class targets."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, K) logits, got {logits.shape}")
    bsz, k = logits.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.shape != (bsz,):
        raise ShapeError(f"expected {bsz} targets, got {target.size}")
    if (target < 0).any() or (target >= k).any():
        raise ValueError(f"target index outside [0, {k})")
    logp = _log_softmax(logits.data.astype(np.float64), axis=1)
    rows = np.arange(bsz)
    loss = -logp[rows, target].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, target] -= 1.0
        return ((grad * (g / bsz)).astype(logits.dtype),)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_ce")


def pixelwise_cross_entropy(logit_map: Tensor, mask: np.ndarray) -> Tensor:
    """Mean 2-class cross-entropy over every pixel; channel 0 is context, 1 is hand."""
    if logit_map.ndim != 4 or logit_map.shape[1] != 2:
        raise ShapeError(f"pixelwise_cross_entropy expects (B, 2, H, W), got {logit_map.shape}")
    mask = np.asarray(mask)
    b, _, h, w = logit_map.shape
    if mask.shape != (b, h, w):
        raise ShapeError(f"mask shape {mask.shape} does not match logits {(b, h, w)}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    hand = mask.astype(bool)
    z = logit_map.data.astype(np.float64)
    # log p(hand) = -softplus(z0 - z1); log p(context) = -softplus(z1 - z0)
    d = z[:, 1] - z[:, 0]
    signed = np.where(hand, -d, d)
    nll = np.logaddexp(0.0, signed)
    n = nll.size
    loss = nll.sum() / n

    def backward(g):
        p_hand = np.exp(-np.logaddexp(0.0, -d))
        dd = (p_hand - hand) * (g / n)
        out = np.stack([-dd, dd], axis=1)
        return (out.astype(logit_map.dtype),)

    return make_op(np.asarray(loss, dtype=logit_map.dtype), (logit_map,), backward, "pixel_ce")
