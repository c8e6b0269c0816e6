"""Tensor data model and the masked compositing algebra.

Array conventions (numpy, channel-last):

  video       float [T, H, W, 3], values in [-1, 1]
  flow        float [T, H, W, 2], channels (u, v) in pixels/frame
              (u = horizontal / column displacement, v = vertical / row)
  mask        float [T, H, W, 1], values in [0, 1]
  background  float [H, W, 3], values in [-1, 1]
  latent      float [100]

For network I/O, flow is normalized to [-1, 1] by the fixed divisor
``FLOW_SCALE``.

The blend operations (`composite`, `flow_composite`, `replicate_background`)
are layout-agnostic and accept numpy arrays or torch tensors, so the same
algebra runs both on plain arrays and inside autograd graphs on
channel-first batches.
"""

from __future__ import annotations

import numpy as np

FLOW_SCALE = 8.0  # pixels/frame mapped to 1.0 in network range
LATENT_DIM = 100


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


def _shape(a):
    return tuple(a.shape)


def _require_same_shape(name_a, a, name_b, b):
    if _shape(a) != _shape(b):
        raise ShapeError(f"{name_a} has shape {_shape(a)} but {name_b} has shape {_shape(b)}")


def _require_mask_compatible(mask, other, other_name):
    ms, os_ = _shape(mask), _shape(other)
    if len(ms) != len(os_):
        raise ShapeError(f"mask has {len(ms)} axes ({ms}) but {other_name} has {len(os_)} ({os_})")
    try:
        out = np.broadcast_shapes(ms, os_)
    except ValueError:
        raise ShapeError(f"mask shape {ms} does not broadcast against {other_name} shape {os_}") from None
    if out != os_:
        raise ShapeError(f"mask shape {ms} would expand {other_name} shape {os_} to {out}")


def _mask_bounds(mask):
    if isinstance(mask, np.ndarray):
        return float(mask.min()), float(mask.max())
    m = mask.detach()
    return float(m.min()), float(m.max())


def composite(mask, foreground, background):
    """Per-pixel convex blend: mask * foreground + (1 - mask) * background.

    The mask selects the foreground where it is 1 and the background where
    it is 0; the background is typically a single image replicated over
    time. Mask values must lie in [0, 1] and its shape must broadcast
    against the (identical) foreground/background shapes.
    """
    _require_same_shape("foreground", foreground, "background", background)
    _require_mask_compatible(mask, foreground, "foreground")
    lo, hi = _mask_bounds(mask)
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"mask values must lie in [0, 1], got range [{lo}, {hi}]")
    return mask * foreground + (1 - mask) * background


def flow_composite(mask, foreground_flow):
    """Masked flow: mask * foreground_flow, with an implicit all-zero background.

    The motion of a static background is zero, so no background stream is
    blended in; wherever the mask is exactly 0 the output flow is exactly 0.
    """
    _require_mask_compatible(mask, foreground_flow, "foreground_flow")
    lo, hi = _mask_bounds(mask)
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"mask values must lie in [0, 1], got range [{lo}, {hi}]")
    return mask * foreground_flow


def replicate_background(image, t, axis=0):
    """Replicate a static image along a new time axis of length ``t``.

    For the numpy channel-last convention this turns an [H, W, 3] image into
    a [t, H, W, 3] video. Networks pass ``axis=2`` to replicate batched
    channel-first images [N, C, H, W] into [N, C, t, H, W].
    """
    if t < 1:
        raise ValueError(f"replication count must be >= 1, got {t}")
    if isinstance(image, np.ndarray):
        return np.broadcast_to(np.expand_dims(image, axis), _shape(image)[:axis] + (t,) + _shape(image)[axis:]).copy()
    target = _shape(image)[:axis] + (t,) + _shape(image)[axis:]
    return image.unsqueeze(axis).expand(target)


def warp_frame(frame, flow_frame):
    """Backward-warp one frame: out(p) = frame(p - flow(p)), bilinear, border-clamped.

    frame: [H, W, C]; flow_frame: [H, W, 2] in pixels.
    """
    if frame.ndim != 3:
        raise ShapeError(f"frame must be [H, W, C], got {frame.shape}")
    if flow_frame.ndim != 3 or flow_frame.shape[2] != 2:
        raise ShapeError(f"flow frame must be [H, W, 2], got {flow_frame.shape}")
    if frame.shape[:2] != flow_frame.shape[:2]:
        raise ShapeError(f"frame {frame.shape} and flow {flow_frame.shape} spatial sizes differ")
    h, w = frame.shape[:2]
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ys = ii - flow_frame[..., 1]
    xs = jj - flow_frame[..., 0]
    return _bilinear_sample(frame, ys, xs)


def _bilinear_sample(frame, ys, xs):
    h, w = frame.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    top = frame[y0, x0] * (1 - wx) + frame[y0, x1] * wx
    bot = frame[y1, x0] * (1 - wx) + frame[y1, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(frame.dtype, copy=False)


def warp_video(first_frame, flow):
    """Roll a single image forward through a flow volume by repeated warping.

    frame_0 is ``first_frame``; frame_{t+1}(p) = frame_t(p - flow_t(p)) with
    bilinear sampling and border clamping. This is the naive "animate by
    warping" baseline; interpolation error compounds with every step, which
    is why the texture network re-synthesizes appearance instead.
    """
    if first_frame.ndim != 3:
        raise ShapeError(f"first_frame must be [H, W, C], got {first_frame.shape}")
    if flow.ndim != 4 or flow.shape[3] != 2:
        raise ShapeError(f"flow must be [T, H, W, 2], got {flow.shape}")
    if first_frame.shape[:2] != flow.shape[1:3]:
        raise ShapeError(f"first_frame {first_frame.shape} and flow {flow.shape} spatial sizes differ")
    frames = [np.asarray(first_frame)]
    for t in range(flow.shape[0] - 1):
        frames.append(warp_frame(frames[-1], flow[t]))
    return np.stack(frames, axis=0)


def flow_to_color(flow, max_magnitude):
    """Render a flow volume as RGB video: hue = direction, saturation = speed.

    Zero flow maps to white; magnitudes are scaled by ``max_magnitude`` and
    clipped at full saturation. Output is a video in [-1, 1].
    """
    if max_magnitude <= 0:
        raise ValueError(f"max_magnitude must be > 0, got {max_magnitude}")
    if flow.ndim != 4 or flow.shape[3] != 2:
        raise ShapeError(f"flow must be [T, H, W, 2], got {flow.shape}")
    u = np.asarray(flow[..., 0], dtype=np.float64)
    v = np.asarray(flow[..., 1], dtype=np.float64)
    hue = (np.arctan2(v, u) / (2.0 * np.pi)) % 1.0
    sat = np.clip(np.hypot(u, v) / max_magnitude, 0.0, 1.0)
    rgb = _hsv_to_rgb_full_value(hue, sat)
    return (rgb * 2.0 - 1.0).astype(np.float32)


def _hsv_to_rgb_full_value(hue, sat):
    # HSV -> RGB specialized to value = 1 (zero saturation gives white).
    h6 = hue * 6.0
    seg = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    r = np.select([seg == k for k in range(6)], [one, q, p, p, t, one])
    g = np.select([seg == k for k in range(6)], [t, one, one, q, p, p])
    b = np.select([seg == k for k in range(6)], [p, p, t, one, one, q])
    return np.stack([r, g, b], axis=-1)


def check_video(a, name="video"):
    a = np.asarray(a)
    if a.ndim != 4 or a.shape[3] != 3:
        raise ShapeError(f"{name} must be [T, H, W, 3], got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")
    if a.min() < -1.0 or a.max() > 1.0:
        raise ValueError(f"{name} values must lie in [-1, 1], got range [{a.min()}, {a.max()}]")
    return a


def check_flow(a, name="flow"):
    a = np.asarray(a)
    if a.ndim != 4 or a.shape[3] != 2:
        raise ShapeError(f"{name} must be [T, H, W, 2], got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_mask(a, name="mask"):
    a = np.asarray(a)
    if a.ndim != 4 or a.shape[3] != 1:
        raise ShapeError(f"{name} must be [T, H, W, 1], got {a.shape}")
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return a


def check_background(a, name="background"):
    a = np.asarray(a)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"{name} must be [H, W, 3], got {a.shape}")
    if a.min() < -1.0 or a.max() > 1.0:
        raise ValueError(f"{name} values must lie in [-1, 1]")
    return a


def check_latent(z, name="latent"):
    z = np.asarray(z)
    if z.ndim != 1 or z.shape[0] != LATENT_DIM:
        raise ShapeError(f"{name} must be a vector of length {LATENT_DIM}, got {z.shape}")
    return z
