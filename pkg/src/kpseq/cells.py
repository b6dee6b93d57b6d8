"""Convolutional GRU cells for skip connections.

Two variants: the plain convolutional GRU, and a coordinate-augmented
variant whose internal convolutions see two extra channels holding the
normalized x/y pixel coordinates.  Zeroing the coordinate-channel weights
makes the augmented cell behave exactly like the plain one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    astensor,
    concat_channels,
    conv2d,
    mul,
    one_minus,
    sigmoid,
    tanh,
)

# weight/bias triplets per gate, in checkpoint order
PARAM_FIELDS = ("w_hz", "w_xz", "b_z", "w_hr", "w_xr", "b_r", "w_h", "w_x", "b")


@dataclass
class GruParams:
    """The nine weight/bias arrays of a convolutional GRU cell.

    Each ``w_*`` is [C, C, k, k]; each ``b_*`` is [C].  Hidden and input
    channel counts are equal (the cell sits on a skip path).
    """

    w_hz: object
    w_xz: object
    b_z: object
    w_hr: object
    w_xr: object
    b_r: object
    w_h: object
    w_x: object
    b: object

    input_pad = 0  # extra input channels seen by the convolutions

    @property
    def channels(self) -> int:
        return self.w_hz.shape[0]

    @property
    def kernel(self) -> int:
        return self.w_hz.shape[2]

    @classmethod
    def zeros(cls, channels, kernel=3, dtype=np.float64):
        cin = channels + cls.input_pad
        w = lambda: np.zeros((channels, cin, kernel, kernel), dtype=dtype)
        b = lambda: np.zeros(channels, dtype=dtype)
        return cls(w(), w(), b(), w(), w(), b(), w(), w(), b())

    def named_arrays(self):
        for f in PARAM_FIELDS:
            yield f, getattr(self, f)

    def validate(self):
        c, k = self.channels, self.kernel
        cin = c + self.input_pad
        for name, arr in self.named_arrays():
            want = (c,) if name.startswith("b") else (c, cin, k, k)
            if tuple(arr.shape) != want:
                raise ShapeError(f"{type(self).__name__}.{name} has shape {tuple(arr.shape)}, expected {want}")
        return self


@dataclass
class CoordGruParams(GruParams):
    """GRU params whose convolutions take two extra coordinate channels.

    Weight layout is [C, C+2, k, k]: the first C input channels act on the
    feature operand, the trailing 2 on the appended coordinate maps.
    """

    input_pad = 2

    @classmethod
    def from_plain(cls, p: GruParams) -> "CoordGruParams":
        """Embed plain-GRU weights with zeroed coordinate channels."""
        out = {}
        for name, arr in p.named_arrays():
            if name.startswith("b"):
                out[name] = np.array(arr)
            else:
                c, _, k, _ = arr.shape
                w = np.zeros((c, c + 2, k, k), dtype=arr.dtype)
                w[:, :c] = arr
                out[name] = w
        return cls(**out)


@dataclass
class GruStepTrace:
    """Per-step gate activations and the new hidden state."""

    z: Tensor
    r: Tensor
    h_hat: Tensor
    h: Tensor


def coord_channels(H: int, W: int, dtype=np.float64) -> Tensor:
    """Two coordinate maps, each linearly normalized to [-1, 1].

    Channel 0 varies along x (width), channel 1 along y (height); pixel
    (0, 0) maps to (-1, -1).  A singleton axis yields the constant 0.
    """
    if H < 1 or W < 1:
        raise ShapeError(f"coord_channels needs positive dims, got {H}x{W}")
    xs = np.linspace(-1.0, 1.0, W, dtype=dtype) if W > 1 else np.zeros(1, dtype=dtype)
    ys = np.linspace(-1.0, 1.0, H, dtype=dtype) if H > 1 else np.zeros(1, dtype=dtype)
    maps = np.stack([np.tile(xs, (H, 1)), np.tile(ys[:, None], (1, W))])
    return Tensor(maps)


def init_hidden(C: int, H: int, W: int, dtype=np.float64) -> Tensor:
    """All-zeros initial hidden state."""
    if C < 1 or H < 1 or W < 1:
        raise ShapeError(f"init_hidden needs positive dims, got ({C},{H},{W})")
    return Tensor(np.zeros((C, H, W), dtype=dtype))


def _check_step_inputs(h_prev, x):
    if h_prev.shape != x.shape:
        raise ShapeError(f"hidden state shape {h_prev.shape} != input shape {x.shape}")
    if h_prev.ndim not in (3, 4):
        raise ShapeError(f"cell inputs must be [C,H,W] or [N,C,H,W], got {h_prev.shape}")


def conv_gru_step(p: GruParams, h_prev, x) -> GruStepTrace:
    """One convolutional GRU step.

    z = sigmoid(w_hz*h + w_xz*x + b_z), r likewise, candidate
    h_hat = tanh(w_h*(r.h) + w_x*x + b), and h = (1-z).h_prev + z.h_hat.
    """
    h_prev, x = astensor(h_prev), astensor(x)
    _check_step_inputs(h_prev, x)
    z = sigmoid(add(conv2d(h_prev, p.w_hz), conv2d(x, p.w_xz, p.b_z)))
    r = sigmoid(add(conv2d(h_prev, p.w_hr), conv2d(x, p.w_xr, p.b_r)))
    h_hat = tanh(add(conv2d(mul(r, h_prev), p.w_h), conv2d(x, p.w_x, p.b)))
    h = add(mul(one_minus(z), h_prev), mul(z, h_hat))
    return GruStepTrace(z, r, h_hat, h)


def coord_conv_gru_step(p: CoordGruParams, h_prev, x) -> GruStepTrace:
    """GRU step with coordinate channels appended to every conv input."""
    h_prev, x = astensor(h_prev), astensor(x)
    _check_step_inputs(h_prev, x)
    H, W = x.shape[-2:]
    coords = coord_channels(H, W, dtype=x.dtype)
    if x.ndim == 4:
        coords = Tensor(np.broadcast_to(coords.data, (x.shape[0],) + coords.data.shape).copy())
    ch = concat_channels(h_prev, coords)
    cx = concat_channels(x, coords)
    z = sigmoid(add(conv2d(ch, p.w_hz), conv2d(cx, p.w_xz, p.b_z)))
    r = sigmoid(add(conv2d(ch, p.w_hr), conv2d(cx, p.w_xr, p.b_r)))
    crh = concat_channels(mul(r, h_prev), coords)
    h_hat = tanh(add(conv2d(crh, p.w_h), conv2d(cx, p.w_x, p.b)))
    h = add(mul(one_minus(z), h_prev), mul(z, h_hat))
    return GruStepTrace(z, r, h_hat, h)
