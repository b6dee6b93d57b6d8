"""Two-stack recurrent hourglass with cells on the skip connections.

Geometry per stack: a preprocessing conv maps image channels to C, then
four pool+conv encoder levels take H down to H/16 with a skip tap at each
level (H/2 .. H/16), a bottleneck conv sits at H/16, and four
upsample+conv decoder levels add the skip outputs back in on the way up.
A 1x1 head emits K heatmap logits at full resolution.  Skip taps are a
plain conv, a ConvGRU step, or a CoordConvGRU step depending on the cell
kind; one weight set is shared across every frame of a sequence, only the
recurrent states differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, add, astensor, conv2d, maxpool2, relu, upsample_nearest2
from .cells import CoordGruParams, GruParams, conv_gru_step, coord_conv_gru_step

CELL_KINDS = ("none", "convgru", "coordconvgru")
LEVELS = 4
STACKS = 2


@dataclass
class ConvParams:
    w: object  # [C_out, C_in, k, k]
    b: object  # [C_out]

    def named_arrays(self):
        yield "w", self.w
        yield "b", self.b


@dataclass
class StackWeights:
    enc: list  # LEVELS ConvParams
    skips: list  # LEVELS ConvParams | GruParams | CoordGruParams
    bottleneck: ConvParams
    dec: list  # LEVELS ConvParams
    head: ConvParams  # 1x1, C -> K


@dataclass
class HourglassWeights:
    """Full network parameters; sequence length never changes these."""

    cell_kind: str
    pre: ConvParams  # image channels -> C
    inter: ConvParams  # 1x1, K -> C, re-projects stack-1 logits
    stacks: list  # STACKS StackWeights

    @property
    def channels(self) -> int:
        return self.pre.w.shape[0]

    @property
    def image_channels(self) -> int:
        return self.pre.w.shape[1]

    @property
    def keypoints(self) -> int:
        return self.stacks[0].head.w.shape[0]

    @property
    def dtype(self):
        return self.pre.w.dtype


@dataclass
class HiddenStates:
    """Recurrent skip states: 2 stacks x 4 levels, stack-major.

    Level l (1-based) has spatial size (H/2^l, W/2^l).  Empty when the
    network has no recurrent cells.
    """

    states: list

    @classmethod
    def zeros(cls, cell_kind, channels, H, W, batch=None, dtype=np.float64):
        if cell_kind == "none":
            return cls([])
        states = []
        for _ in range(STACKS):
            for level in range(1, LEVELS + 1):
                shape = (channels, H >> level, W >> level)
                if batch is not None:
                    shape = (batch,) + shape
                states.append(Tensor(np.zeros(shape, dtype=dtype)))
        return cls(states)

    def split(self):
        if not self.states:
            return [None] * STACKS
        return [self.states[i * LEVELS : (i + 1) * LEVELS] for i in range(STACKS)]


@dataclass
class StackOutputs:
    heatmaps: Tensor  # [K, H, W] logits (batched: [N, K, H, W])
    states: list  # final per-level hidden states, empty for cell_kind none


def _cell_step(cell_kind, params, state, feature):
    if cell_kind == "convgru":
        return conv_gru_step(params, state, feature)
    if cell_kind == "coordconvgru":
        return coord_conv_gru_step(params, state, feature)
    raise ValueError(f"unknown cell kind {cell_kind!r}")


def hourglass_forward(stack: StackWeights, x, states_in, cell_kind):
    """One encoder-decoder pass; returns (heatmaps, features, states_out)."""
    if cell_kind not in CELL_KINDS:
        raise ValueError(f"unknown cell kind {cell_kind!r}")
    x = astensor(x)
    H, W = x.shape[-2:]
    if H % (1 << LEVELS) or W % (1 << LEVELS):
        raise ShapeError(f"spatial dims must be divisible by {1 << LEVELS}, got {H}x{W}")
    recurrent = cell_kind != "none"
    if recurrent:
        if states_in is None or len(states_in) != LEVELS:
            raise ShapeError(f"expected {LEVELS} skip states, got {0 if states_in is None else len(states_in)}")

    f = x
    skips = []
    states_out = []
    for level in range(LEVELS):
        f = relu(conv2d(maxpool2(f), stack.enc[level].w, stack.enc[level].b))
        if recurrent:
            state = astensor(states_in[level])
            if state.shape != f.shape:
                raise ShapeError(
                    f"state at level {level + 1} has shape {state.shape}, feature is {f.shape}"
                )
            trace = _cell_step(cell_kind, stack.skips[level], state, f)
            skips.append(trace.h)
            states_out.append(trace.h)
        else:
            skips.append(relu(conv2d(f, stack.skips[level].w, stack.skips[level].b)))

    u = relu(conv2d(f, stack.bottleneck.w, stack.bottleneck.b))
    for level in range(LEVELS - 1, -1, -1):
        u = relu(conv2d(upsample_nearest2(add(u, skips[level])), stack.dec[level].w, stack.dec[level].b))

    heatmaps = conv2d(u, stack.head.w, stack.head.b)
    return heatmaps, u, states_out


def stacked_forward(w: HourglassWeights, image, states_in: HiddenStates):
    """Run both stacks with intermediate supervision outputs.

    Stack 2 consumes stack 1's features plus its heatmap logits projected
    back to C channels.  Returns ([StackOutputs x 2], HiddenStates).
    """
    image = astensor(image)
    f0 = relu(conv2d(image, w.pre.w, w.pre.b))
    per_stack_in = states_in.split()

    hm1, feat1, s1 = hourglass_forward(w.stacks[0], f0, per_stack_in[0], w.cell_kind)
    x2 = add(feat1, conv2d(hm1, w.inter.w, w.inter.b))
    hm2, _, s2 = hourglass_forward(w.stacks[1], x2, per_stack_in[1], w.cell_kind)

    outputs = [StackOutputs(hm1, s1), StackOutputs(hm2, s2)]
    return outputs, HiddenStates(s1 + s2)


def sequence_forward(w: HourglassWeights, frames):
    """Thread zero-initialized states through a frame sequence.

    Returns (per-frame list of per-stack StackOutputs, final HiddenStates).
    """
    if not frames:
        raise ValueError("sequence must contain at least one frame")
    first = astensor(frames[0])
    H, W = first.shape[-2:]
    batch = first.shape[0] if first.ndim == 4 else None
    states = HiddenStates.zeros(w.cell_kind, w.channels, H, W, batch=batch, dtype=first.dtype)
    outputs = []
    for frame in frames:
        frame = astensor(frame)
        if frame.shape != first.shape:
            raise ShapeError("all frames in a sequence must share one shape")
        outs, states = stacked_forward(w, frame, states)
        outputs.append(outs)
    return outputs, states


# ---------------------------------------------------------------------------
# parameter bookkeeping


def named_params(w: HourglassWeights):
    """Stable (name, array) pairs covering every parameter tensor."""
    yield from (("pre." + n, a) for n, a in w.pre.named_arrays())
    yield from (("inter." + n, a) for n, a in w.inter.named_arrays())
    for i, stack in enumerate(w.stacks):
        prefix = f"stack{i}."
        for level in range(LEVELS):
            yield from ((f"{prefix}enc{level}.{n}", a) for n, a in stack.enc[level].named_arrays())
        for level in range(LEVELS):
            yield from ((f"{prefix}skip{level}.{n}", a) for n, a in stack.skips[level].named_arrays())
        yield from ((f"{prefix}bottleneck.{n}", a) for n, a in stack.bottleneck.named_arrays())
        for level in range(LEVELS):
            yield from ((f"{prefix}dec{level}.{n}", a) for n, a in stack.dec[level].named_arrays())
        yield from ((f"{prefix}head.{n}", a) for n, a in stack.head.named_arrays())


def param_count(w: HourglassWeights) -> int:
    """Total scalar parameters; independent of sequence length."""
    return sum(int(np.prod(a.shape)) for _, a in named_params(w))


def map_params(w: HourglassWeights, fn) -> HourglassWeights:
    """Rebuild the weight structure with fn applied to every array."""

    def conv(c):
        return ConvParams(fn(c.w), fn(c.b))

    def skip(s):
        if isinstance(s, ConvParams):
            return conv(s)
        cls = type(s)
        return cls(**{n: fn(a) for n, a in s.named_arrays()})

    stacks = [
        StackWeights(
            enc=[conv(c) for c in s.enc],
            skips=[skip(c) for c in s.skips],
            bottleneck=conv(s.bottleneck),
            dec=[conv(c) for c in s.dec],
            head=conv(s.head),
        )
        for s in w.stacks
    ]
    return HourglassWeights(w.cell_kind, conv(w.pre), conv(w.inter), stacks)


def watch_weights(w: HourglassWeights, tape) -> HourglassWeights:
    """Record every parameter on a tape so gradients accumulate for it."""
    return map_params(w, tape.watch)


# ---------------------------------------------------------------------------
# initialization


def xavier_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


def _init_conv(rng, cout, cin, k, dtype):
    w = xavier_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k, dtype)
    return ConvParams(w, np.zeros(cout, dtype=dtype))


def _init_gru(rng, channels, kernel, coord, dtype):
    cls = CoordGruParams if coord else GruParams
    p = cls.zeros(channels, kernel, dtype=dtype)
    cin = channels + cls.input_pad
    fan_in = cin * kernel * kernel
    fan_out = channels * kernel * kernel
    for name, arr in p.named_arrays():
        if not name.startswith("b"):
            arr[...] = xavier_uniform(rng, arr.shape, fan_in, fan_out, dtype)
    return p


def init_weights(
    seed,
    image_channels=1,
    channels=16,
    keypoints=8,
    kernel=3,
    cell_kind="none",
    dtype=np.float32,
) -> HourglassWeights:
    """Xavier-uniform weights, zero biases; draw order is fixed."""
    if cell_kind not in CELL_KINDS:
        raise ValueError(f"unknown cell kind {cell_kind!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pre = _init_conv(rng, channels, image_channels, kernel, dtype)
    inter = _init_conv(rng, channels, keypoints, 1, dtype)
    stacks = []
    for _ in range(STACKS):
        enc = [_init_conv(rng, channels, channels, kernel, dtype) for _ in range(LEVELS)]
        if cell_kind == "none":
            skips = [_init_conv(rng, channels, channels, kernel, dtype) for _ in range(LEVELS)]
        else:
            skips = [
                _init_gru(rng, channels, kernel, cell_kind == "coordconvgru", dtype)
                for _ in range(LEVELS)
            ]
        bottleneck = _init_conv(rng, channels, channels, kernel, dtype)
        dec = [_init_conv(rng, channels, channels, kernel, dtype) for _ in range(LEVELS)]
        head = _init_conv(rng, keypoints, channels, 1, dtype)
        stacks.append(StackWeights(enc, skips, bottleneck, dec, head))
    return HourglassWeights(cell_kind, pre, inter, stacks)
