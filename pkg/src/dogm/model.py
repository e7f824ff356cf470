"""Multi-task recurrent grid network with ego-motion compensation.

The model is a U-Net over the padded BEV frame: four encoder levels
connected by stride-3 transitions, a ConvLSTM in the bottleneck and in
every skip connection, and three decoders that upsample back to full
resolution and end in six per-cell heads (occupancy, driveable area,
ground class, velocity, dynamic mask, semantic class).

Ego motion is compensated in two stages that keep the recurrent state in
a quasi-static frame:

* input placement (IP) slides the current sweep's core grid inside the
  padded frame by the ego displacement modulo 27 input cells, and
* the recurrent state shift (RSS) rolls all state maps synchronously by
  whole innermost-level cells (27 input cells) whenever the displacement
  crosses an innermost-cell boundary.

``place_and_shift`` composes the two for streaming use.  Parameters live
in a plain name->tensor dict so the trainer owns their storage; the
``Model`` object itself is just structure bound to a config.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import engine
from .bev import CENTER_OFFSET, PAD, BevTensor, place_core_indices
from .dataio import format_kv, read_kv_file
from .engine import NumericFault, Tensor
from .grid import GridSpec, Pose

# input cells per innermost-level (bottleneck) cell: three stride-3 stages
INNER_FACTOR = 27
# placement offsets stay within CENTER_OFFSET +- HALF_INNER
HALF_INNER = 13

_LEVELS = 4


@dataclass(frozen=True)
class HeadSpec:
    """One output head: a 1x1 conv on a decoder plus an activation."""

    name: str
    decoder: int
    channels: int
    activation: str  # sigmoid | softmax | linear


HEADS = (
    HeadSpec("occ", decoder=1, channels=1, activation="sigmoid"),
    HeadSpec("road", decoder=1, channels=1, activation="sigmoid"),
    HeadSpec("gc", decoder=1, channels=3, activation="softmax"),
    HeadSpec("v", decoder=2, channels=2, activation="linear"),
    HeadSpec("dyn", decoder=2, channels=1, activation="sigmoid"),
    HeadSpec("cls", decoder=3, channels=9, activation="softmax"),
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    The padded frame (core plus 28) must tile exactly into innermost-level
    cells, and the bottleneck is fixed at 128 channels; everything else is
    free.  ``input_channels`` is the number of BEV height channels.
    """

    length_cells: int = 80
    width_cells: int = 80
    input_channels: int = 25
    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    kernel_size: int = 3
    n_in: int = 10
    dropout: float = 0.1
    heads: tuple[HeadSpec, ...] = HEADS

    def __post_init__(self) -> None:
        if (self.length_cells + PAD) % INNER_FACTOR:
            raise ValueError(
                f"core length {self.length_cells} + padding {PAD} must be divisible by {INNER_FACTOR}"
            )
        if (self.width_cells + PAD) % INNER_FACTOR:
            raise ValueError(
                f"core width {self.width_cells} + padding {PAD} must be divisible by {INNER_FACTOR}"
            )
        channels = tuple(int(c) for c in self.channels)
        object.__setattr__(self, "channels", channels)
        if len(channels) != _LEVELS or min(channels) <= 0:
            raise ValueError("channels must be four positive level widths")
        if channels[3] != 128:
            raise ValueError(f"bottleneck must have 128 channels, got {channels[3]}")
        if self.input_channels <= 0:
            raise ValueError("input_channels must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.n_in < 1:
            raise ValueError("n_in must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        heads = tuple(self.heads)
        object.__setattr__(self, "heads", heads)
        names = [h.name for h in heads]
        if len(set(names)) != len(names):
            raise ValueError("head names must be unique")
        for head in heads:
            if head.decoder not in (1, 2, 3):
                raise ValueError(f"head {head.name!r} wants unknown decoder {head.decoder}")
            if head.activation not in ("sigmoid", "softmax", "linear"):
                raise ValueError(f"head {head.name!r} has unknown activation {head.activation!r}")

    @property
    def padded_length(self) -> int:
        return self.length_cells + PAD

    @property
    def padded_width(self) -> int:
        return self.width_cells + PAD

    def level_dims(self, level: int) -> tuple[int, int]:
        """Spatial dims of encoder level ``level`` (0 = full padded res)."""
        f = 3**level
        return self.padded_length // f, self.padded_width // f


@dataclass
class ModelState:
    """Recurrent state: one (h, c) pair per network level.

    ``anchor`` is the global input-cell coordinate the placement is
    referenced to; it moves only in whole innermost-level cells through
    :func:`recurrent_state_shift`.  ``residual`` is the last placement's
    sub-innermost displacement in input cells, always within
    [-HALF_INNER, HALF_INNER].
    """

    levels: list[tuple[Tensor, Tensor]]
    anchor: tuple[int, int] = (0, 0)
    residual: tuple[int, int] = (0, 0)


@dataclass
class NetOutput:
    """Per-cell predictions over the core grid (graph tensors).

    ``y_occ``, ``y_road``, ``y_dyn`` are (L, W) probabilities; ``y_gc`` is
    an (L, W, 3) simplex, ``y_cls`` an (L, W, 9) simplex; ``y_v`` is
    (L, W, 2) linear east/north velocity in m/s.
    """

    y_occ: Tensor
    y_road: Tensor
    y_gc: Tensor
    y_v: Tensor
    y_dyn: Tensor
    y_cls: Tensor

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "occ": self.y_occ.data,
            "road": self.y_road.data,
            "gc": self.y_gc.data,
            "v": self.y_v.data,
            "dyn": self.y_dyn.data,
            "cls": self.y_cls.data,
        }


# ---------------------------------------------------------------------------
# ego-motion compensation


def _decompose_displacement(pose: Pose, anchor: tuple[int, int], spec: GridSpec) -> tuple[tuple[int, int], tuple[int, int]]:
    """Split ego displacement since ``anchor`` into innermost-level cells
    and an input-cell remainder in [-HALF_INNER, HALF_INNER]."""
    shift = []
    residual = []
    for position, cell, ref in (
        (pose.x, spec.cell_length, anchor[0]),
        (pose.y, spec.cell_width, anchor[1]),
    ):
        disp = int(np.floor(position / cell - ref + 0.5))
        rem = (disp + HALF_INNER) % INNER_FACTOR - HALF_INNER
        shift.append((disp - rem) // INNER_FACTOR)
        residual.append(rem)
    return (shift[0], shift[1]), (residual[0], residual[1])


def pose_anchor(pose: Pose, spec: GridSpec) -> tuple[int, int]:
    """Nearest global input cell to a pose — the natural initial anchor."""
    return (
        int(np.floor(pose.x / spec.cell_length + 0.5)),
        int(np.floor(pose.y / spec.cell_width + 0.5)),
    )


def input_placement(
    core: np.ndarray,
    pose: Pose,
    anchor: tuple[int, int],
    spec: GridSpec,
) -> tuple[BevTensor, tuple[int, int]]:
    """Place a sweep's core cell indices into the padded frame.

    The offset is the centered placement plus the ego displacement since
    ``anchor`` wrapped to [-HALF_INNER, HALF_INNER] input cells; the wrap
    assumes the state has been (or will be) shifted by the complementary
    whole innermost-level cells — ``place_and_shift`` does both.  Returns
    the placed tensor and the wrapped displacement (the new residual).
    """
    _, residual = _decompose_displacement(pose, anchor, spec)
    if max(abs(residual[0]), abs(residual[1])) > HALF_INNER:
        raise RuntimeError(f"placement residual {residual} outside +-{HALF_INNER}")
    offset = (CENTER_OFFSET + residual[0], CENTER_OFFSET + residual[1])
    return place_core_indices(core, offset, spec), residual


def recurrent_state_shift(state: ModelState, shift: tuple[int, int]) -> ModelState:
    """Move the state window by whole innermost-level cells.

    ``shift`` is the window (anchor) displacement in innermost-level
    cells; the anchor advances by ``27 * shift`` input cells and every
    state map rolls by the same world distance — level k rolls by
    ``shift * 3^(3-k)`` of its own cells, opposite the window motion, with
    vacated cells zero-filled.  A shift at least as large as the state
    extent has nothing left to keep: the state resets to zeros (teleport)
    with a warning.
    """
    sx, sy = int(shift[0]), int(shift[1])
    if (sx, sy) == (0, 0):
        return state
    anchor = (state.anchor[0] + INNER_FACTOR * sx, state.anchor[1] + INNER_FACTOR * sy)
    h0, _ = state.levels[0]
    P, Q = h0.data.shape[:2]
    if INNER_FACTOR * abs(sx) >= P or INNER_FACTOR * abs(sy) >= Q:
        warnings.warn(
            f"state shift {shift} exceeds the state extent; resetting recurrent state (teleport)",
            stacklevel=2,
        )
        levels = [
            (
                Tensor(np.zeros_like(h.data)),
                Tensor(np.zeros_like(c.data)),
            )
            for h, c in state.levels
        ]
        return ModelState(levels=levels, anchor=anchor, residual=state.residual)
    levels = []
    for level, (h, c) in enumerate(state.levels):
        f = 3 ** (_LEVELS - 1 - level)
        dx, dy = -sx * f, -sy * f
        levels.append((engine.shift2d(h, dx, dy), engine.shift2d(c, dx, dy)))
    return ModelState(levels=levels, anchor=anchor, residual=state.residual)


def place_and_shift(
    core: np.ndarray,
    pose: Pose,
    state: ModelState,
    spec: GridSpec,
) -> tuple[BevTensor, ModelState]:
    """Streaming placement: shift the state when the ego crosses an
    innermost-cell boundary, then place the sweep at the residual offset."""
    shift, _ = _decompose_displacement(pose, state.anchor, spec)
    if shift != (0, 0):
        state = recurrent_state_shift(state, shift)
    bev, residual = input_placement(core, pose, state.anchor, spec)
    return bev, replace(state, residual=residual)


# ---------------------------------------------------------------------------
# model structure


class Model:
    """Network structure bound to a config; parameters live elsewhere."""

    def __init__(self, config: ModelConfig):
        self.config = config

    # -- parameters ---------------------------------------------------

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        """Name -> shape for every parameter tensor, in build order."""
        cfg = self.config
        K = cfg.kernel_size
        C = cfg.channels
        shapes: dict[str, tuple[int, ...]] = {}

        def conv(name: str, cin: int, cout: int, k: int) -> None:
            shapes[f"{name}_w"] = (cin, k, k, cout)
            shapes[f"{name}_b"] = (cout,)

        prev = cfg.input_channels
        for level in range(_LEVELS):
            if level:
                # stride-3 transitions are always 3x3 (exact tiling)
                conv(f"down{level}", C[level - 1], C[level], 3)
            conv(f"enc{level}a", prev if level == 0 else C[level], C[level], K)
            conv(f"enc{level}b", C[level], C[level], K)
        for level in range(_LEVELS):
            conv(f"lstm{level}", 2 * C[level], 4 * C[level], K)
        for d in (1, 2, 3):
            for level in (2, 1, 0):
                conv(f"dec{d}_{level}", C[level + 1] + C[level], C[level], K)
        for head in cfg.heads:
            conv(f"head_{head.name}", C[0], head.channels, 1)
        return shapes

    def num_parameters(self) -> int:
        return sum(int(np.prod(s)) for s in self.parameter_shapes().values())

    # -- state ----------------------------------------------------------

    def initial_state(
        self,
        anchor: tuple[int, int] = (0, 0),
        dtype=np.float64,
    ) -> ModelState:
        """All-zero recurrent state anchored at ``anchor``."""
        levels = []
        for level in range(_LEVELS):
            P, Q = self.config.level_dims(level)
            C = self.config.channels[level]
            levels.append(
                (
                    Tensor(np.zeros((P, Q, C), dtype=dtype)),
                    Tensor(np.zeros((P, Q, C), dtype=dtype)),
                )
            )
        return ModelState(levels=levels, anchor=(int(anchor[0]), int(anchor[1])))

    # -- forward ----------------------------------------------------------

    def forward_step(
        self,
        params: dict[str, Tensor],
        bev: BevTensor,
        state: ModelState,
        mode: str = "infer",
        rng: np.random.Generator | None = None,
        decode: bool = True,
    ) -> tuple[NetOutput | None, ModelState]:
        """One recurrent step; see module-level :func:`forward_step`."""
        cfg = self.config
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if bev.data.shape != (cfg.padded_length, cfg.padded_width, cfg.input_channels):
            raise ValueError(
                f"input shape {bev.data.shape} does not match config "
                f"{(cfg.padded_length, cfg.padded_width, cfg.input_channels)}"
            )
        for level, (h, _) in enumerate(state.levels):
            P, Q = cfg.level_dims(level)
            if h.data.shape != (P, Q, cfg.channels[level]):
                raise ValueError(
                    f"state level {level} has shape {h.data.shape}, expected {(P, Q, cfg.channels[level])}"
                )
        dtype = params["enc0a_w"].data.dtype
        dropping = mode == "train" and cfg.dropout > 0.0 and rng is not None

        def run(label: str, fn, *args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except NumericFault as exc:
                raise NumericFault(f"{label}: {exc}") from exc

        def conv_block(label: str, x: Tensor, stride: int = 1) -> Tensor:
            y = run(label, engine.conv2d, x, params[f"{label}_w"], params[f"{label}_b"], stride)
            return run(label, engine.relu, y)

        x = Tensor(bev.data.astype(dtype))
        skips: list[tuple[Tensor, Tensor]] = []
        feat = x
        for level in range(_LEVELS):
            if level:
                feat = conv_block(f"down{level}", feat, stride=3)
            feat = conv_block(f"enc{level}a", feat)
            feat = conv_block(f"enc{level}b", feat)
            mask = None
            if dropping:
                keep = rng.random(feat.data.shape) >= cfg.dropout
                mask = keep.astype(dtype) / (1.0 - cfg.dropout)
            h, c = run(
                f"lstm{level}",
                engine.convlstm_step,
                feat,
                *state.levels[level],
                params[f"lstm{level}_w"],
                params[f"lstm{level}_b"],
                mask,
            )
            skips.append((h, c))
        new_state = ModelState(levels=skips, anchor=state.anchor, residual=state.residual)
        if not decode:
            return None, new_state

        ox, oy = bev.offset
        L, W = cfg.length_cells, cfg.width_cells
        outputs: dict[str, Tensor] = {}
        for d in (1, 2, 3):
            feat = skips[-1][0]
            for level in (2, 1, 0):
                up = run(f"dec{d}_{level}", engine.upsample3, feat)
                merged = run(f"dec{d}_{level}", engine.concat_channels, [up, skips[level][0]])
                feat = conv_block(f"dec{d}_{level}", merged)
            core = run(f"dec{d}", engine.crop2d, feat, ox, oy, L, W)
            for head in cfg.heads:
                if head.decoder != d:
                    continue
                label = f"head_{head.name}"
                y = run(label, engine.conv2d, core, params[f"{label}_w"], params[f"{label}_b"])
                if head.activation == "sigmoid":
                    y = run(label, engine.sigmoid, y)
                elif head.activation == "softmax":
                    y = run(label, engine.softmax_channels, y)
                if head.channels == 1:
                    y = run(label, engine.squeeze_channel, y)
                outputs[head.name] = y
        return (
            NetOutput(
                y_occ=outputs["occ"],
                y_road=outputs["road"],
                y_gc=outputs["gc"],
                y_v=outputs["v"],
                y_dyn=outputs["dyn"],
                y_cls=outputs["cls"],
            ),
            new_state,
        )


def build_model(
    config: ModelConfig,
    seed: int = 0,
    dtype=np.float64,
) -> tuple[dict[str, Tensor], Model]:
    """Create a model and its freshly initialized parameters.

    Conv weights draw from a fan-in-scaled uniform, U(-1/sqrt(fan_in),
    1/sqrt(fan_in)); biases start at zero except ConvLSTM forget gates,
    which start at one so early training does not flush the state.
    """
    model = Model(config)
    rng = np.random.Generator(np.random.Philox(key=seed))
    params: dict[str, Tensor] = {}
    for name, shape in model.parameter_shapes().items():
        if name.endswith("_w"):
            cin, k, _, _ = shape
            bound = 1.0 / np.sqrt(cin * k * k)
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
            if name.startswith("lstm"):
                cout = shape[0] // 4
                data[cout : 2 * cout] = 1.0
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params, model


def forward_step(
    model: Model,
    params: dict[str, Tensor],
    bev: BevTensor,
    state: ModelState,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    decode: bool = True,
) -> tuple[NetOutput | None, ModelState]:
    """One pass: encoder -> ConvLSTMs -> decoders, cropped to the core.

    The returned state feeds the next step.  ``train`` mode applies fresh
    inverted-dropout masks (needs ``rng``) to each ConvLSTM input; infer
    mode never drops.  With ``decode=False`` the decoders are skipped and
    only the state advances.  A non-finite intermediate aborts with a
    NumericFault naming the layer.
    """
    return model.forward_step(params, bev, state, mode=mode, rng=rng, decode=decode)


def receptive_field_cells(config: ModelConfig) -> int:
    """Receptive-field width, in input cells, of one forward step.

    Walks the deepest path (encoder to bottleneck, then the decoder back
    to full resolution) accumulating kernel extent at each level's stride.
    """
    r, j = 1, 1
    k = config.kernel_size
    for level in range(_LEVELS):
        if level:
            r += 2 * j  # stride-3 transition, 3x3
            j *= 3
        r += 2 * (k - 1) * j  # two same convs
    r += (k - 1) * j  # bottleneck ConvLSTM gate conv
    for _ in range(3):
        j //= 3
        r += (k - 1) * j  # decoder conv after upsample+concat
    return r


# ---------------------------------------------------------------------------
# config file round trip


def write_model_config(config: ModelConfig, path: str) -> None:
    """Save a config as a key-value file (heads are fixed, not stored)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            format_kv(
                {
                    "length_cells": config.length_cells,
                    "width_cells": config.width_cells,
                    "input_channels": config.input_channels,
                    "channels": list(config.channels),
                    "kernel_size": config.kernel_size,
                    "n_in": config.n_in,
                    "dropout": config.dropout,
                }
            )
        )


def read_model_config(path: str) -> ModelConfig:
    kv = read_kv_file(path)
    try:
        return ModelConfig(
            length_cells=int(kv["length_cells"]),
            width_cells=int(kv["width_cells"]),
            input_channels=int(kv["input_channels"]),
            channels=tuple(int(c) for c in kv["channels"]),
            kernel_size=int(kv["kernel_size"]),
            n_in=int(kv["n_in"]),
            dropout=float(kv["dropout"]),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing model config key {exc}") from exc
