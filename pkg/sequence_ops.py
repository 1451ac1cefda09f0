"""Recurrent labeling stage: frames from feature maps, BiLSTM layers, per-frame logits."""

# == IMPORTS ===================================================================================== #

from typing import *

import numpy as np

from tensor_core import (
    Array, ShapeError, Tensor, concat, make_output, reshape, resolve_dtype, stack, take,
    transpose
)

# == PARAMETERS ================================================================================== #

# gate blocks of W, U and b, in row order
GATE_ORDER = ("input", "forget", "cell", "output")

class LstmParams:
    """Weights of one LSTM direction.

    Parameters
    ==========
    W: `Tensor`
        Input weights `[4*H, I]`, gate blocks stacked in `GATE_ORDER`.

    U: `Tensor`
        Recurrent weights `[4*H, H]`.

    b: `Tensor`
        Bias `[4*H]`.
    """

    def __init__(self, W: Tensor, U: Tensor, b: Tensor):
        errors = []

        if W.ndim != 2 or W.shape[0] % 4 != 0:
            errors.append(f"Input weights must be [4*H, I]; got {list(W.shape)}.")
        else:
            hidden = W.shape[0] // 4
            if U.shape != (4 * hidden, hidden):
                errors.append(
                    f"Recurrent weights must be [{4 * hidden}, {hidden}]; got {list(U.shape)}."
                )
            if b.shape != (4 * hidden,):
                errors.append(f"Bias must be [{4 * hidden}]; got {list(b.shape)}.")

        for label, tensor in (("W", W), ("U", U), ("b", b)):
            if not np.all(np.isfinite(tensor.data)):
                errors.append(f"LSTM {label} must be finite.")

        if len(errors) > 0:
            raise ShapeError('\n'.join(errors))

        self.W = W
        self.U = U
        self.b = b

    @classmethod
    def create(cls,
        input_dim: int,
        hidden: int,
        rng: Optional[np.random.Generator] = None,
        dtype: Union[str, np.dtype, None] = None,
        zero: bool = False
    ) -> "LstmParams":
        """Uniform init in [-1/sqrt(H), 1/sqrt(H)] (or all zeros)."""

        dtype = resolve_dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1 / np.sqrt(hidden)

        def draw(shape):
            if zero:
                return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
            return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)

        return cls(draw((4 * hidden, input_dim)), draw((4 * hidden, hidden)), draw(4 * hidden))

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        return { f"{prefix}W": self.W, f"{prefix}U": self.U, f"{prefix}b": self.b }

class Projection:
    """Affine map from BiLSTM features to K+1 class logits (blank at index 0)."""

    def __init__(self, W: Tensor, b: Tensor):
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ShapeError(
                f"Projection must be W [K+1, D] with b [K+1]; got {list(W.shape)} and "
                f"{list(b.shape)}."
            )

        self.W = W
        self.b = b

    @classmethod
    def create(cls,
        features: int,
        classes: int,
        rng: Optional[np.random.Generator] = None,
        dtype: Union[str, np.dtype, None] = None
    ) -> "Projection":
        dtype = resolve_dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        weight = rng.standard_normal((classes, features)) * np.sqrt(2.0 / features)

        return cls(
            Tensor(weight.astype(dtype), requires_grad=True),
            Tensor(np.zeros(classes, dtype=dtype), requires_grad=True)
        )

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        return { f"{prefix}W": self.W, f"{prefix}b": self.b }

# == FRAMES ====================================================================================== #

class FrameSequence:
    """Frames `[T, D]` (or `[T, N, D]` for a batch), one per width position."""

    def __init__(self, frames: Tensor):
        if frames.ndim not in (2, 3):
            raise ShapeError(f"Frames must be [T, D] or [T, N, D]; got rank {frames.ndim}.")
        if frames.shape[0] < 1:
            raise ShapeError("A frame sequence needs at least one frame.")

        self.frames = frames

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def features(self) -> int:
        return self.frames.shape[-1]

    @property
    def batched(self) -> bool:
        return self.frames.ndim == 3

def map_to_sequence(
    x: Tensor,
    batched: bool = False
) -> Union[List[FrameSequence], FrameSequence]:
    """Turns a height-1 map `[N, C, 1, W]` into frames: column `w` becomes frame `w`.

    Returns one `FrameSequence` per batch item, or a single `[W, N, C]` sequence when
    `batched` is set.
    """

    if x.ndim != 4:
        raise ShapeError(f"map_to_sequence expects [N, C, 1, W]; got rank {x.ndim}.")
    if x.shape[2] != 1:
        raise ShapeError(f"map_to_sequence needs height 1; got height {x.shape[2]}.")

    N, C, _, W = x.shape
    flat = reshape(x, (N, C, W))

    if batched:
        return FrameSequence(transpose(flat, (2, 0, 1)))

    return [FrameSequence(transpose(take(flat, n, axis=0), (1, 0))) for n in range(N)]

# == LSTM ======================================================================================== #

def _check_cell_inputs(xt: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams) -> None:
    errors = []

    if xt.shape[-1] != p.input_dim:
        errors.append(f"Frame has {xt.shape[-1]} features; LSTM expects {p.input_dim}.")
    if h_prev.shape[-1] != p.hidden or c_prev.shape != h_prev.shape:
        errors.append(
            f"States must both have {p.hidden} features; got {list(h_prev.shape)} and "
            f"{list(c_prev.shape)}."
        )
    if xt.shape[:-1] != h_prev.shape[:-1]:
        errors.append("Frame and state batch extents differ.")

    if len(errors) > 0:
        raise ShapeError('\n'.join(errors))

def _sigmoid(values: Array) -> Array:
    return 0.5 * (1 + np.tanh(0.5 * values))

def lstm_cell(
    xt: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    p: LstmParams
) -> Tuple[Tensor, Tensor]:
    """One LSTM step; inputs may carry a leading batch axis.

    i, f, o = sigmoid(.), g = tanh(.), c = f*c_prev + i*g, h = o*tanh(c).
    """

    _check_cell_inputs(xt, h_prev, c_prev, p)
    H = p.hidden

    z = xt.data @ p.W.data.T + h_prev.data @ p.U.data.T + p.b.data
    i = _sigmoid(z[..., 0:H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:4 * H])

    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc

    def backward(upstream):
        dh, dc = upstream
        dh = np.zeros_like(h) if dh is None else dh
        dc = np.zeros_like(c) if dc is None else dc

        dc = dc + dh * o * (1 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1 - i),
            dc * c_prev.data * f * (1 - f),
            dc * i * (1 - g * g),
            dh * tc * o * (1 - o)
        ], axis=-1)

        dz2 = dz.reshape(-1, 4 * H)
        dW = dz2.T @ xt.data.reshape(-1, p.input_dim)
        dU = dz2.T @ h_prev.data.reshape(-1, H)
        db = dz2.sum(axis=0)

        return dz @ p.W.data, dz @ p.U.data, dc * f, dW, dU, db

    return make_output("lstm_cell", (h, c), (xt, h_prev, c_prev, p.W, p.U, p.b), backward)

def _run_direction(frames: Tensor, p: LstmParams, reverse: bool) -> Tensor:
    state_shape = frames.shape[1:-1] + (p.hidden,)
    h = Tensor(np.zeros(state_shape, dtype=frames.dtype))
    c = Tensor(np.zeros(state_shape, dtype=frames.dtype))

    steps = range(frames.shape[0] - 1, -1, -1) if reverse else range(frames.shape[0])
    outputs: Dict[int, Tensor] = {}

    for t in steps:
        h, c = lstm_cell(take(frames, t, axis=0), h, c, p)
        outputs[t] = h

    return stack([outputs[t] for t in range(frames.shape[0])], axis=0)

def bilstm_layer(seq: FrameSequence, fwd: LstmParams, bwd: LstmParams) -> FrameSequence:
    """Left-to-right and right-to-left passes from zero states, concatenated per frame."""

    if fwd.input_dim != seq.features or bwd.input_dim != seq.features:
        raise ShapeError(
            f"Sequence has {seq.features} features; directions expect {fwd.input_dim} and "
            f"{bwd.input_dim}."
        )

    forward = _run_direction(seq.frames, fwd, reverse=False)
    backward = _run_direction(seq.frames, bwd, reverse=True)

    return FrameSequence(concat([forward, backward], axis=-1))

# == PROJECTION ================================================================================== #

def project_logits(seq: FrameSequence, W: Tensor, b: Tensor) -> Tensor:
    """Per-frame affine map to `[T, K+1]` (or `[T, N, K+1]`); no softmax."""

    if W.ndim != 2 or W.shape[1] != seq.features or b.shape != (W.shape[0],):
        raise ShapeError(
            f"Projection {list(W.shape)} / {list(b.shape)} does not fit {seq.features} "
            "features."
        )

    frames = seq.frames
    out = frames.data @ W.data.T + b.data

    def backward(upstream):
        (g,) = upstream
        g2 = g.reshape(-1, W.shape[0])
        dW = g2.T @ frames.data.reshape(-1, W.shape[1])
        return g @ W.data, dW, g2.sum(axis=0)

    return make_output("project_logits", out, (frames, W, b), backward)
