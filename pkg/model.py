"""Recognition network assembly and checkpoint persistence."""

# == IMPORTS ===================================================================================== #

import logging
import struct

from dataclasses import dataclass, field, replace
from typing import *

import numpy as np

from ctc import DIGITS, Charset, CharsetError
from nn_ops import (
    BatchNorm, ConvKernel, ConvLayer, PoolLayer, ResidualBlock, make_offset_branch
)
from sequence_ops import LstmParams, Projection, bilstm_layer, map_to_sequence, project_logits
from settings import (
    ConfigError, format_settings, parse_bool, parse_int, parse_int_list, parse_settings,
    parse_size
)
from tensor_core import Array, ShapeError, Tensor, resolve_dtype, take

# == GLOBALS ===================================================================================== #

logger = logging.getLogger(__name__)

LARGE_INPUT = (200, 64)
SMALL_INPUT = (100, 32)

DEFAULT_WIDTHS = (64, 128, 256, 256, 512, 512, 512)
DEFORMABLE_DOMAIN = frozenset({ 3, 4, 5 })
MAX_CONVS = 7

# conv index (1-based) -> (window, stride) of the max pool that follows it
POOL_AFTER = {
    1: ((2, 2), (2, 2)),
    2: ((2, 2), (2, 2)),
    4: ((2, 1), (2, 1)),
    6: ((2, 1), (2, 1))
}
RESIDUAL_AFTER = (3, 5)

# final fixed pool when adaptive pooling is off
FIXED_FINAL_POOL = ((2, 1), (2, 1))

RNN_LAYERS = 2

CHECKPOINT_MAGIC = b"DFCR"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = { np.dtype(np.float32): 1, np.dtype(np.float64): 2 }
_TAG_DTYPES = { tag: dtype for dtype, tag in _DTYPE_TAGS.items() }

# == ERRORS ====================================================================================== #

class CheckpointError(ValueError):
    """Base class for checkpoint loading failures."""

class CorruptCheckpointError(CheckpointError):
    """The file is truncated, has a bad magic, or is otherwise unreadable."""

class CheckpointVersionError(CheckpointError):
    """The file was written by an unsupported format version."""

class CheckpointShapeError(CheckpointError):
    """A stored tensor does not match the model its config describes."""

# == CONFIGURATION =============================================================================== #

@dataclass
class ModelConfig:
    """Architecture of one recognizer.

    Parameters
    ==========
    input_size: `(int, int)` = `(100, 32)`
        Input (width, height) in pixels.

    input_channels: `int` = `1`
        1 for grayscale, 3 for colour.

    conv_widths: `Tuple[int, ...]`
        Output channels of each 3x3 convolution, 1 to 7 entries.

    deformable_set: `FrozenSet[int]`
        1-based indices of the convolutions made deformable; a subset of {3, 4, 5}.

    use_residual: `bool` = `False`
        Insert a residual block after convolutions 3 and 5.

    use_adaptive_pool: `bool` = `True`
        Reduce the final feature height to 1 with adaptive max pooling instead of a fixed
        (2, 1) pool.

    charset: `str` = digits
        The K recognizable symbols.

    hidden: `int` = `256`
        Width of each LSTM direction.

    seed: `int` = `0`
        Initialization seed.

    dtype: `str` = `"float32"`
    """

    input_size: Tuple[int, int] = SMALL_INPUT
    input_channels: int = 1
    conv_widths: Tuple[int, ...] = DEFAULT_WIDTHS
    deformable_set: FrozenSet[int] = frozenset()
    use_residual: bool = False
    use_adaptive_pool: bool = True
    charset: str = DIGITS
    hidden: int = 256
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.conv_widths = tuple(self.conv_widths)
        self.deformable_set = frozenset(self.deformable_set)

    def validate(self) -> "ModelConfig":
        """Raises `ConfigError` listing every problem; returns self when valid."""

        errors = []

        if len(self.input_size) != 2 or min(self.input_size) < 1:
            errors.append(f"input_size must be two positive extents; got {self.input_size}.")
        if self.input_channels not in (1, 3):
            errors.append(f"input_channels must be 1 or 3; got {self.input_channels}.")
        if not 1 <= len(self.conv_widths) <= MAX_CONVS:
            errors.append(
                f"conv_widths must hold 1 to {MAX_CONVS} entries; got {len(self.conv_widths)}."
            )
        if any(width < 1 for width in self.conv_widths):
            errors.append("conv_widths entries must be positive.")

        outside = sorted(self.deformable_set - DEFORMABLE_DOMAIN)
        if len(outside) > 0:
            errors.append(
                f"deformable_set indices must be within {{3,4,5}}; got {outside}."
            )
        beyond = sorted(i for i in self.deformable_set if i > len(self.conv_widths))
        if len(beyond) > 0:
            errors.append(f"deformable_set refers to missing convolutions {beyond}.")

        if self.hidden < 1:
            errors.append(f"hidden must be positive; got {self.hidden}.")

        try:
            Charset(self.charset)
        except ValueError as e:
            errors.append(str(e))

        try:
            resolve_dtype(self.dtype)
        except ValueError as e:
            errors.append(str(e))

        if len(errors) == 0:
            try:
                self.feature_extent()
            except ConfigError as e:
                errors.append(str(e))

        if len(errors) > 0:
            raise ConfigError('\n'.join(errors))

        return self

    def pool_plan(self) -> List[Tuple[int, Tuple[int, int], Tuple[int, int]]]:
        """(after conv, window, stride) for each fixed pool of the conv stack."""

        return [
            (index, *POOL_AFTER[index])
            for index in range(1, len(self.conv_widths) + 1)
            if index in POOL_AFTER
        ]

    def stack_extent(self) -> Tuple[int, int]:
        """(height, width) after the conv stack's fixed pools, before the final pool."""

        width, height = self.input_size

        for index, window, stride in self.pool_plan():
            if height < window[0] or width < window[1]:
                raise ConfigError(
                    f"Input {self.input_size[0]}x{self.input_size[1]} is too small for the "
                    f"pool after conv {index}."
                )
            height = (height - window[0]) // stride[0] + 1
            width = (width - window[1]) // stride[1] + 1

        return height, width

    def feature_extent(self) -> Tuple[int, int]:
        """(height, width) of the final feature map; the width is the frame count T."""

        height, width = self.stack_extent()

        if self.use_adaptive_pool or height == 1:
            return 1, width

        window, stride = FIXED_FINAL_POOL
        if height >= window[0]:
            height = (height - window[0]) // stride[0] + 1
        if height != 1:
            raise ConfigError(
                f"The pooling schedule cannot reach height 1 for input height "
                f"{self.input_size[1]} without adaptive pooling."
            )

        return height, width

    @property
    def frames(self) -> int:
        return self.feature_extent()[1]

    def to_settings(self) -> Dict[str, str]:
        return {
            "input_size": f"{self.input_size[0]}x{self.input_size[1]}",
            "input_channels": str(self.input_channels),
            "conv_widths": ",".join(str(w) for w in self.conv_widths),
            "deformable_set": ",".join(str(i) for i in sorted(self.deformable_set)),
            "use_residual": str(self.use_residual).lower(),
            "use_adaptive_pool": str(self.use_adaptive_pool).lower(),
            "charset": self.charset,
            "hidden": str(self.hidden),
            "seed": str(self.seed),
            "dtype": str(resolve_dtype(self.dtype))
        }

    def to_text(self) -> str:
        """Canonical `key = value` text; identical configs give identical text."""

        return format_settings(self.to_settings())

    @classmethod
    def from_settings(cls,
        settings: Mapping[str, str],
        base: Optional["ModelConfig"] = None
    ) -> "ModelConfig":
        """Applies raw settings values on top of `base` (defaults when omitted)."""

        parsers = {
            "input_size": parse_size,
            "input_channels": parse_int,
            "conv_widths": parse_int_list,
            "deformable_set": lambda v: frozenset(parse_int_list(v)),
            "use_residual": parse_bool,
            "use_adaptive_pool": parse_bool,
            "charset": str,
            "hidden": parse_int,
            "seed": parse_int,
            "dtype": str
        }

        values = {}
        errors = []

        for key, raw in settings.items():
            if key not in parsers:
                errors.append(f"Unknown model setting '{key}'.")
                continue
            try:
                values[key] = parsers[key](raw)
            except ValueError as e:
                errors.append(f"{key}: {e}")

        if len(errors) > 0:
            raise ConfigError('\n'.join(errors))

        return replace(base if base is not None else cls(), **values).validate()

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_settings(parse_settings(text, "<config>"))

def tiny_config(**overrides) -> ModelConfig:
    """Two convolutions, hidden 8, 32x16 input, float64."""

    base = ModelConfig(
        input_size = (32, 16),
        conv_widths = (4, 6),
        hidden = 8,
        dtype = "float64"
    )
    return replace(base, **overrides).validate()

def gradcheck_config(**overrides) -> ModelConfig:
    """Three convolutions with a deformable third layer and a residual block, float64."""

    base = ModelConfig(
        input_size = (16, 8),
        conv_widths = (2, 3, 3),
        deformable_set = { 3 },
        use_residual = True,
        hidden = 3,
        charset = "012",
        dtype = "float64"
    )
    return replace(base, **overrides).validate()

# == MODEL ======================================================================================= #

Stage = Union[ConvLayer, PoolLayer, ResidualBlock]

class Model:
    """Convolutional stack, two BiLSTM layers, and a logits head.

    Stages run in order; their names (`conv3`, `res1`, `pool2`, ...) prefix parameter names.
    """

    def __init__(self,
        config: ModelConfig,
        stages: List[Tuple[str, Stage]],
        rnn: List[Tuple[LstmParams, LstmParams]],
        head: Projection
    ):
        self.config = config
        self.stages = stages
        self.rnn = rnn
        self.head = head
        self.step = 0

    @property
    def charset(self) -> Charset:
        return Charset(self.config.charset)

    def label_charset(self, case_insensitive: bool = False) -> Charset:
        """The charset labels are encoded with, folded to lower case when asked.

        Raises `CharsetError` when folding merges symbols.
        """

        charset = Charset(self.config.charset, case_insensitive)
        if len(charset) != len(self.config.charset):
            raise CharsetError(
                f"Charset '{self.config.charset}' folds to '{charset.symbols}'; "
                "case-insensitive mode needs a charset without case pairs."
            )
        return charset

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}

        for name, stage in self.stages:
            if not isinstance(stage, PoolLayer):
                params.update(stage.parameters(f"{name}."))

        for depth, (fwd, bwd) in enumerate(self.rnn, start=1):
            params.update(fwd.parameters(f"rnn{depth}.fwd."))
            params.update(bwd.parameters(f"rnn{depth}.bwd."))

        params.update(self.head.parameters("head."))
        return params

    def buffers(self) -> Dict[str, Array]:
        buffers: Dict[str, Array] = {}

        for name, stage in self.stages:
            if not isinstance(stage, PoolLayer):
                buffers.update(stage.buffers(f"{name}."))

        return buffers

    def zero_grad(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()

    def forward(self, images: Tensor, mode: str = "train") -> List[Tensor]:
        """Per-item logits `[T, K+1]` for a batch `[N, C, H, W]`."""

        width, height = self.config.input_size
        expected = (self.config.input_channels, height, width)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(
                f"Model expects images [N, {expected[0]}, {expected[1]}, {expected[2]}]; got "
                f"{list(images.shape)}."
            )

        x = images
        for _, stage in self.stages:
            x = stage.forward(x, mode)

        seq = map_to_sequence(x, batched=True)
        for fwd, bwd in self.rnn:
            seq = bilstm_layer(seq, fwd, bwd)

        logits = project_logits(seq, self.head.W, self.head.b)
        return [take(logits, n, axis=1) for n in range(images.shape[0])]

    def trace_stack(self) -> Tuple[List[str], List[Union[ConvLayer, PoolLayer]]]:
        """Spatial stages in forward order, residual blocks opened into their convolutions.

        The residual skip path is not part of the trace.
        """

        names = []
        stack = []

        for name, stage in self.stages:
            if isinstance(stage, ResidualBlock):
                names += [f"{name}.conv1", f"{name}.conv2"]
                stack += [stage.conv1, stage.conv2]
            else:
                names.append(name)
                stack.append(stage)

        return names, stack

def build(config: ModelConfig) -> Model:
    """Builds a freshly initialized model; identical configs give identical parameters."""

    config.validate()
    rng = np.random.default_rng(config.seed)
    dtype = resolve_dtype(config.dtype)

    stages: List[Tuple[str, Stage]] = []
    channels = config.input_channels
    pools = { index: (window, stride) for index, window, stride in config.pool_plan() }
    residuals = 0

    for index, width in enumerate(config.conv_widths, start=1):
        kernel = ConvKernel.create(channels, width, 3, 1, 1, rng=rng, dtype=dtype)
        branch = make_offset_branch(kernel) if index in config.deformable_set else None
        stages.append((f"conv{index}", ConvLayer(kernel, BatchNorm(width, dtype), branch)))
        channels = width

        if config.use_residual and index in RESIDUAL_AFTER:
            residuals += 1
            stages.append((f"res{residuals}", ResidualBlock.create(width, rng, dtype)))

        if index in pools:
            stages.append((f"pool{index}", PoolLayer(*pools[index])))

    if config.use_adaptive_pool:
        stages.append(("pool_final", PoolLayer(target=(1, config.frames))))
    elif config.stack_extent()[0] != 1:
        stages.append(("pool_final", PoolLayer(*FIXED_FINAL_POOL)))

    rnn = []
    features = channels
    for _ in range(RNN_LAYERS):
        rnn.append((
            LstmParams.create(features, config.hidden, rng, dtype),
            LstmParams.create(features, config.hidden, rng, dtype)
        ))
        features = 2 * config.hidden

    head = Projection.create(features, len(config.charset) + 1, rng, dtype)

    model = Model(config, stages, rnn, head)
    logger.debug(
        "Built model with %d parameter tensors (%d values)",
        len(model.parameters()), sum(t.size for t in model.parameters().values())
    )

    return model

# == CHECKPOINTS ================================================================================= #

@dataclass
class Checkpoint:
    """Everything `save` writes: config, named tensors, and the training step counter."""

    config: ModelConfig
    tensors: Dict[str, Array] = field(default_factory=dict)
    step: int = 0
    version: int = CHECKPOINT_VERSION

    @classmethod
    def of(cls, model: Model) -> "Checkpoint":
        tensors = { name: t.data for name, t in model.parameters().items() }
        tensors.update(model.buffers())
        return cls(model.config, tensors, model.step)

    def to_bytes(self) -> bytes:
        config = self.config.to_text().encode("utf-8")
        chunks = [
            CHECKPOINT_MAGIC,
            struct.pack("<II", self.version, len(config)),
            config,
            struct.pack("<QI", self.step, len(self.tensors))
        ]

        for name, array in self.tensors.items():
            encoded = name.encode("utf-8")
            array = np.ascontiguousarray(array)
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<BB", _DTYPE_TAGS[array.dtype], array.ndim))
            chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
            chunks.append(array.astype(array.dtype.newbyteorder('<'), copy=False).tobytes())

        return b"".join(chunks)

class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise CorruptCheckpointError(f"Checkpoint '{self.source}' is truncated.")

        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

def save(model: Model, checkpoint_file: str) -> None:
    """Writes the model, its buffers, and `model.step` to `checkpoint_file`."""

    with open(checkpoint_file, 'wb') as f:
        f.write(Checkpoint.of(model).to_bytes())

    logger.debug("Saved checkpoint %s at step %d", checkpoint_file, model.step)

def read_checkpoint(checkpoint_file: str) -> Checkpoint:
    """Parses and validates a checkpoint file against the model its config describes.

    Raises `CorruptCheckpointError`, `CheckpointVersionError`, or `CheckpointShapeError`.
    """

    with open(checkpoint_file, 'rb') as f:
        reader = _Reader(f.read(), checkpoint_file)

    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"'{checkpoint_file}' is not a checkpoint (bad magic).")

    version, config_length = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint '{checkpoint_file}' has format version {version}; this build reads "
            f"version {CHECKPOINT_VERSION}."
        )

    try:
        config = ModelConfig.from_text(reader.take(config_length).decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as e:
        raise CorruptCheckpointError(f"Checkpoint '{checkpoint_file}' has a bad config: {e}")

    reference = build(config)
    expected = { name: t.data for name, t in reference.parameters().items() }
    expected.update(reference.buffers())

    step, count = reader.unpack("<QI")
    tensors: Dict[str, Array] = {}

    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8", errors="replace")
        tag, rank = reader.unpack("<BB")
        shape = reader.unpack(f"<{rank}I")

        if tag not in _TAG_DTYPES:
            raise CorruptCheckpointError(f"Record '{name}' has unknown dtype tag {tag}.")
        if name not in expected:
            raise CheckpointShapeError(f"Record '{name}' does not belong to this model.")
        if tuple(shape) != expected[name].shape:
            raise CheckpointShapeError(
                f"Record '{name}' has shape {list(shape)}; the config needs "
                f"{list(expected[name].shape)}."
            )

        dtype = _TAG_DTYPES[tag].newbyteorder('<')
        payload = reader.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(
            expected[name].dtype
        )

    if reader.offset != len(reader.data):
        raise CorruptCheckpointError(f"Checkpoint '{checkpoint_file}' has trailing bytes.")

    missing = sorted(set(expected) - set(tensors))
    if len(missing) > 0:
        raise CheckpointShapeError(f"Checkpoint lacks records: {', '.join(missing)}.")

    return Checkpoint(config, tensors, step, version)

def load(checkpoint_file: str) -> Model:
    """Rebuilds the saved model; bit-exact for every parameter and buffer."""

    checkpoint = read_checkpoint(checkpoint_file)
    model = build(checkpoint.config)

    for name, tensor in model.parameters().items():
        tensor.data[...] = checkpoint.tensors[name]
    for name, buffer in model.buffers().items():
        buffer[...] = checkpoint.tensors[name]

    model.step = checkpoint.step
    logger.debug("Loaded checkpoint %s at step %d", checkpoint_file, model.step)

    return model
