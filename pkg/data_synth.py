"""Synthetic regular, curved, and tilted text images with labels, and dataset IO."""

# == IMPORTS ===================================================================================== #

import enum
import logging
import os

from dataclasses import dataclass, field
from typing import *

import numpy as np

from PIL import Image
from tqdm import tqdm

from ctc import Charset, LabelSequence
from tensor_core import Array, Tensor

# == GLOBALS ===================================================================================== #

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
IMAGE_DIR = "images"

DEFAULT_CANVAS = (100, 32)
MAX_TEXT_LENGTH = 12
LABEL_LENGTHS = (1, 8)

NOISE_SIGMA = 0.05
MAX_ROTATION = 35.0
MARGIN = 1

GLYPH_WIDTH = 5
GLYPH_HEIGHT = 7
GLYPH_ADVANCE = GLYPH_WIDTH + 1

class Distortion(str, enum.Enum):
    REGULAR = "regular"
    CURVED = "curved"
    TILTED = "tilted"

# == ERRORS ====================================================================================== #

class RenderError(ValueError):
    """Raised when text cannot be drawn inside the canvas."""

# == FONT ======================================================================================== #

_FONT_ROWS = {
    '0': (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    '1': ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    '2': (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    '3': ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    '4': ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    '5': ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    '6': ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    '7': ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    '8': (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    '9': (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
    'A': (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    'B': ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    'C': (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    'D': ("###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."),
    'E': ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    'F': ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    'G': (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"),
    'H': ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    'I': (".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    'J': ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    'K': ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    'L': ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    'M': ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    'N': ("#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"),
    'O': (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    'P': ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    'Q': (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    'R': ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    'S': (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    'T': ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    'U': ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    'V': ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    'W': ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."),
    'X': ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    'Y': ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    'Z': ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####")
}

FONT: Dict[str, Array] = {
    symbol: np.array([[ch == '#' for ch in row] for row in rows], dtype=np.float64)
    for symbol, rows in _FONT_ROWS.items()
}

def glyph(symbol: str) -> Array:
    """The 7x5 bitmap of `symbol`; letters render as capitals."""

    key = symbol.upper()
    if key not in FONT:
        raise RenderError(f"The built-in font has no glyph for '{symbol}'.")

    return FONT[key]

def word_mask(text: str, scale: int = 1) -> Array:
    """Ink coverage of `text` on one line, glyphs one font pixel apart."""

    line = np.zeros((GLYPH_HEIGHT, GLYPH_ADVANCE * len(text) - 1))
    for i, symbol in enumerate(text):
        line[:, i * GLYPH_ADVANCE:i * GLYPH_ADVANCE + GLYPH_WIDTH] = glyph(symbol)

    return np.kron(line, np.ones((scale, scale)))

# == SAMPLES ===================================================================================== #

@dataclass(frozen=True)
class DistortionParams:
    """Rotation in degrees (tilted), curve amplitude and period in pixels (curved)."""

    rotation: float = 0.0
    amplitude: float = 0.0
    period: float = 0.0

@dataclass
class SyntheticSample:
    """One rendered text image, `[C, H, W]` in [-1, 1]."""

    image: Tensor
    text: str
    distortion: Distortion
    params: DistortionParams
    seed: int
    scale: int = 1
    glyph_centers: List[Tuple[float, float]] = field(default_factory=list)
    baseline: Optional[Array] = None

def _largest_scale(text: str, width: int, height: int) -> int:
    return min(
        (width - 2 * MARGIN) // (GLYPH_ADVANCE * len(text) - 1),
        (height - 2 * MARGIN) // GLYPH_HEIGHT
    )

def _rotated(mask: Array, degrees: float) -> Array:
    image = Image.fromarray(np.round(mask * 255).astype(np.uint8), mode="L")
    rotated = image.rotate(degrees, resample=Image.BILINEAR, expand=True)
    return np.asarray(rotated, dtype=np.float64) / 255

def _fits(shape: Tuple[int, int], canvas: Tuple[int, int]) -> bool:
    return shape[0] <= canvas[1] - 2 * MARGIN and shape[1] <= canvas[0] - 2 * MARGIN

def _layout_regular(text, canvas, rng, params):
    scale = _largest_scale(text, *canvas)
    if scale < 1:
        raise RenderError(f"'{text}' does not fit a {canvas[0]}x{canvas[1]} canvas.")

    mask = word_mask(text, scale)
    return mask, scale, params, None

def _layout_curved(text, canvas, rng, params):
    width, height = canvas
    word_width = GLYPH_ADVANCE * len(text) - 1

    if params is None:
        room = (height - 2 * MARGIN - GLYPH_HEIGHT) // 2
        amplitude = float(min(rng.uniform(1.0, height / 4), max(room, 0)))
    else:
        amplitude = params.amplitude

    if amplitude > height / 4:
        raise RenderError(f"Curve amplitude {amplitude} exceeds a quarter of the canvas height.")

    reach = int(np.round(amplitude))
    scale = min(
        (width - 2 * MARGIN) // word_width,
        (height - 2 * MARGIN - 2 * reach) // GLYPH_HEIGHT
    )
    if scale < 1:
        raise RenderError(
            f"'{text}' curved by {amplitude:.1f}px does not fit a {width}x{height} canvas."
        )

    mask = word_mask(text, scale)
    columns = mask.shape[1]

    if params is None:
        # multiples of 4 put a crest on an integer column
        quarters = rng.integers(max(1, columns // 8), max(1, columns // 4) + 1)
        params = DistortionParams(amplitude=amplitude, period=float(4 * quarters))

    if params.period <= 0:
        raise RenderError("Curve period must be positive.")

    shifts = np.round(amplitude * np.sin(2 * np.pi * np.arange(columns) / params.period))
    shifts = shifts.astype(np.int64)

    curved = np.zeros((mask.shape[0] + 2 * reach, columns))
    for x in range(columns):
        top = reach + shifts[x]
        curved[top:top + mask.shape[0], x] = mask[:, x]

    return curved, scale, params, shifts

def _layout_tilted(text, canvas, rng, params):
    if params is None:
        draw = rng.uniform(-1.0, 1.0)
        # shrink the angle until the word fits; 0 degrees always fits if the text does
        for factor in np.linspace(1.0, 0.0, 8):
            degrees = float(draw * MAX_ROTATION * factor)
            for scale in range(max(_largest_scale(text, *canvas), 0), 0, -1):
                rotated = _rotated(word_mask(text, scale), degrees)
                if _fits(rotated.shape, canvas):
                    return rotated, scale, DistortionParams(rotation=degrees), None

        raise RenderError(f"'{text}' does not fit a {canvas[0]}x{canvas[1]} canvas.")

    if abs(params.rotation) > MAX_ROTATION:
        raise RenderError(f"Rotation {params.rotation} exceeds {MAX_ROTATION} degrees.")

    for scale in range(max(_largest_scale(text, *canvas), 0), 0, -1):
        rotated = _rotated(word_mask(text, scale), params.rotation)
        if _fits(rotated.shape, canvas):
            return rotated, scale, params, None

    raise RenderError(
        f"'{text}' rotated by {params.rotation} degrees does not fit a "
        f"{canvas[0]}x{canvas[1]} canvas."
    )

_LAYOUTS = {
    Distortion.REGULAR: _layout_regular,
    Distortion.CURVED: _layout_curved,
    Distortion.TILTED: _layout_tilted
}

def _colours(rng: np.random.Generator, channels: int) -> Tuple[Array, Array]:
    dark = rng.uniform(0.0, 0.35, channels)
    light = rng.uniform(0.65, 1.0, channels)
    return (dark, light) if rng.random() < 0.5 else (light, dark)

def render_sample(
    text: str,
    distortion: Union[Distortion, str],
    seed: int,
    canvas: Tuple[int, int] = DEFAULT_CANVAS,
    params: Optional[DistortionParams] = None,
    channels: int = 1
) -> SyntheticSample:
    """Renders `text` with the built-in bitmap font.

    Parameters
    ==========
    text: `str`
        1 to 12 symbols the font covers.

    distortion: `Distortion | str`
        `regular`, `curved` (baseline shifted by A*sin(2*pi*x/period), A at most H/4), or
        `tilted` (whole word rotated by at most 35 degrees).

    seed: `int`
        Fixes placement, colours, drawn distortion parameters, and noise.

    canvas: `(int, int)` = `(100, 32)`
        Canvas (width, height).

    params: `Optional[DistortionParams]` = `None`
        Explicit distortion parameters; drawn from `seed` when omitted. Explicit parameters
        are never adjusted, so a word that cannot fit raises `RenderError`.

    channels: `int` = `1`
        1 for grayscale, 3 for tinted colour.
    """

    distortion = Distortion(distortion)
    errors = []

    if not 1 <= len(text) <= MAX_TEXT_LENGTH:
        errors.append(f"Text length must be 1 to {MAX_TEXT_LENGTH}; got {len(text)}.")
    if channels not in (1, 3):
        errors.append(f"channels must be 1 or 3; got {channels}.")
    if min(canvas) < 1:
        errors.append(f"Canvas extents must be positive; got {canvas}.")

    if len(errors) > 0:
        raise RenderError('\n'.join(errors))

    rng = np.random.default_rng(seed)
    mask, scale, params, shifts = _LAYOUTS[distortion](text, canvas, rng, params)
    params = params if params is not None else DistortionParams()

    width, height = canvas
    top = int(rng.integers(MARGIN, height - MARGIN - mask.shape[0] + 1))
    left = int(rng.integers(MARGIN, width - MARGIN - mask.shape[1] + 1))

    coverage = np.zeros((height, width))
    coverage[top:top + mask.shape[0], left:left + mask.shape[1]] = mask

    background, ink = _colours(rng, channels)
    pixels = (
        background[:, None, None] * (1 - coverage)[None]
        + ink[:, None, None] * coverage[None]
    )
    pixels = np.clip(pixels + rng.normal(0.0, NOISE_SIGMA, pixels.shape), 0.0, 1.0)

    centers = []
    if distortion == Distortion.REGULAR:
        centers = [
            (
                left + (i * GLYPH_ADVANCE + GLYPH_WIDTH / 2) * scale - 0.5,
                top + GLYPH_HEIGHT * scale / 2 - 0.5
            )
            for i in range(len(text))
        ]

    return SyntheticSample(
        image = Tensor(pixels * 2 - 1),
        text = text,
        distortion = distortion,
        params = params,
        seed = seed,
        scale = scale,
        glyph_centers = centers,
        baseline = shifts
    )

def to_pixels(image: Union[Tensor, Array]) -> Array:
    """[-1, 1] `[C, H, W]` values to 8-bit `[H, W]` or `[H, W, 3]` pixels."""

    values = image.data if isinstance(image, Tensor) else np.asarray(image)
    pixels = np.round((np.clip(values, -1, 1) + 1) * 127.5).astype(np.uint8)

    return pixels[0] if pixels.shape[0] == 1 else np.moveaxis(pixels, 0, -1)

# == DATASETS ==================================================================================== #

class ManifestRecord(NamedTuple):
    path: str
    label: str
    tag: str

@dataclass
class DatasetManifest:
    """Records of a generated dataset; paths are relative to `root`."""

    root: str
    records: List[ManifestRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def path(self) -> str:
        return os.path.join(self.root, MANIFEST_NAME)

    def counts(self) -> Dict[str, int]:
        tally: Dict[str, int] = {}
        for record in self.records:
            tally[record.tag] = tally.get(record.tag, 0) + 1
        return tally

    def write(self) -> None:
        with open(self.path, 'w', encoding="utf-8", newline="\n") as f:
            for record in self.records:
                f.write(f"{record.path}\t{record.label}\t{record.tag}\n")

    @classmethod
    def read(cls, manifest_path: str) -> "DatasetManifest":
        root = os.path.dirname(os.path.abspath(manifest_path))
        records = []
        errors = []

        with open(manifest_path, 'r', encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if line == "":
                    continue

                parts = line.split("\t")
                if len(parts) != 3 or parts[1] == "":
                    errors.append(f"{manifest_path}:{number}: expected 'path<TAB>label<TAB>tag'.")
                    continue

                records.append(ManifestRecord(*parts))

        if len(errors) > 0:
            raise ValueError('\n'.join(errors))

        return cls(root, records)

def random_text(rng: np.random.Generator, charset: Charset,
    lengths: Tuple[int, int] = LABEL_LENGTHS
) -> str:
    length = int(rng.integers(lengths[0], lengths[1] + 1))
    return "".join(charset.symbols[i] for i in rng.integers(0, len(charset), length))

def generate_dataset(
    counts: Mapping[Union[Distortion, str], int],
    charset: Union[Charset, str],
    seed: int,
    out_dir: str,
    canvas: Tuple[int, int] = DEFAULT_CANVAS,
    channels: int = 1,
    lengths: Tuple[int, int] = LABEL_LENGTHS,
    progress: bool = False
) -> DatasetManifest:
    """Renders and writes a labeled dataset with its manifest.

    Samples are numbered in the order regular, curved, tilted; sample `i` is drawn from seed
    `seed ^ i`, so the output is a pure function of the arguments.

    Parameters
    ==========
    counts: `Mapping[Distortion | str, int]`
        Number of samples per distortion; missing distortions count zero.

    lengths: `(int, int)` = `(1, 8)`
        Inclusive range of label lengths, drawn uniformly.
    """

    charset = charset if isinstance(charset, Charset) else Charset(charset)
    counts = { Distortion(tag): int(n) for tag, n in counts.items() }

    errors = []
    if any(n < 0 for n in counts.values()):
        errors.append("Sample counts must be non-negative.")
    if not 1 <= lengths[0] <= lengths[1] <= MAX_TEXT_LENGTH:
        errors.append(f"Label lengths must lie within 1..{MAX_TEXT_LENGTH}; got {lengths}.")

    if len(errors) > 0:
        raise ValueError('\n'.join(errors))

    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest(out_dir)
    total = sum(counts.values())

    if total > 0:
        os.makedirs(os.path.join(out_dir, IMAGE_DIR), exist_ok=True)

    jobs = [tag for tag in Distortion for _ in range(counts.get(tag, 0))]
    extension = "pgm" if channels == 1 else "ppm"

    for index, tag in enumerate(tqdm(jobs, desc="render", unit="img", disable=not progress)):
        sample_seed = seed ^ index
        text = random_text(np.random.default_rng(sample_seed), charset, lengths)
        sample = render_sample(text, tag, sample_seed, canvas, channels=channels)

        relative = f"{IMAGE_DIR}/{index:06d}.{extension}"
        Image.fromarray(to_pixels(sample.image)).save(os.path.join(out_dir, relative))
        manifest.records.append(ManifestRecord(relative, text, tag.value))

    manifest.write()
    logger.info("Wrote %d samples to %s (%s)", total, out_dir,
        ", ".join(f"{tag}={n}" for tag, n in manifest.counts().items()) or "empty"
    )

    return manifest

def resize_bilinear(image: Array, size: Tuple[int, int]) -> Array:
    """Resizes `[..., H, W]` to `size = (W, H)` with pixel-centre bilinear sampling.

    Source positions are clamped to the image, so edges replicate.
    """

    target_w, target_h = size
    height, width = image.shape[-2:]

    def axis(extent: int, target: int):
        source = (np.arange(target) + 0.5) * (extent / target) - 0.5
        source = np.clip(source, 0, extent - 1)
        low = np.floor(source).astype(np.int64)
        high = np.minimum(low + 1, extent - 1)
        return low, high, source - low

    y_low, y_high, fy = axis(height, target_h)
    x_low, x_high, fx = axis(width, target_w)

    rows = image[..., y_low, :] * (1 - fy)[:, None] + image[..., y_high, :] * fy[:, None]
    return rows[..., x_low] * (1 - fx) + rows[..., x_high] * fx

def read_image(image_path: str, channels: int = 1) -> Array:
    """Reads a PGM/PPM file into `[C, H, W]` values in [-1, 1]."""

    with Image.open(image_path) as image:
        pixels = np.asarray(image.convert("L" if channels == 1 else "RGB"), dtype=np.float64)

    pixels = pixels[None] if pixels.ndim == 2 else np.moveaxis(pixels, -1, 0)
    return pixels / 127.5 - 1

def load_dataset(
    manifest_path: str,
    target: Tuple[int, int],
    charset: Union[Charset, str],
    channels: int = 1,
    dtype: Union[str, np.dtype, None] = None,
    case_insensitive: bool = False
) -> Iterator[Tuple[Tensor, LabelSequence, str]]:
    """Yields `(image [C, H, W], label, tag)` per manifest record, in manifest order.

    Images are resized to `target = (W, H)`; labels are encoded with `charset`, raising
    `CharsetError` for symbols outside it. With `case_insensitive`, a string charset and every
    label are folded to lower case first. Missing image files raise `FileNotFoundError`.
    """

    if not isinstance(charset, Charset):
        charset = Charset(charset, case_insensitive)
    elif case_insensitive and not charset.case_insensitive:
        charset = Charset(charset.symbols, True)

    manifest = DatasetManifest.read(manifest_path)

    for record in manifest.records:
        label = charset.encode(record.label)
        image_path = os.path.join(manifest.root, record.path)
        if not os.path.exists(image_path):
            raise FileNotFoundError(f"Manifest image '{image_path}' does not exist.")

        values = read_image(image_path, channels)
        if values.shape[1:] != (target[1], target[0]):
            values = resize_bilinear(values, target)

        yield Tensor(values.astype(dtype or np.float64)), label, record.tag
