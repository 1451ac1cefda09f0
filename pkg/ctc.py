"""Transcription: charsets, CTC loss, greedy decoding, and a brute-force alignment oracle."""

# == IMPORTS ===================================================================================== #

import string

from dataclasses import dataclass
from typing import *

import numpy as np

from tensor_core import Array, ShapeError, Tensor, make_output, mean, stack

# == DEFINES ===================================================================================== #

BLANK = 0

DIGITS = string.digits
ALPHANUMERIC = string.digits + string.ascii_lowercase

BRUTE_FORCE_LIMIT = 10 ** 7
_BRUTE_FORCE_CHUNK = 1 << 16

# == ERRORS ====================================================================================== #

class CharsetError(ValueError):
    """Raised for invalid charsets and for text holding symbols outside the charset."""

class NoAlignmentError(ValueError):
    """Raised when a label cannot be aligned within the available frames."""

# == LABELS ====================================================================================== #

@dataclass(frozen=True)
class LabelSequence:
    """Class indices in [1, K]; index 0 is the CTC blank and never appears here."""

    indices: Tuple[int, ...] = ()

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        bad = [i for i in indices if i < 1]
        if len(bad) > 0:
            raise CharsetError(f"Label indices must be at least 1; got {bad}.")

        object.__setattr__(self, "indices", indices)

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices)

    @property
    def repeats(self) -> int:
        """Number of adjacent equal pairs; each needs a separating blank."""

        return sum(1 for a, b in zip(self.indices, self.indices[1:]) if a == b)

    def min_frames(self) -> int:
        return len(self.indices) + self.repeats

class Charset:
    """Ordered symbols mapped to class indices 1..K (0 is the blank).

    Parameters
    ==========
    symbols: `str`
        The K symbols, in index order.

    case_insensitive: `bool` = `False`
        Fold the symbols and every encoded text to lower case.
    """

    def __init__(self, symbols: str, case_insensitive: bool = False):
        if case_insensitive:
            symbols = "".join(dict.fromkeys(symbols.lower()))

        errors = []
        if len(symbols) == 0:
            errors.append("Charset must hold at least one symbol.")

        duplicates = sorted({ s for s in symbols if symbols.count(s) > 1 })
        if len(duplicates) > 0:
            errors.append(f"Charset symbols must be unique; repeated: {''.join(duplicates)}.")

        if len(errors) > 0:
            raise CharsetError('\n'.join(errors))

        self.symbols = symbols
        self.case_insensitive = case_insensitive
        self._index = { symbol: i + 1 for i, symbol in enumerate(symbols) }

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Charset)
            and self.symbols == other.symbols
            and self.case_insensitive == other.case_insensitive
        )

    def __repr__(self) -> str:
        return f"<Charset '{self.symbols}'{' folded' if self.case_insensitive else ''}>"

    @property
    def num_classes(self) -> int:
        """K + 1, counting the blank."""

        return len(self.symbols) + 1

    def normalize(self, text: str) -> str:
        return text.lower() if self.case_insensitive else text

    def encode(self, text: str) -> LabelSequence:
        text = self.normalize(text)
        unknown = sorted({ ch for ch in text if ch not in self._index })
        if len(unknown) > 0:
            raise CharsetError(
                f"Text '{text}' holds symbols outside the charset: {' '.join(unknown)}."
            )

        return LabelSequence(tuple(self._index[ch] for ch in text))

    def decode(self, label: Union[LabelSequence, Sequence[int]]) -> str:
        indices = label.indices if isinstance(label, LabelSequence) else tuple(label)
        bad = [i for i in indices if not 1 <= i <= len(self.symbols)]
        if len(bad) > 0:
            raise CharsetError(f"Indices {bad} are outside the charset.")

        return "".join(self.symbols[i - 1] for i in indices)

# == HELPERS ===================================================================================== #

def log_softmax(values: Array) -> Array:
    """Log-softmax along the last axis."""

    shifted = values - values.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

def _logsumexp(values: Array) -> float:
    if values.size == 0:
        return -np.inf

    peak = values.max()
    if not np.isfinite(peak):
        return float(peak)

    return float(peak + np.log(np.exp(values - peak).sum()))

def _check_logits(logits: Tensor, label: LabelSequence) -> Tuple[int, int]:
    errors = []

    if logits.ndim != 2:
        errors.append(f"Logits must be [T, K+1]; got rank {logits.ndim}.")
    else:
        T, C = logits.shape
        if T < 1:
            errors.append("Logits need at least one frame.")
        if len(label) > 0 and max(label.indices) >= C:
            errors.append(
                f"Label index {max(label.indices)} is outside {C} logit classes."
            )

    if len(errors) > 0:
        raise ShapeError('\n'.join(errors))

    return logits.shape

def _extended(label: LabelSequence) -> Tuple[Array, Array]:
    """Label with blanks interleaved, and the mask of positions that may skip a blank."""

    ext = np.zeros(2 * len(label) + 1, dtype=np.int64)
    ext[1::2] = label.indices

    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    return ext, skip

# == LOSS ======================================================================================== #

def ctc_loss(logits: Tensor, label: LabelSequence) -> Tensor:
    """-log P(label | softmax(logits)) by the forward-backward recursion in log space.

    Raises `NoAlignmentError` when the label plus its required separating blanks does not fit
    in T frames.
    """

    T, C = _check_logits(logits, label)

    if label.min_frames() > T:
        raise NoAlignmentError(
            f"Label of length {len(label)} with {label.repeats} repeats needs at least "
            f"{label.min_frames()} frames; got {T}."
        )

    logp = log_softmax(logits.data.astype(np.float64))
    ext, skip = _extended(label)
    S = ext.size
    emit = logp[:, ext]

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]

    for t in range(1, T):
        prev = alpha[t - 1]
        step = prev.copy()
        step[1:] = np.logaddexp(step[1:], prev[:-1])
        step[2:] = np.where(skip[2:], np.logaddexp(step[2:], prev[:-2]), step[2:])
        alpha[t] = step + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]

    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        step = nxt.copy()
        step[:-1] = np.logaddexp(step[:-1], nxt[1:])
        step[:-2] = np.where(skip[2:], np.logaddexp(step[:-2], nxt[2:]), step[:-2])
        beta[t] = step + emit[t]

    log_likelihood = alpha[T - 1, S - 1]
    if S > 1:
        log_likelihood = np.logaddexp(log_likelihood, alpha[T - 1, S - 2])

    if not np.isfinite(log_likelihood):
        raise NoAlignmentError("Label has no alignment with non-zero probability.")

    # emissions appear in both alpha and beta
    occupancy = alpha + beta - emit
    per_class = np.full((T, C), -np.inf)
    for s in range(S):
        per_class[:, ext[s]] = np.logaddexp(per_class[:, ext[s]], occupancy[:, s])

    grad = np.exp(logp) - np.exp(per_class - log_likelihood)

    def backward(upstream):
        (g,) = upstream
        return ((g * grad).astype(logits.dtype),)

    return make_output("ctc_loss", np.asarray(-log_likelihood, dtype=logits.dtype),
        (logits,), backward
    )

def ctc_brute_force(logits: Union[Tensor, Array], label: LabelSequence) -> float:
    """Test oracle: sums the probability of every length-T path collapsing to `label`."""

    if not isinstance(logits, Tensor):
        logits = Tensor(np.asarray(logits, dtype=np.float64))

    T, C = _check_logits(logits, label)
    if C ** T > BRUTE_FORCE_LIMIT:
        raise ValueError(
            f"Brute-force enumeration of {C}^{T} paths exceeds {BRUTE_FORCE_LIMIT}."
        )

    logp = log_softmax(logits.data.astype(np.float64))
    target = np.asarray(label.indices, dtype=np.int64)
    L = target.size
    place = C ** np.arange(T - 1, -1, -1, dtype=np.int64)
    frames = np.arange(T)

    if L > T:
        return np.inf

    total = -np.inf

    for start in range(0, C ** T, _BRUTE_FORCE_CHUNK):
        ids = np.arange(start, min(start + _BRUTE_FORCE_CHUNK, C ** T), dtype=np.int64)
        paths = (ids[:, None] // place) % C

        previous = np.concatenate([np.full((ids.size, 1), -1), paths[:, :-1]], axis=1)
        keep = (paths != BLANK) & (paths != previous)
        match = keep.sum(axis=1) == L

        if L > 0:
            collapsed = np.full((ids.size, T), -1, dtype=np.int64)
            rows, cols = np.nonzero(keep)
            positions = np.cumsum(keep, axis=1)[rows, cols] - 1
            collapsed[rows, positions] = paths[rows, cols]
            match &= np.all(collapsed[:, :L] == target, axis=1)

        if np.any(match):
            scores = logp[frames, paths[match]].sum(axis=1)
            total = np.logaddexp(total, _logsumexp(scores))

    return float(-total)

class BatchLoss(NamedTuple):
    """Mean CTC loss over the items that could be aligned."""

    loss: Optional[Tensor]
    skipped: List[int]

def batch_ctc_loss(logits: Sequence[Tensor], labels: Sequence[LabelSequence]) -> BatchLoss:
    """Mean of per-item losses; items without an alignment are skipped and listed."""

    if len(logits) != len(labels):
        raise ShapeError(f"Got {len(logits)} logit sequences for {len(labels)} labels.")

    losses = []
    skipped = []
    for index, (item, label) in enumerate(zip(logits, labels)):
        try:
            losses.append(ctc_loss(item, label))
        except NoAlignmentError:
            skipped.append(index)

    if len(losses) == 0:
        return BatchLoss(None, skipped)

    return BatchLoss(mean(stack(losses)), skipped)

# == DECODING ==================================================================================== #

def greedy_decode(logits: Union[Tensor, Array]) -> LabelSequence:
    """Best path: per-frame argmax (lowest index on ties), merge repeats, drop blanks."""

    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if values.ndim != 2 or values.shape[0] < 1:
        raise ShapeError(f"Logits must be [T, K+1] with T >= 1; got {list(values.shape)}.")

    path = values.argmax(axis=1)
    previous = np.concatenate([[-1], path[:-1]])

    return LabelSequence(tuple(path[(path != BLANK) & (path != previous)]))
