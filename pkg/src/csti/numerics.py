"""Mathematical substrate: parameter vectors, DFT pair, gradients, SGD.

The discrete Fourier transform is kept as an explicit linear operator
(cos/sin matrices) so the frequency models can backpropagate through it
with plain matrix transposes. At the lookback lengths used here (<= 64)
the O(n^2) product is cheaper than any FFT bookkeeping.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import (
    ContractViolation,
    MergeIncompatibilityError,
    NumericInputError,
    NumericOverflowError,
    ShapeMismatchError,
    SymmetryViolationError,
)

IDFT_IMAG_TOLERANCE = 1e-6


# ---------------------------------------------------------------------------
# parameter vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


class ParamVector:
    """Flat float64 parameter vector with a named segment layout.

    Two vectors are merge-compatible iff their layouts are identical.
    Instances are immutable; algebra returns new vectors.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Sequence[Segment]):
        arr = np.asarray(values, dtype=np.float64).reshape(-1).copy()
        layout = tuple(layout)
        expected = 0
        for seg in layout:
            if seg.offset != expected:
                raise ContractViolation(
                    f"segment {seg.name!r} at offset {seg.offset}, expected {expected}"
                )
            expected += seg.length
        if expected != arr.size:
            raise ContractViolation(
                f"layout covers {expected} values, vector has {arr.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericInputError("parameter vector contains non-finite values")
        arr.flags.writeable = False
        self.values = arr
        self.layout = layout

    def __len__(self):
        return self.values.size

    def __repr__(self):
        names = ",".join(s.name for s in self.layout)
        return f"ParamVector(n={len(self)}, segments=[{names}])"

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset : seg.offset + seg.length]
        raise KeyError(name)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def replace(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)


def layout_from_lengths(pairs: Sequence[tuple[str, int]]) -> tuple[Segment, ...]:
    """Build a contiguous layout from (name, length) pairs."""
    segs = []
    offset = 0
    for name, length in pairs:
        segs.append(Segment(name, offset, int(length)))
        offset += int(length)
    return tuple(segs)


def _first_layout_difference(a: ParamVector, b: ParamVector) -> str:
    for sa, sb in zip(a.layout, b.layout):
        if sa != sb:
            return sa.name
    if len(a.layout) != len(b.layout):
        longer = a.layout if len(a.layout) > len(b.layout) else b.layout
        return longer[min(len(a.layout), len(b.layout))].name
    return "<none>"


def axpy_merge(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Merge K parameter vectors into (1/K) * sum_k w_k * theta_k.

    Coordinates are summed with exact (correctly rounded) accumulation,
    so the result is bit-identical under any permutation of the inputs.
    """
    if len(vectors) == 0 or len(vectors) != len(weights):
        raise ContractViolation("need K >= 1 vectors and exactly K weights")
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NumericInputError("merge weights must be finite")
    base = vectors[0]
    for v in vectors[1:]:
        if not base.same_layout(v):
            raise MergeIncompatibilityError(
                f"layouts differ at segment {_first_layout_difference(base, v)!r}"
            )
    if len(vectors) == 1:
        return base.replace(w[0] * base.values)
    products = np.stack([wk * vk.values for wk, vk in zip(w, vectors)])
    if np.all(products == products[0]):
        # consensus: the mean of K identical vectors is that vector, exactly
        return base.replace(products[0])
    k = len(vectors)
    acc = np.fromiter(
        (math.fsum(products[:, i]) / k for i in range(products.shape[1])),
        dtype=np.float64,
        count=products.shape[1],
    )
    return base.replace(acc)


# ---------------------------------------------------------------------------
# spectra and the DFT pair
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Spectrum:
    """Complex spectrum stored as separate real/imag float64 arrays."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=np.float64).reshape(-1)
        im = np.asarray(self.im, dtype=np.float64).reshape(-1)
        if re.size != im.size or re.size < 1:
            raise ShapeMismatchError("re and im must have equal length n >= 1")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    def __len__(self):
        return self.re.size


@lru_cache(maxsize=None)
def dft_matrices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Cos/sin matrices C, E with DFT(x) = C @ x - i * (E @ x)."""
    t = np.arange(n)
    angles = 2.0 * np.pi * np.outer(t, t) / n
    c = np.cos(angles)
    e = np.sin(angles)
    c.flags.writeable = False
    e.flags.writeable = False
    return c, e


def dft(signal) -> Spectrum:
    """X(f) = sum_t x(t) * (cos(2*pi*f*t/n) - i*sin(2*pi*f*t/n))."""
    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    if x.size < 1:
        raise ContractViolation("signal must have length >= 1")
    if not np.all(np.isfinite(x)):
        raise NumericInputError("signal contains non-finite values")
    c, e = dft_matrices(x.size)
    return Spectrum(re=c @ x, im=-(e @ x))


def idft(spectrum: Spectrum) -> np.ndarray:
    """Inverse transform; rejects spectra whose inverse is not real.

    x(t) = (1/n) * sum_f (re + i*im) * e^{+i 2 pi f t / n}. The imaginary
    residue must stay below IDFT_IMAG_TOLERANCE (conjugate-symmetric input).
    """
    n = len(spectrum)
    c, e = dft_matrices(n)
    real = (c.T @ spectrum.re - e.T @ spectrum.im) / n
    imag = (e.T @ spectrum.re + c.T @ spectrum.im) / n
    worst = float(np.max(np.abs(imag)))
    if worst >= IDFT_IMAG_TOLERANCE:
        raise SymmetryViolationError(
            f"imaginary residue {worst:.3e} >= {IDFT_IMAG_TOLERANCE:.0e}; "
            "spectrum is not conjugate-symmetric"
        )
    return real


def complex_hadamard(a: Spectrum, b: Spectrum) -> Spectrum:
    """Elementwise complex product of two spectra."""
    if len(a) != len(b):
        raise ShapeMismatchError(f"length mismatch: {len(a)} vs {len(b)}")
    return Spectrum(
        re=a.re * b.re - a.im * b.im,
        im=a.re * b.im + a.im * b.re,
    )


# Batch helpers used by the model zoo. Signals sit in rows; the adjoints
# are the exact transposes of the forward maps, which keeps the analytic
# gradients finite-difference-checkable.

def dft_batch(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(N, n) real signals -> (S_re, S_im), each (N, n)."""
    c, e = dft_matrices(z.shape[1])
    return z @ c.T, -(z @ e.T)


def dft_batch_adjoint(d_re: np.ndarray, d_im: np.ndarray) -> np.ndarray:
    c, e = dft_matrices(d_re.shape[1])
    return d_re @ c - d_im @ e


def real_idft_batch(f_re: np.ndarray, f_im: np.ndarray) -> np.ndarray:
    """Real part of the inverse transform of (N, n) spectra."""
    n = f_re.shape[1]
    c, e = dft_matrices(n)
    return (f_re @ c - f_im @ e) / n


def real_idft_batch_adjoint(ds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = ds.shape[1]
    c, e = dft_matrices(n)
    return (ds @ c.T) / n, -(ds @ e.T) / n


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def gradient(model, inputs: np.ndarray, targets: np.ndarray) -> ParamVector:
    """Analytic gradient of the batch MSE w.r.t. the model parameters.

    Delegates to the model's hand-derived reverse pass and verifies the
    result is finite, naming the first offending segment otherwise.
    """
    if inputs.shape[0] == 0:
        raise ContractViolation("batch must be non-empty")
    grad = model.loss_gradient(inputs, targets)
    if not np.all(np.isfinite(grad.values)):
        for seg in grad.layout:
            chunk = grad.values[seg.offset : seg.offset + seg.length]
            if not np.all(np.isfinite(chunk)):
                raise NumericOverflowError(
                    f"non-finite gradient in segment {seg.name!r}"
                )
    return grad


def finite_diff_gradient(model, inputs, targets, epsilon: float = 1e-5) -> ParamVector:
    """Central-difference gradient oracle over every coordinate."""
    if not (1e-8 <= epsilon <= 1e-3):
        raise ContractViolation("epsilon must lie in [1e-8, 1e-3]")
    base = model.export_params()
    theta = base.values.copy()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        saved = theta[i]
        theta[i] = saved + epsilon
        hi = model.import_params(base.replace(theta)).loss(inputs, targets)
        theta[i] = saved - epsilon
        lo = model.import_params(base.replace(theta)).loss(inputs, targets)
        theta[i] = saved
        grad[i] = (hi - lo) / (2.0 * epsilon)
    return base.replace(grad)


def gradient_check_max_error(model, inputs, targets, epsilon: float = 1e-5) -> float:
    """Max-coordinate guarded relative error between analytic and FD gradients.

    Denominator floors at 1e-3 so near-zero coordinates are compared
    absolutely at 1e-7 scale rather than amplifying FD noise.
    """
    ga = gradient(model, inputs, targets).values
    gf = finite_diff_gradient(model, inputs, targets, epsilon).values
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(gf)), 1e-3)
    return float(np.max(np.abs(ga - gf) / denom)) if ga.size else 0.0


# ---------------------------------------------------------------------------
# SGD with classical momentum
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerState:
    """Velocity buffer plus step settings; owned by exactly one trainer."""

    velocity: ParamVector
    learning_rate: float
    momentum: float

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractViolation("learning rate must be > 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ContractViolation("momentum must lie in [0, 1)")


def fresh_optimizer_state(params: ParamVector, learning_rate: float, momentum: float) -> OptimizerState:
    return OptimizerState(
        velocity=params.replace(np.zeros(len(params))),
        learning_rate=learning_rate,
        momentum=momentum,
    )


def sgd_step(params: ParamVector, grad: ParamVector, state: OptimizerState) -> tuple[ParamVector, OptimizerState]:
    """v <- mu*v + g; theta <- theta - eta*v (classical momentum)."""
    if not (params.same_layout(grad) and params.same_layout(state.velocity)):
        raise ShapeMismatchError("params/grad/velocity layouts differ")
    v = state.momentum * state.velocity.values + grad.values
    theta = params.values - state.learning_rate * v
    new_state = OptimizerState(
        velocity=params.replace(v),
        learning_rate=state.learning_rate,
        momentum=state.momentum,
    )
    return params.replace(theta), new_state


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_PVEC_MAGIC = b"PVEC"
_PVEC_VERSION = 1


def param_vector_to_bytes(pvec: ParamVector) -> bytes:
    """Binary layout header + little-endian float64 values."""
    out = [_PVEC_MAGIC, struct.pack("<II", _PVEC_VERSION, len(pvec.layout))]
    for seg in pvec.layout:
        name = seg.name.encode("utf-8")
        out.append(struct.pack("<I", len(name)))
        out.append(name)
        out.append(struct.pack("<QQ", seg.offset, seg.length))
    out.append(pvec.values.astype("<f8").tobytes())
    return b"".join(out)


def param_vector_from_bytes(blob: bytes) -> ParamVector:
    if blob[:4] != _PVEC_MAGIC:
        raise ContractViolation("not a parameter-vector blob")
    version, nseg = struct.unpack_from("<II", blob, 4)
    if version != _PVEC_VERSION:
        raise ContractViolation(f"unsupported format version {version}")
    pos = 12
    segs = []
    for _ in range(nseg):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        offset, length = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        segs.append(Segment(name, offset, length))
    total = sum(s.length for s in segs)
    values = np.frombuffer(blob, dtype="<f8", count=total, offset=pos)
    return ParamVector(values, segs)


def save_param_vector(pvec: ParamVector, path) -> None:
    with open(path, "wb") as fh:
        fh.write(param_vector_to_bytes(pvec))


def load_param_vector(path) -> ParamVector:
    with open(path, "rb") as fh:
        return param_vector_from_bytes(fh.read())
