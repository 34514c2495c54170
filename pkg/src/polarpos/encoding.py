"""Reference math for rotary (RoPE) and polar-coordinate (PoPE) attention scores.

Everything here is scalar/small-vector numpy at double precision. These
functions are the ground truth that the batched torch attention paths are
tested against; they are deliberately written in the most direct form
(explicit rotation matrices, per-component loops) rather than the vectorized
form used in the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

TWO_PI = 2.0 * math.pi


class EncodingKind(str, Enum):
    ROPE = "rope"
    POPE = "pope"
    POPE_NO_SOFTPLUS = "pope-no-softplus"
    POPE_NO_BIAS = "pope-no-bias"

    @property
    def is_pope(self) -> bool:
        return self is not EncodingKind.ROPE

    @property
    def uses_softplus(self) -> bool:
        return self.is_pope and self is not EncodingKind.POPE_NO_SOFTPLUS

    @property
    def uses_bias(self) -> bool:
        return self.is_pope and self is not EncodingKind.POPE_NO_BIAS


@dataclass(frozen=True)
class FrequencySchedule:
    """Per-component angular frequencies for one attention head.

    RoPE has head_dim/2 frequencies (one per 2D chunk); PoPE variants have
    head_dim (one per element). Both are geometric, strictly decreasing,
    starting at 1.
    """

    head_dim: int
    base: float
    kind: EncodingKind
    freqs: np.ndarray

    @property
    def n_freqs(self) -> int:
        return len(self.freqs)


@dataclass
class PhaseBias:
    """Learnable per-frequency phase offsets applied to key phases."""

    deltas: np.ndarray


@dataclass(frozen=True)
class ComplexHeadVector:
    """A PoPE-encoded query or key: paired real and imaginary components."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        if len(self.re) != len(self.im):
            raise ValueError("re and im must have equal length")


def make_frequencies(kind: EncodingKind, head_dim: int, base: float) -> FrequencySchedule:
    """Build the geometric frequency schedule for one head.

    RoPE: theta_c = base**(-2(c-1)/d) for c = 1..d/2.
    PoPE: theta_c = base**(-(c-1)/d) for c = 1..d, i.e. the same span at
    double density.
    """
    if head_dim < 2 or head_dim % 2 != 0:
        raise ValueError(f"head_dim must be a positive even integer, got {head_dim}")
    if base <= 1.0:
        raise ValueError(f"base must be > 1, got {base}")
    if kind is EncodingKind.ROPE:
        c = np.arange(head_dim // 2, dtype=np.float64)
        freqs = base ** (-2.0 * c / head_dim)
    else:
        c = np.arange(head_dim, dtype=np.float64)
        freqs = base ** (-c / head_dim)
    return FrequencySchedule(head_dim=head_dim, base=float(base), kind=kind, freqs=freqs)


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def rope_rotate(component, angle: float):
    """Rotate one 2D chunk by `angle`; norm-preserving."""
    x, y = float(component[0]), float(component[1])
    c, s = math.cos(angle), math.sin(angle)
    return (c * x - s * y, s * x + c * y)


def _check_rope_args(q, k, fs: FrequencySchedule):
    if fs.kind is not EncodingKind.ROPE:
        raise ValueError(f"schedule kind must be rope, got {fs.kind.value}")
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != (fs.head_dim,) or k.shape != (fs.head_dim,):
        raise ValueError(
            f"q/k must have shape ({fs.head_dim},), got {q.shape} and {k.shape}"
        )
    return q, k


def rope_score(q, k, t: int, s: int, fs: FrequencySchedule) -> float:
    """Rotary attention score in Cartesian form.

    Each 2D chunk of q is rotated by t*theta_c, each chunk of k by s*theta_c,
    and corresponding chunks are matched by dot product.
    """
    q, k = _check_rope_args(q, k, fs)
    total = 0.0
    for c, theta in enumerate(fs.freqs):
        qc = rope_rotate(q[2 * c : 2 * c + 2], t * theta)
        kc = rope_rotate(k[2 * c : 2 * c + 2], s * theta)
        total += qc[0] * kc[0] + qc[1] * kc[1]
    return total


def rope_score_polar(q, k, t: int, s: int, fs: FrequencySchedule) -> float:
    """Rotary score via polar coordinates; independent oracle for rope_score.

    Each chunk contributes mu_q * mu_k * cos((s-t)*theta_c + phi_k - phi_q)
    where (mu, phi) are the chunk's modulus and argument.
    """
    q, k = _check_rope_args(q, k, fs)
    total = 0.0
    for c, theta in enumerate(fs.freqs):
        qx, qy = q[2 * c], q[2 * c + 1]
        kx, ky = k[2 * c], k[2 * c + 1]
        mu_q, phi_q = math.hypot(qx, qy), math.atan2(qy, qx)
        mu_k, phi_k = math.hypot(kx, ky), math.atan2(ky, kx)
        total += mu_q * mu_k * math.cos((s - t) * theta + phi_k - phi_q)
    return total


def softplus(x: float) -> float:
    """Overflow-safe ln(1 + e^x); strictly positive and monotone."""
    if x > 20.0:
        return x + math.log1p(math.exp(-x))
    if x < -20.0:
        return math.exp(x)
    return math.log1p(math.exp(x))


def _check_pope_args(raw, fs: FrequencySchedule, bias: PhaseBias | None):
    if not fs.kind.is_pope:
        raise ValueError(f"schedule kind must be a pope variant, got {fs.kind.value}")
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (fs.head_dim,):
        raise ValueError(f"raw must have shape ({fs.head_dim},), got {raw.shape}")
    if bias is not None and len(bias.deltas) != fs.head_dim:
        raise ValueError(
            f"bias length {len(bias.deltas)} != head_dim {fs.head_dim}"
        )
    return raw


def pope_encode(
    raw,
    position: int,
    fs: FrequencySchedule,
    bias: PhaseBias | None = None,
    is_key: bool = False,
) -> ComplexHeadVector:
    """Map a raw head vector to its complex (Cartesian) form.

    Magnitudes come from softplus (identity for the no-softplus ablation),
    phases from position * theta_c, plus delta_c on keys when a bias is given.
    """
    raw = _check_pope_args(raw, fs, bias)
    if bias is not None and not is_key:
        raise ValueError("phase bias applies to keys only")
    if bias is not None and not fs.kind.uses_bias:
        raise ValueError(f"{fs.kind.value} does not take a phase bias")
    re = np.empty(fs.head_dim)
    im = np.empty(fs.head_dim)
    for c, theta in enumerate(fs.freqs):
        mu = softplus(raw[c]) if fs.kind.uses_softplus else raw[c]
        phase = position * theta
        if bias is not None:
            phase += bias.deltas[c]
        re[c] = mu * math.cos(phase)
        im[c] = mu * math.sin(phase)
    return ComplexHeadVector(re=re, im=im)


def pope_score(q_enc: ComplexHeadVector, k_enc: ComplexHeadVector) -> float:
    """Re[q^H k] for encoded vectors: sum of re_q*re_k + im_q*im_k."""
    if len(q_enc.re) != len(k_enc.re):
        raise ValueError("encoded query/key dimension mismatch")
    return float(np.dot(q_enc.re, k_enc.re) + np.dot(q_enc.im, k_enc.im))


def pope_score_polar(
    raw_q,
    raw_k,
    t: int,
    s: int,
    fs: FrequencySchedule,
    bias: PhaseBias | None = None,
) -> float:
    """Polar-form score: sum_c mu_q mu_k cos((s-t)*theta_c + delta_c).

    Independent oracle for pope_encode + pope_score.
    """
    raw_q = _check_pope_args(raw_q, fs, bias)
    raw_k = _check_pope_args(raw_k, fs, bias)
    total = 0.0
    for c, theta in enumerate(fs.freqs):
        mu_q = softplus(raw_q[c]) if fs.kind.uses_softplus else raw_q[c]
        mu_k = softplus(raw_k[c]) if fs.kind.uses_softplus else raw_k[c]
        delta = bias.deltas[c] if bias is not None else 0.0
        total += mu_q * mu_k * math.cos((s - t) * theta + delta)
    return total


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def pope_score_polar_grad(
    raw_q,
    raw_k,
    t: int,
    s: int,
    fs: FrequencySchedule,
    bias: PhaseBias | None = None,
):
    """Hand-derived gradients of pope_score_polar w.r.t. raw_q, raw_k, deltas.

    d/dx softplus(x) is the logistic sigmoid; the cosine factor passes through
    unchanged for the raw gradients and differentiates to -sin for delta.
    """
    raw_q = _check_pope_args(raw_q, fs, bias)
    raw_k = _check_pope_args(raw_k, fs, bias)
    d = fs.head_dim
    dq = np.empty(d)
    dk = np.empty(d)
    ddelta = np.empty(d)
    for c, theta in enumerate(fs.freqs):
        if fs.kind.uses_softplus:
            mu_q, mu_k = softplus(raw_q[c]), softplus(raw_k[c])
            dmu_q, dmu_k = _sigmoid(raw_q[c]), _sigmoid(raw_k[c])
        else:
            mu_q, mu_k = raw_q[c], raw_k[c]
            dmu_q = dmu_k = 1.0
        delta = bias.deltas[c] if bias is not None else 0.0
        angle = (s - t) * theta + delta
        cos_a, sin_a = math.cos(angle), math.sin(angle)
        dq[c] = dmu_q * mu_k * cos_a
        dk[c] = mu_q * dmu_k * cos_a
        ddelta[c] = -mu_q * mu_k * sin_a
    return dq, dk, ddelta


def clamp_bias(bias: PhaseBias) -> PhaseBias:
    """Project deltas onto [-2*pi, 0]; idempotent."""
    deltas = np.asarray(bias.deltas, dtype=np.float64)
    if not np.all(np.isfinite(deltas)):
        raise ValueError("phase bias contains non-finite entries")
    return PhaseBias(deltas=np.clip(deltas, -TWO_PI, 0.0))


def init_bias(mode: str, d: int, rng: np.random.Generator) -> PhaseBias:
    """Initialize deltas to zero or i.i.d. Uniform(-2*pi, 0)."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if mode == "zero":
        return PhaseBias(deltas=np.zeros(d))
    if mode == "uniform":
        return PhaseBias(deltas=rng.uniform(-TWO_PI, 0.0, size=d))
    raise ValueError(f"unknown bias init mode: {mode!r}")
