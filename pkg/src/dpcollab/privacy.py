"""The privacy barrier: clipping, mask splitting, dynamic clip-bound
selection from noisy norm histograms, noise correction, and its matrix form.

All vector inputs are flat float64 parameter vectors. Randomness always comes
in through an explicit numpy Generator so sessions replay deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ProtocolError

DEFAULT_BIN_COUNT = 64


def default_bin_edges(initial_clip_bound: float, count: int = DEFAULT_BIN_COUNT) -> np.ndarray:
    """Log-spaced histogram edges over [C0/100, 10*C0]."""
    if initial_clip_bound <= 0:
        raise ConfigurationError("initial clip bound must be positive")
    return np.logspace(
        np.log10(initial_clip_bound / 100.0),
        np.log10(initial_clip_bound * 10.0),
        count,
    )


@dataclass
class PrivacyParams:
    """Knobs of the privacy barrier.

    sigma is the effective noise multiplier (dimensionless, relative to the
    clip bound): the noise actually injected per step is sigma/(1-lam) times
    the current clip bound, which telescopes back to sigma. lam is the noise
    correction coefficient; sigma_g the histogram count noise; blinding_factor
    scales the per-mask blinding noise (std = blinding_factor * sigma * C).
    """

    sigma: float
    clip_bound: float
    lam: float = 0.0
    target_unclipped_fraction: float = 0.75
    sigma_g: float = 0.0
    bin_edges: np.ndarray | None = None
    blinding_factor: float = 100.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError("sigma must be >= 0")
        if self.clip_bound <= 0:
            raise ConfigurationError("clip_bound must be positive")
        if not 0.0 <= self.lam < 1.0:
            raise ConfigurationError("lambda must be in [0, 1)")
        if not 0.0 < self.target_unclipped_fraction <= 1.0:
            raise ConfigurationError("target_unclipped_fraction must be in (0, 1]")
        if self.sigma_g < 0:
            raise ConfigurationError("sigma_g must be >= 0")
        if self.blinding_factor < 0:
            raise ConfigurationError("blinding_factor must be >= 0")
        if self.bin_edges is None:
            self.bin_edges = default_bin_edges(self.clip_bound)
        else:
            self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        _check_edges(self.bin_edges)


def _check_edges(edges: np.ndarray) -> None:
    if edges.ndim != 1 or len(edges) < 1:
        raise ConfigurationError("bin_edges must be a non-empty 1-D array")
    if edges[0] <= 0 or np.any(np.diff(edges) <= 0):
        raise ConfigurationError("bin_edges must be strictly increasing and positive")


def clip_gradient(g: np.ndarray, clip_bound: float) -> np.ndarray:
    """Scale g down to norm clip_bound if it exceeds it; direction preserved."""
    if clip_bound <= 0:
        raise ConfigurationError("clip_bound must be positive")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm <= clip_bound:
        return g.copy()
    return g * (clip_bound / norm)


@dataclass
class MaskSet:
    """Per-worker additive masks whose sum is one central noise draw."""

    masks: list
    realized_noise: np.ndarray

    def __post_init__(self):
        if not self.masks:
            raise ConfigurationError("mask set cannot be empty")
        dims = {m.size for m in self.masks}
        if len(dims) != 1 or self.realized_noise.size not in dims:
            raise ConfigurationError("all masks and realized noise must share one dim")


def generate_masks(n: int, effective_noise: np.ndarray, blinding_std: float, rng: np.random.Generator) -> MaskSet:
    """Split one noise draw into n masks that sum back to it exactly.

    mask_i = (u_i - mean(u)) + effective_noise/n with u_i iid Gaussian
    blinding. The zero-sum blinding term makes each mask individually look
    random while the sum stays the intended central noise.
    """
    if n < 1:
        raise ConfigurationError("worker count must be >= 1")
    if blinding_std < 0:
        raise ConfigurationError("blinding_std must be >= 0")
    noise = np.asarray(effective_noise, dtype=np.float64)
    share = noise / n
    if blinding_std > 0 and n > 1:
        u = rng.normal(0.0, blinding_std, size=(n, noise.size))
        z = u - u.mean(axis=0)
    else:
        z = np.zeros((n, noise.size))
    masks = [z[i] + share for i in range(n)]
    return MaskSet(masks=masks, realized_noise=noise.copy())


def per_step_sigma(target_sigma: float, lam: float) -> float:
    """Per-step noise multiplier whose corrected effective scale is target_sigma."""
    if not 0.0 <= lam < 1.0:
        raise ConfigurationError("lambda must be in [0, 1)")
    if target_sigma < 0:
        raise ConfigurationError("target_sigma must be >= 0")
    return target_sigma / (1.0 - lam)


@dataclass
class NoiseCorrectionState:
    """Private recurrence state: last raw draw, coefficient, current scale.

    prev_noise is absent exactly before the first step. step_sigma is the
    absolute per-step noise std (multiplier times current clip bound); the
    owner may rescale it between steps when the clip bound changes.
    """

    lam: float
    step_sigma: float
    prev_noise: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ConfigurationError("lambda must be in [0, 1)")
        if self.step_sigma < 0:
            raise ConfigurationError("step_sigma must be >= 0")

    def with_step_sigma(self, step_sigma: float) -> "NoiseCorrectionState":
        return replace(self, step_sigma=step_sigma)


def next_effective_noise(state: NoiseCorrectionState, dim: int, rng: np.random.Generator):
    """Draw the next injected noise: xi_t on the first call, xi_t - lam*xi_{t-1} after.

    Returns (effective_noise, new_state). The fresh draw xi_t is retained in
    the new state; over T steps the injected noise telescopes to
    (1-lam)*(xi_1+...+xi_{T-1}) + xi_T.
    """
    if dim < 1:
        raise ConfigurationError("dim must be >= 1")
    fresh = rng.normal(0.0, state.step_sigma, size=dim) if state.step_sigma > 0 else np.zeros(dim)
    if state.prev_noise is None:
        effective = fresh.copy()
    else:
        if state.prev_noise.size != dim:
            raise ConfigurationError("dim changed between noise draws")
        effective = fresh - state.lam * state.prev_noise
    return effective, replace(state, prev_noise=fresh)


@dataclass
class NormHistogram:
    """Binned per-example gradient norm counts.

    Bin i covers (edges[i-1], edges[i]] with an implicit left edge of 0;
    norms above the last edge land in the last bin. Counts are reals because
    aggregation adds Gaussian noise; total records the raw pre-noise count.
    """

    bin_edges: np.ndarray
    counts: np.ndarray
    total: int

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        _check_edges(self.bin_edges)
        if self.counts.shape != self.bin_edges.shape:
            raise ConfigurationError("counts length must equal number of bins")


def bin_index(edges: np.ndarray, norm: float) -> int:
    """Index of the half-open bin (edges[i-1], edges[i]] containing norm."""
    idx = int(np.searchsorted(edges, norm, side="left"))
    return min(idx, len(edges) - 1)


def build_norm_histogram(grads: PerExampleGrads, bin_edges) -> NormHistogram:
    """Count per-example gradient norms into the pre-defined bins."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    _check_edges(edges)
    counts = np.zeros(len(edges))
    for g in grads:
        counts[bin_index(edges, float(np.linalg.norm(g)))] += 1.0
    return NormHistogram(bin_edges=edges, counts=counts, total=len(grads))


def aggregate_histograms(hists, sigma_g: float, rng: np.random.Generator) -> NormHistogram:
    """Sum worker histograms and add iid N(0, sigma_g^2) to every bin count."""
    if not hists:
        raise ProtocolError("no histograms to aggregate")
    edges = hists[0].bin_edges
    for h in hists[1:]:
        if h.bin_edges.shape != edges.shape or not np.array_equal(h.bin_edges, edges):
            raise ProtocolError("histogram bin edges differ across workers")
    counts = np.sum([h.counts for h in hists], axis=0)
    if sigma_g > 0:
        counts = counts + rng.normal(0.0, sigma_g, size=counts.shape)
    return NormHistogram(bin_edges=edges.copy(), counts=counts, total=sum(h.total for h in hists))


def select_clip_bound(noisy: NormHistogram, r: float) -> float:
    """Upper edge of the first bin where the cumulative fraction reaches r.

    Negative noisy counts are clamped to zero first so the cumulative
    fraction stays monotone. Degenerate all-zero histograms fall back to the
    largest edge.
    """
    if not 0.0 < r <= 1.0:
        raise ConfigurationError("r must be in (0, 1]")
    counts = np.maximum(noisy.counts, 0.0)
    total = counts.sum()
    if total <= 0:
        return float(noisy.bin_edges[-1])
    cumulative = np.cumsum(counts) / total
    # 1e-12 slack absorbs rounding in the division right at the threshold.
    hit = np.nonzero(cumulative >= r - 1e-12)[0]
    idx = int(hit[0]) if len(hit) else len(counts) - 1
    return float(noisy.bin_edges[idx])


def correction_matrices(n: int, lam: float):
    """Decoder matrix B (1 diagonal, -lam subdiagonal) and its inverse.

    B_inv[i, j] = lam^(i-j) on and below the diagonal; B @ B_inv = I.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if not 0.0 <= lam < 1.0:
        raise ConfigurationError("lambda must be in [0, 1)")
    decoder = np.eye(n)
    for i in range(1, n):
        decoder[i, i - 1] = -lam
    i_idx, j_idx = np.tril_indices(n)
    encoder_inv = np.zeros((n, n))
    encoder_inv[i_idx, j_idx] = lam ** (i_idx - j_idx).astype(np.float64)
    return decoder, encoder_inv


def matrix_mechanism_outputs(grad_rows, noise_rows, lam: float):
    """Noise-corrected outputs computed as the factored mechanism B(Cx + Z).

    Row t equals the step-by-step recurrence output grad_t + xi_t -
    lam*xi_{t-1} given the same noise rows; kept as a genuinely separate
    matrix-product code path so the two can cross-check each other.
    """
    if len(grad_rows) != len(noise_rows):
        raise ConfigurationError("need one noise row per gradient row")
    x = np.stack([np.asarray(g, dtype=np.float64) for g in grad_rows])
    z = np.stack([np.asarray(v, dtype=np.float64) for v in noise_rows])
    if x.shape != z.shape:
        raise ConfigurationError(f"gradient rows {x.shape} vs noise rows {z.shape}")
    decoder, encoder_inv = correction_matrices(len(grad_rows), lam)
    out = decoder @ (encoder_inv @ x + z)
    return [out[i] for i in range(out.shape[0])]
