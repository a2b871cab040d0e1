"""Tight (epsilon, delta) accounting for compositions of Gaussian mechanisms.

Every privacy event in this artifact is a pure Gaussian mechanism (full-batch
noisy gradient steps, noise-corrected steps, noisy histogram aggregations),
so composition reduces exactly to a single Gaussian mechanism with the
combined noise-to-sensitivity ratio

    mu = sqrt(sum_i count_i * (sensitivity_i / sigma_i)^2),

because Gaussian privacy-loss random variables are themselves Gaussian with
mean mu_i^2/2 and variance mu_i^2, and independent Gaussians add their means
and variances. delta(epsilon) then follows from the standard normal CDF:

    delta = Phi(-eps/mu + mu/2) - exp(eps) * Phi(-eps/mu - mu/2).

`plrv_delta_oracle` recomputes the same quantity by numerically integrating
the hockey-stick expectation E[1 - exp(eps - Y)]_+ over the Gaussian loss
variable Y, giving an independent cross-check of the closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import log_ndtr, ndtr

from .errors import CalibrationError, ConfigurationError, NumericError

# Bisection contract shared by every inverse solve in this module.
BISECT_MAX_ITER = 200
EPSILON_BRACKET = (0.0, 1e6)


@dataclass(frozen=True)
class GaussianEvent:
    """One (possibly repeated) Gaussian mechanism release."""

    sensitivity: float
    sigma: float
    count: int = 1

    def __post_init__(self):
        if self.sensitivity <= 0:
            raise ConfigurationError("sensitivity must be positive")
        if self.sigma <= 0:
            raise ConfigurationError("sigma must be positive")
        if self.count < 1:
            raise ConfigurationError("count must be >= 1")

    @property
    def mu_squared(self) -> float:
        return self.count * (self.sensitivity / self.sigma) ** 2


@dataclass
class CompositionLedger:
    """Append-only record of the Gaussian events spent so far."""

    events: list = field(default_factory=list)

    def append(self, event: GaussianEvent) -> None:
        self.events.append(event)

    def extend(self, events) -> None:
        for event in events:
            self.append(event)

    def copy(self) -> "CompositionLedger":
        return CompositionLedger(events=list(self.events))

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class EpsDelta:
    epsilon: float
    delta: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigurationError("delta must be in [0, 1]")


@dataclass(frozen=True)
class Budget:
    """Privacy budget a session must not exceed."""

    target: EpsDelta

    def __post_init__(self):
        if not 0.0 < self.target.delta < 1.0:
            raise ConfigurationError("budget delta must be in (0, 1)")


def gaussian_delta(epsilon: float, sigma: float, sensitivity: float) -> float:
    """Tight delta of the Gaussian mechanism at the given epsilon.

    Args:
      epsilon: target epsilon, >= 0.
      sigma: noise standard deviation, > 0.
      sensitivity: L2 sensitivity of the released function, > 0.

    The exp(eps) * Phi(...) product is evaluated in log space so the result
    stays accurate when both factors are extreme.
    """
    if sigma <= 0 or sensitivity <= 0:
        raise ConfigurationError("sigma and sensitivity must be positive")
    if epsilon < 0:
        raise ConfigurationError("epsilon must be >= 0")
    mu = sensitivity / sigma
    upper = float(ndtr(-epsilon / mu + mu / 2.0))
    lower = math.exp(epsilon + float(log_ndtr(-epsilon / mu - mu / 2.0)))
    return min(max(upper - lower, 0.0), 1.0)


def plrv_delta_oracle(epsilon: float, sigma: float, sensitivity: float) -> float:
    """delta via numerical integration over the privacy loss random variable.

    For the Gaussian mechanism the loss variable Y is N(mu^2/2, mu^2) with
    mu = sensitivity/sigma, and delta(eps) = E[1 - exp(eps - Y)]_+. The
    integrand is supported on (eps, inf); we integrate over the finite window
    where the Gaussian density is non-negligible. Deliberately avoids the
    closed-form CDF expression used by gaussian_delta.
    """
    if sigma <= 0 or sensitivity <= 0:
        raise ConfigurationError("sigma and sensitivity must be positive")
    if epsilon < 0:
        raise ConfigurationError("epsilon must be >= 0")
    mu = sensitivity / sigma
    mean = mu * mu / 2.0
    std = mu

    lo = epsilon
    hi = max(mean + 14.0 * std, lo + 1.0)
    pdf_norm = 1.0 / (std * math.sqrt(2.0 * math.pi))

    def integrand(y):
        z = (y - mean) / std
        return (1.0 - math.exp(epsilon - y)) * pdf_norm * math.exp(-0.5 * z * z)

    value, abserr = integrate.quad(integrand, lo, hi, limit=300, epsabs=1e-13, epsrel=1e-11)
    if abserr > 1e-9:
        raise NumericError(f"PLRV integration did not converge: achieved tolerance {abserr:.3e}")
    return min(max(value, 0.0), 1.0)


def effective_mu(ledger: CompositionLedger) -> float:
    """Combined noise-to-sensitivity ratio of the whole ledger.

    The composed ledger is exactly one Gaussian mechanism with sigma/Delta =
    1/mu. An empty ledger has mu = 0 (no privacy loss).
    """
    return math.sqrt(sum(event.mu_squared for event in ledger.events))


def ledger_delta(epsilon: float, ledger: CompositionLedger) -> float:
    """delta of the full composition at the given epsilon."""
    mu = effective_mu(ledger)
    if mu == 0.0:
        return 0.0
    return gaussian_delta(epsilon, 1.0, mu)


def corrected_training_bound(iterations: int, sigma_step: float, lam: float, epsilon: float) -> float:
    """delta after `iterations` noise-corrected steps at per-step scale sigma_step.

    The corrected scheme composes like plain Gaussian steps at the effective
    scale sigma_tilde = (1 - lam) * sigma_step.
    """
    if iterations < 1:
        raise ConfigurationError("iterations must be >= 1")
    if not 0.0 <= lam < 1.0:
        raise ConfigurationError("lambda must be in [0, 1)")
    if sigma_step <= 0:
        raise ConfigurationError("sigma_step must be positive")
    sigma_tilde = (1.0 - lam) * sigma_step
    ledger = CompositionLedger([GaussianEvent(1.0, sigma_tilde, iterations)])
    return ledger_delta(epsilon, ledger)


def sequence_sensitivity(n: int, lam: float) -> float:
    """L2 sensitivity of a length-n run of subsequent corrected updates.

    Direct partial-sum definition sqrt(sum_{l=0}^{n-1} s_l^2) with
    s_l = 1 + lam + ... + lam^l; bounded above by sqrt(n)/(1-lam).
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if not 0.0 <= lam < 1.0:
        raise ConfigurationError("lambda must be in [0, 1)")
    partial_sums = np.cumsum(lam ** np.arange(n, dtype=np.float64))
    return float(np.sqrt(np.sum(partial_sums**2)))


def _bisect_monotone(f, target: float, lo: float, hi: float, increasing: bool) -> float:
    """Solve f(x) = target for monotone f on [lo, hi] by bisection.

    Runs until the bracket collapses to float resolution (well inside the
    documented 1e-9 tolerance on f) and returns the from-below endpoint, so
    callers that compare the result against a boundary the true root sits on
    never overshoot it.
    """
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if (f(mid) < target) == increasing:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    return lo


def sequence_epsilon(n: int, lam: float, sigma_step: float, delta: float) -> float:
    """epsilon at which a length-n update sequence meets the given delta.

    Solves gaussian_delta(eps, sigma_step, sequence_sensitivity(n, lam)) =
    delta by bisection (delta is strictly decreasing in eps). Returns 0 when
    even eps = 0 already satisfies the target.
    """
    if sigma_step <= 0:
        raise ConfigurationError("sigma_step must be positive")
    if not 0.0 < delta < 1.0:
        raise ConfigurationError("delta must be in (0, 1)")
    sens = sequence_sensitivity(n, lam)
    if gaussian_delta(0.0, sigma_step, sens) <= delta:
        return 0.0
    lo, hi = EPSILON_BRACKET
    return _bisect_monotone(lambda eps: gaussian_delta(eps, sigma_step, sens), delta, lo, hi, increasing=False)


def epsilon_at_delta(ledger: CompositionLedger, delta: float) -> float:
    """Smallest epsilon at which the composed ledger satisfies (eps, delta)-DP."""
    if not 0.0 < delta < 1.0:
        raise ConfigurationError("delta must be in (0, 1)")
    mu = effective_mu(ledger)
    if mu == 0.0:
        return 0.0
    if gaussian_delta(0.0, 1.0, mu) <= delta:
        return 0.0
    lo, hi = EPSILON_BRACKET
    return _bisect_monotone(lambda eps: gaussian_delta(eps, 1.0, mu), delta, lo, hi, increasing=False)


def _mu_for_target(target: EpsDelta) -> float:
    """Largest composed ratio mu whose delta(eps) still meets the target."""
    f = lambda mu: gaussian_delta(target.epsilon, 1.0, mu)
    hi = 1.0
    while f(hi) < target.delta and hi < 1e9:
        hi *= 2.0
    return _bisect_monotone(f, target.delta, 0.0, hi, increasing=True)


def calibrate_sigma(iterations: int, n_g: int, sigma_g: float, target: EpsDelta, lam: float) -> float:
    """Smallest per-step noise scale that keeps a full session inside budget.

    The planned ledger is `iterations` unit-sensitivity steps at effective
    scale (1-lam)*sigma_step plus n_g histogram aggregations at sensitivity
    sqrt(2) and scale sigma_g. Inverts the composed-mu accounting: raises
    CalibrationError when the histogram events alone exceed the budget (no
    amount of step noise can fix that).
    """
    if iterations < 1:
        raise ConfigurationError("iterations must be >= 1")
    if not 0.0 <= lam < 1.0:
        raise ConfigurationError("lambda must be in [0, 1)")
    if n_g < 0:
        raise ConfigurationError("n_g must be >= 0")
    if target.epsilon <= 0 or not 0.0 < target.delta < 1.0:
        raise ConfigurationError("target must have epsilon > 0 and delta in (0, 1)")
    if n_g > 0 and sigma_g <= 0:
        raise ConfigurationError("sigma_g must be positive when n_g > 0")

    mu_budget = _mu_for_target(target)
    mu_hist_sq = n_g * (math.sqrt(2.0) / sigma_g) ** 2 if n_g > 0 else 0.0
    if mu_hist_sq >= mu_budget**2:
        raise CalibrationError(
            f"infeasible: the {n_g} histogram aggregation events at sigma_g={sigma_g} "
            f"already consume the full budget (mu^2={mu_hist_sq:.6g} >= {mu_budget**2:.6g}); "
            "the dominating term is the dynamic-clipping noise, not the step noise"
        )
    mu_steps = math.sqrt(mu_budget**2 - mu_hist_sq)
    sigma_tilde = math.sqrt(iterations) / mu_steps
    sigma_step = sigma_tilde / (1.0 - lam)

    # Bisection lands within float noise of the boundary; nudge up until the
    # planned ledger is verifiably inside budget.
    for _ in range(64):
        if ledger_delta(target.epsilon, planned_ledger(iterations, sigma_step, lam, n_g, sigma_g)) <= target.delta:
            break
        sigma_step *= 1.0 + 1e-12
    return sigma_step


def planned_ledger(iterations: int, sigma_step: float, lam: float, n_g: int, sigma_g: float) -> CompositionLedger:
    """Ledger of a full planned session (step events plus clipping events)."""
    ledger = CompositionLedger()
    if iterations > 0:
        ledger.append(GaussianEvent(1.0, (1.0 - lam) * sigma_step, iterations))
    if n_g > 0:
        ledger.append(GaussianEvent(math.sqrt(2.0), sigma_g, n_g))
    return ledger


def budget_spent(ledger: CompositionLedger, budget: Budget):
    """(epsilon at the budget's delta, whether the budget is exceeded).

    Exhaustion is decided as delta(budget.epsilon) > budget.delta, which by
    monotonicity is the same statement as epsilon(budget.delta) >
    budget.epsilon but avoids the inversion's bisection error right at the
    boundary a calibrated session is designed to land on.
    """
    eps = epsilon_at_delta(ledger, budget.target.delta)
    exhausted = ledger_delta(budget.target.epsilon, ledger) > budget.target.delta
    return eps, exhausted
