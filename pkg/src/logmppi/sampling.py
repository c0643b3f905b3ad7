"""Control-perturbation samplers: Gaussian and normal log-normal (NLN) mixture.

The NLN perturbation of one control channel is ``Z = X * Y`` with
``X ~ N(0, s2_n)`` and ``Y = exp(W)``, ``W ~ N(mu_ln, s2_ln)``.  The
log-normal parameters are moment-matched from the normal variance, see
:func:`match_nln_params`.

Seeds are any int or tuple of ints accepted by :class:`numpy.random.SeedSequence`.
Batched draws for a controller use one stream per fixed-size block of
rollouts so that the result does not depend on how many workers fill it.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import integrate

Seed = Union[int, Sequence[int]]

#: rollouts per independent RNG stream in :func:`sample_batch`
BLOCK_ROLLOUTS = 128


class ParameterDomainError(ValueError):
    """Raised when a noise parameter is outside its valid domain."""


class QuadratureError(ArithmeticError):
    """Raised when the NLN density integral fails to converge."""


def _as_diag(values, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ParameterDomainError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterDomainError(f"{name} must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class GaussianNoiseSpec:
    """Zero-mean diagonal Gaussian perturbation.

    A zero entry is allowed and yields a degenerate (all-zero) channel.
    """

    variance_diag: np.ndarray

    def __post_init__(self):
        var = _as_diag(self.variance_diag, "variance_diag")
        if np.any(var < 0):
            raise ParameterDomainError(f"variance_diag must be >= 0, got {var}")
        object.__setattr__(self, "variance_diag", var)

    @property
    def dim(self) -> int:
        return self.variance_diag.size

    @property
    def effective_variance(self) -> np.ndarray:
        return self.variance_diag


@dataclass(frozen=True)
class NlnParams:
    """Per-channel parameters of the NLN mixture.

    ``mu_ln`` and ``sigma2_ln`` are the location and scale of the log-normal
    factor (the mean and variance of its logarithm), not its moments.
    """

    sigma2_n: np.ndarray
    mu_ln: np.ndarray
    sigma2_ln: np.ndarray
    sigma2_nln: np.ndarray

    def __post_init__(self):
        fields = {}
        for name in ("sigma2_n", "mu_ln", "sigma2_ln", "sigma2_nln"):
            fields[name] = _as_diag(getattr(self, name), name)
        sizes = {v.size for v in fields.values()}
        if len(sizes) != 1:
            raise ParameterDomainError("all NlnParams fields must have the same length")
        for name in ("sigma2_n", "sigma2_ln", "sigma2_nln"):
            if np.any(fields[name] < 0):
                raise ParameterDomainError(f"{name} must be >= 0, got {fields[name]}")
        for name, value in fields.items():
            object.__setattr__(self, name, value)

    @property
    def dim(self) -> int:
        return self.sigma2_n.size

    @property
    def effective_variance(self) -> np.ndarray:
        return self.sigma2_nln


NoisePolicy = Union[GaussianNoiseSpec, NlnParams]


@dataclass(frozen=True)
class NoiseSequence:
    """``samples`` has shape (horizon, m)."""

    samples: np.ndarray
    seed: Seed

    @property
    def horizon(self) -> int:
        return self.samples.shape[0]


def match_nln_params(variance_diag) -> NlnParams:
    """Moment-matched NLN parameters for a normal-factor variance.

    The log-normal factor uses the LN mean/variance formulas evaluated at
    location 0 and scale equal to the normal standard deviation; the
    mixture variance then follows from ``Var(XY)`` with ``E[X] = 0``.

    Examples
    --------
    >>> p = match_nln_params(0.002)
    >>> round(float(p.mu_ln[0]), 3), round(float(p.sigma2_ln[0]), 3), round(float(p.sigma2_nln[0]), 3)
    (1.023, 0.048, 0.017)
    """
    s2n = _as_diag(variance_diag, "variance_diag")
    if np.any(s2n <= 0):
        raise ParameterDomainError(f"normal variance must be > 0, got {s2n}")
    sd = np.sqrt(s2n)
    mu_ln = np.exp(0.5 * sd)
    sigma2_ln = np.exp(sd) * (np.exp(sd) - 1.0)
    sigma2_nln = s2n * np.exp(2.0 * mu_ln + 2.0 * sigma2_ln)
    return NlnParams(s2n, mu_ln, sigma2_ln, sigma2_nln)


def _generator(seed: Seed, spawn_key: tuple = ()) -> np.random.Generator:
    entropy = seed if isinstance(seed, (int, np.integer)) else tuple(int(s) for s in seed)
    ss = np.random.SeedSequence(entropy, spawn_key=spawn_key)
    return np.random.Generator(np.random.SFC64(ss))


def _fill_gaussian(rng: np.random.Generator, var: np.ndarray, out: np.ndarray) -> None:
    rng.standard_normal(out=out)
    out *= np.sqrt(var)


def _fill_nln(rng: np.random.Generator, params: NlnParams, out: np.ndarray) -> None:
    # out holds X, tmp holds W; both drawn fresh per (rollout, step, channel)
    rng.standard_normal(out=out)
    out *= np.sqrt(params.sigma2_n)
    tmp = rng.standard_normal(out.shape)
    tmp *= np.sqrt(params.sigma2_ln)
    tmp += params.mu_ln
    np.exp(tmp, out=tmp)
    out *= tmp


def _check_horizon(horizon: int) -> None:
    if int(horizon) < 1:
        raise ParameterDomainError(f"horizon must be >= 1, got {horizon}")


def sample_gaussian(spec: GaussianNoiseSpec, horizon: int, rng_seed: Seed) -> NoiseSequence:
    """i.i.d. zero-mean normal perturbations, shape (horizon, m)."""
    _check_horizon(horizon)
    out = np.empty((int(horizon), spec.dim))
    _fill_gaussian(_generator(rng_seed), spec.variance_diag, out)
    return NoiseSequence(out, rng_seed)


def sample_nln(params: NlnParams, horizon: int, rng_seed: Seed) -> NoiseSequence:
    """NLN perturbations: each entry is an independent normal times an independent log-normal."""
    _check_horizon(horizon)
    out = np.empty((int(horizon), params.dim))
    _fill_nln(_generator(rng_seed), params, out)
    return NoiseSequence(out, rng_seed)


def _policy_scales(policy: NoisePolicy):
    """``(sd_n, mu_ln, sd_ln, is_nln)`` as consumed by the batch fill kernels."""
    if isinstance(policy, GaussianNoiseSpec):
        zero = np.zeros(policy.dim)
        return np.sqrt(policy.variance_diag), zero, zero, False
    if isinstance(policy, NlnParams):
        return np.sqrt(policy.sigma2_n), policy.mu_ln, np.sqrt(policy.sigma2_ln), True
    raise TypeError(f"unknown noise policy {type(policy).__name__}")


def sample_batch(
    policy: NoisePolicy,
    rollouts: int,
    horizon: int,
    seed: Seed,
    *,
    threads: int = 1,
    out: np.ndarray | None = None,
    kernel=None,
) -> np.ndarray:
    """Perturbations for a whole rollout batch, shape (rollouts, horizon, m).

    Rollout block ``b`` (``BLOCK_ROLLOUTS`` rollouts each) is drawn from the
    stream ``SeedSequence(seed, spawn_key=(b,))``, so the batch is identical
    for every ``threads`` value.  ``out`` is an optional reusable buffer of
    the batch shape.  ``kernel`` picks the fill backend (default: active).
    """
    from . import backend

    _check_horizon(horizon)
    if rollouts < 1:
        raise ParameterDomainError(f"rollouts must be >= 1, got {rollouts}")
    shape = (int(rollouts), int(horizon), policy.dim)
    if out is None:
        out = np.empty(shape)
    elif out.shape != shape or out.dtype != np.float64 or not out.flags.c_contiguous:
        raise ValueError(f"out must be a C-contiguous float64 array of shape {shape}")
    nblocks = -(-shape[0] // BLOCK_ROLLOUTS)
    bit_generators = [_generator(seed, (b,)).bit_generator for b in range(nblocks)]
    sd_n, mu_ln, sd_ln, nln = _policy_scales(policy)
    k = kernel or backend.get()
    k.fill_noise(bit_generators, out, sd_n, mu_ln, sd_ln, nln, BLOCK_ROLLOUTS, max(1, int(threads)))
    return out


def nln_pdf(z, params: NlnParams, channel: int = 0, *, epsrel: float = 1e-8):
    """Density of the NLN mixture for one channel, by adaptive quadrature.

    Integrates over the log of the log-normal factor, ``s = ln x``::

        f(z) = E_s[ phi(z / (sd_n e^s)) / (sd_n e^s) ],  s ~ N(mu_ln, s2_ln)

    Accepts a scalar or array ``z``; returns the same shape.
    """
    sd_n = math.sqrt(float(params.sigma2_n[channel]))
    mu = float(params.mu_ln[channel])
    sd_ln = math.sqrt(float(params.sigma2_ln[channel]))
    if sd_n <= 0:
        raise ParameterDomainError("nln_pdf needs a positive normal variance")

    if sd_ln == 0.0:
        scale = sd_n * math.exp(mu)
        zz = np.asarray(z, dtype=float)
        return np.exp(-0.5 * (zz / scale) ** 2) / (scale * math.sqrt(2 * math.pi))

    norm = 1.0 / (2.0 * math.pi * sd_n * sd_ln)
    lo, hi = mu - 12.0 * sd_ln, mu + 12.0 * sd_ln

    def one(zv: float) -> float:
        a = zv * zv / (2.0 * sd_n * sd_n)

        def integrand(s: float) -> float:
            return math.exp(-a * math.exp(-2.0 * s) - (s - mu) ** 2 / (2.0 * sd_ln * sd_ln) - s)

        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, err = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=epsrel, limit=200)
            except integrate.IntegrationWarning as exc:
                raise QuadratureError(f"NLN density quadrature failed at z={zv!r}: {exc}") from exc
        return norm * val

    zz = np.asarray(z, dtype=float)
    if zz.ndim == 0:
        return one(float(zz))
    return np.array([one(float(v)) for v in zz.ravel()]).reshape(zz.shape)
