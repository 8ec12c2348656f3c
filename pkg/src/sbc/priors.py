"""Scale-mixture-of-normals priors, their KL terms, and the Dirichlet mixture.

Each function has a plain numpy form (taking posterior dataclasses or arrays)
and, where the training objective needs it, a ``*_t`` form operating on
:class:`~sbc.tensor.Tensor` with hand-written derivatives.

Components
----------
horseshoe
    w | z ~ N(0, z^2), z ~ C+(0, tau). The half-Cauchy is written as
    z^2 | s ~ Gamma(1/2, scale tau^2 s), s ~ InvGamma(1/2, 1); with a
    log-normal q(z) and a log-normal q(s) the KL is closed form, and the
    optimal q(s) is itself closed form (ln s ~ N(ln(1 + E[z^2]/tau^2) + 1/2, 1)).
laplace
    Laplace(0, b), i.e. the exponential mixing density on z^2.
normal-jeffreys
    p(z) proportional to 1/z, giving p(w) proportional to 1/|w| (improper).
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import tensor as T
from .errors import ContractError, DomainError

KINDS = ("horseshoe", "laplace", "normal-jeffreys")
PROFILE_KINDS = KINDS + ("cauchy", "spike-and-slab")
DEFAULT_SCALE = math.exp(-7.0)
JEFFREYS_K1, JEFFREYS_K2, JEFFREYS_K3 = 0.63576, 1.87320, 1.48695

_LOG_2PI_E = math.log(2.0 * math.pi * math.e)
# constant of the closed-form horseshoe scale KL at the optimal q(s)
_HS_CONST = 0.5 - 2.0 * math.log(2.0)


@dataclass(frozen=True)
class PriorComponent:
    kind: str
    scale_hyper: float = DEFAULT_SCALE

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise DomainError(f"unknown prior kind {self.kind!r}")
        if self.kind != "normal-jeffreys" and not self.scale_hyper > 0:
            raise DomainError(f"{self.kind} scale must be positive, got {self.scale_hyper}")


@dataclass
class GaussianPosterior:
    mu: object
    log_var: object

    @property
    def var(self):
        return np.exp(self.log_var)

    @property
    def std(self):
        return np.exp(0.5 * np.asarray(self.log_var))


@dataclass
class LogNormalPosterior:
    """q(z) with ln z ~ N(mu, exp(log_var))."""

    mu: object
    log_var: object

    @property
    def var(self):
        return np.exp(self.log_var)

    def mean(self):
        return np.exp(np.asarray(self.mu) + 0.5 * self.var)

    def second_moment(self):
        return np.exp(2.0 * np.asarray(self.mu) + 2.0 * self.var)


# ---------------------------------------------------------------- laplace


def _laplace_parts(m, v, b):
    s = np.sqrt(v)
    t = m / s
    phi2 = math.sqrt(2.0 / math.pi) * np.exp(-0.5 * t * t)  # 2*pdf(t)
    erf_t = special.erf(t / math.sqrt(2.0))
    e_abs = s * phi2 + m * erf_t
    kl = -0.5 * (_LOG_2PI_E + np.log(v)) + np.log(2.0 * b) + e_abs / b
    return kl, s, phi2, erf_t, e_abs


def kl_laplace(q, b):
    """KL(N(mu, sigma^2) || Laplace(0, b)), elementwise over array posteriors."""
    b = np.asarray(b, dtype=np.float64)
    if np.any(b <= 0):
        raise DomainError("Laplace scale b must be positive")
    kl = _laplace_parts(np.asarray(q.mu, dtype=np.float64), np.exp(q.log_var), b)[0]
    return kl if np.ndim(kl) else float(kl)


def laplace_kl_t(mean, var, b):
    """Tensor form of :func:`kl_laplace` parameterized by mean and variance."""

    cache = {}

    def fwd(m, v, bb):
        cache["parts"] = _laplace_parts(m, v, bb)
        return cache["parts"][0]

    def bwd(g, out, m, v, bb):
        _, s, phi2, erf_t, e_abs = cache["parts"]
        d_m = erf_t / bb
        d_v = -0.5 / v + phi2 / (2.0 * s * bb)
        d_b = 1.0 / bb - e_abs / (bb * bb)
        return g * d_m, g * d_v, g * d_b

    return T.fused(fwd, bwd, mean, var, b)


# ---------------------------------------------------------------- normal-jeffreys


def _jeffreys_parts(m, v):
    m2 = m * m
    with np.errstate(divide="ignore"):
        log_alpha = np.where(m2 > 0, np.log(v) - np.log(np.where(m2 > 0, m2, 1.0)), np.inf)
    sig = special.expit(JEFFREYS_K2 + JEFFREYS_K3 * log_alpha)
    kl = JEFFREYS_K1 - JEFFREYS_K1 * sig + 0.5 * np.logaddexp(0.0, -log_alpha)
    return kl, log_alpha, sig


def kl_jeffreys(q):
    """Approximate KL to the log-uniform prior as a function of alpha = sigma^2 / mu^2.

    Uses the sigmoid-polynomial fit with the additive constant chosen so the
    value tends to 0 as alpha -> infinity; mu == 0 is treated as alpha = inf.
    """
    kl = _jeffreys_parts(np.asarray(q.mu, dtype=np.float64), np.exp(q.log_var))[0]
    return kl if np.ndim(kl) else float(kl)


def jeffreys_kl_exact(log_alpha, n_samples=10_000_000, seed=0):
    """Monte Carlo value of the defining expectation (used as a test oracle).

    KL(alpha) = k1 - 0.5 ln alpha + E[ln |e|], e ~ N(1, alpha).
    """
    alpha = math.exp(log_alpha)
    rng = np.random.default_rng(seed)
    e = 1.0 + math.sqrt(alpha) * rng.standard_normal(n_samples)
    return JEFFREYS_K1 - 0.5 * log_alpha + float(np.mean(np.log(np.abs(e))))


def jeffreys_kl_t(mean, var):
    cache = {}

    def fwd(m, v):
        cache["parts"] = _jeffreys_parts(m, v)
        return cache["parts"][0]

    def bwd(g, out, m, v):
        _, log_alpha, sig = cache["parts"]
        d_la = -JEFFREYS_K1 * JEFFREYS_K3 * sig * (1.0 - sig) - 0.5 * special.expit(-log_alpha)
        d_v = d_la / v
        with np.errstate(divide="ignore", invalid="ignore"):
            d_m = np.where(m != 0, d_la * (-2.0 / np.where(m != 0, m, 1.0)), 0.0)
        return g * d_m, g * d_v

    return T.fused(fwd, bwd, mean, var)


# ---------------------------------------------------------------- horseshoe


def kl_std_normal(q):
    """KL(N(mu, sigma^2) || N(0, 1))."""
    mu = np.asarray(q.mu, dtype=np.float64)
    v = np.exp(q.log_var)
    return 0.5 * (v + mu * mu - 1.0 - np.asarray(q.log_var))


def horseshoe_scale_kl(q_scale, tau):
    """KL of the scale and its auxiliary against the half-Cauchy hierarchy."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0):
        raise DomainError("horseshoe tau must be positive")
    m = np.asarray(q_scale.mu, dtype=np.float64)
    lv = np.asarray(q_scale.log_var, dtype=np.float64)
    log_tau = np.log(tau)
    return (-m - 0.5 * lv + np.logaddexp(0.0, 2.0 * m + 2.0 * np.exp(lv) - 2.0 * log_tau)
            + log_tau + _HS_CONST)


def horseshoe_aux_posterior(q_scale, tau):
    """Closed-form optimal log-normal posterior over the inverse-gamma auxiliary."""
    c = 1.0 + q_scale.second_moment() / tau ** 2
    return LogNormalPosterior(np.log(c) + 0.5, np.zeros_like(np.asarray(c)))


def kl_horseshoe(q_weight, q_scale, tau):
    """Total KL of one non-centered weight plus its scale auxiliaries."""
    if not np.all(np.isfinite(q_weight.log_var)) or not np.all(np.isfinite(q_scale.log_var)):
        raise DomainError("variational variances must be positive and finite")
    kl = kl_std_normal(q_weight) + horseshoe_scale_kl(q_scale, tau)
    return kl if np.ndim(kl) else float(kl)


def std_normal_kl_t(mu, log_var):
    return 0.5 * (T.exp(log_var) + T.square(mu) - 1.0 - log_var)


def horseshoe_scale_kl_t(m, log_v, log_tau):
    z = 2.0 * m + 2.0 * T.exp(log_v) - 2.0 * log_tau
    return -1.0 * m - 0.5 * log_v + T.softplus(z) + log_tau + _HS_CONST


# ---------------------------------------------------------------- dirichlet mixture


def dirichlet_elogpi(alpha):
    """E[ln pi_k] under Dirichlet(alpha)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0):
        raise DomainError("Dirichlet parameters must be positive")
    return special.digamma(alpha) - special.digamma(alpha.sum())


def dirichlet_elogpi_t(alpha):
    return T.digamma(alpha) - T.digamma(alpha.sum())


def mixture_responsibilities(kls, e_log_pi):
    """Simplex weights minimizing the convexity bound; rows of ``kls`` are groups."""
    kls = np.asarray(kls, dtype=np.float64)
    e_log_pi = np.asarray(e_log_pi, dtype=np.float64)
    if kls.shape[-1] != e_log_pi.shape[-1]:
        raise ContractError("per-component KLs and E[ln pi] must have equal length")
    logits = e_log_pi - kls
    logits = logits - logits.max(axis=-1, keepdims=True)
    r = np.exp(logits)
    return r / r.sum(axis=-1, keepdims=True)


def mixture_kl_bound(kls, r, e_log_pi):
    """sum_k r_k (KL_k - E[ln pi_k] + ln r_k), with 0 ln 0 = 0."""
    kls = np.asarray(kls, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    e_log_pi = np.asarray(e_log_pi, dtype=np.float64)
    if np.any(r < -1e-9) or np.any(np.abs(r.sum(axis=-1) - 1.0) > 1e-9):
        raise ContractError("responsibilities must lie on the simplex")
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)), 0.0)
    out = (r * (kls - e_log_pi) + ent).sum(axis=-1)
    return out if np.ndim(out) else float(out)


def mixture_bound_t(kl_matrix, e_log_pi):
    """Bound at the optimal responsibilities, per row: -logsumexp(E[ln pi] - KL)."""
    return -1.0 * T.logsumexp(e_log_pi - kl_matrix, axis=-1)


@dataclass
class PriorMixtureSpec:
    """Mixture of prior components with learnable Dirichlet alpha and scales.

    Learnable quantities are stored unconstrained: ``alpha = softplus(alpha_raw)``
    and ``scale_k = exp(log_scale_k)``. The horseshoe's scale is the learnable
    global tau (``global_sigma``).
    """

    components: list = field(default_factory=lambda: [PriorComponent(k) for k in KINDS])
    alpha: object = None
    learn_scales: bool = True
    learn_alpha: bool = True

    def __post_init__(self):
        kinds = [c.kind for c in self.components]
        if not kinds:
            raise DomainError("mixture needs at least one component")
        if len(set(kinds)) != len(kinds):
            raise DomainError("component kinds must be distinct")
        if any(k not in KINDS for k in kinds):
            raise DomainError(f"trainable components are {KINDS}")
        alpha = np.ones(len(kinds)) if self.alpha is None else np.asarray(self.alpha, dtype=np.float64)
        if alpha.shape != (len(kinds),) or np.any(alpha <= 0):
            raise DomainError("alpha must hold one positive value per component")
        self.alpha_raw = T.Tensor(alpha + np.log(-np.expm1(-alpha)), requires_grad=self.learn_alpha,
                                  name="mixture.alpha_raw")
        scales = [c.scale_hyper if c.kind != "normal-jeffreys" else 1.0 for c in self.components]
        self.log_scales = T.Tensor(np.log(scales), requires_grad=self.learn_scales, name="mixture.log_scales")

    @property
    def kinds(self):
        return [c.kind for c in self.components]

    def index(self, kind):
        return self.kinds.index(kind)

    def alpha_t(self):
        return T.softplus(self.alpha_raw)

    def alpha_values(self):
        return np.logaddexp(0.0, self.alpha_raw.data)

    def scale_values(self):
        return np.exp(self.log_scales.data)

    @property
    def global_sigma(self):
        if "horseshoe" not in self.kinds:
            return None
        return float(self.scale_values()[self.index("horseshoe")])

    def parameters(self):
        return [p for p in (self.alpha_raw, self.log_scales) if p.requires_grad]


# ---------------------------------------------------------------- density profiles


def _log_exp_e1(x):
    """ln(exp(x) * E1(x)) for x > 0, stable for large x."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    small = x < 100.0
    xs = x[small]
    out[small] = xs + np.log(special.exp1(xs))
    xl = x[~small]
    series = np.zeros_like(xl)
    term = np.ones_like(xl)
    for k in range(7):
        series += term
        term = term * -(k + 1) / xl
    out[~small] = np.log(series) - np.log(xl)
    return out


def prior_logpdf(component, w):
    """Marginal log-density of ``component`` at ``w`` (array or scalar).

    The normal-Jeffreys density is the improper 1/(2|w|) obtained by
    integrating N(w; 0, z^2)/z over z.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise DomainError("density grid must be finite")
    s = component.scale_hyper
    a = np.abs(w)
    with np.errstate(divide="ignore"):
        if component.kind == "laplace":
            out = -np.log(2.0 * s) - a / s
        elif component.kind == "horseshoe":
            x = np.maximum(w * w / (2.0 * s * s), 1e-300)
            out = -0.5 * math.log(2.0 * math.pi ** 3) - math.log(s) + _log_exp_e1(x)
            out = np.where(w == 0, np.inf, out)
        elif component.kind == "normal-jeffreys":
            out = -np.log(2.0 * a)
        elif component.kind == "cauchy":
            out = -np.log(math.pi * s * (1.0 + (w / s) ** 2))
        else:
            # spike-and-slab profile: equal-weight narrow spike (s/100) and slab (s)
            spike = -0.5 * (w / (0.01 * s)) ** 2 - math.log(0.01 * s * math.sqrt(2 * math.pi))
            slab = -0.5 * (w / s) ** 2 - math.log(s * math.sqrt(2 * math.pi))
            out = np.logaddexp(spike, slab) + math.log(0.5)
    return out if np.ndim(out) else float(out)


def profile_grid(n=201, lo=1e-6, hi=10.0):
    """Symmetric log-spaced grid covering [-hi, -lo] and [lo, hi]."""
    pos = np.logspace(math.log10(lo), math.log10(hi), n)
    return np.concatenate([-pos[::-1], pos])


def density_profiles(grid=None, scale=1.0, kinds=PROFILE_KINDS):
    """Columns for the density CSV: ``{"w": grid, kind: logpdf, ...}``."""
    grid = profile_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    cols = {"w": grid}
    for kind in kinds:
        cols[kind] = prior_logpdf(PriorComponent(kind, scale), grid)
    return cols
