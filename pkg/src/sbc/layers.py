"""Variational dense and conv layers with shared group scales.

Every weight is the product ``z_g * w`` of a per-weight Gaussian factor
``w ~ N(mu, sigma^2)`` and a log-normal scale ``z_g`` shared by its group. A
group is an input unit (dense) or an input feature map (conv). The induced
moments of the effective weight are

    E[z w]   = E[z] mu
    Var[z w] = E[z^2] sigma^2 + Var[z] mu^2

which drive both the stochastic forward pass and the prior KL terms.
"""
import math

import numpy as np

from . import priors as P
from . import tensor as T
from .blocks import layout_for
from .errors import ContractError, DimensionError

STOCHASTIC = "stochastic"
POSTERIOR_MEAN = "posterior-mean"
MODES = (STOCHASTIC, POSTERIOR_MEAN)

INIT_WEIGHT_VAR = 1e-8
INIT_SCALE_VAR = 1e-8
SCORE_EPS = 1e-12


class BayesLayer:
    kind = None

    def __init__(self, w_mu, w_logvar, bias_mu, bias_logvar, scale_mu, scale_logvar, name="layer",
                 block_layout=None):
        self.w_mu = T.Tensor(w_mu, requires_grad=True, name=f"{name}.w_mu")
        self.w_logvar = T.Tensor(w_logvar, requires_grad=True, name=f"{name}.w_logvar")
        self.bias_mu = T.Tensor(bias_mu, requires_grad=True, name=f"{name}.bias_mu")
        self.bias_logvar = T.Tensor(bias_logvar, requires_grad=True, name=f"{name}.bias_logvar")
        self.scale_mu = T.Tensor(scale_mu, requires_grad=True, name=f"{name}.scale_mu")
        self.scale_logvar = T.Tensor(scale_logvar, requires_grad=True, name=f"{name}.scale_logvar")
        self.name = name
        self.block_layout = block_layout
        self.weight_mask = np.ones(self.w_mu.shape, dtype=bool)
        self.out_mask = np.ones(self.bias_mu.shape, dtype=bool)
        if self.scale_mu.shape != (self.n_groups,):
            raise DimensionError(f"{name}: need one scale per group ({self.n_groups})")

    # --- structure -------------------------------------------------------

    @property
    def n_groups(self):
        return self.w_mu.shape[self._group_axis]

    @property
    def n_out(self):
        return self.bias_mu.shape[0]

    def _group_shape(self):
        shape = [1] * self.w_mu.ndim
        shape[self._group_axis] = self.n_groups
        return tuple(shape)

    def _group_sum_axes(self):
        return tuple(i for i in range(self.w_mu.ndim) if i != self._group_axis)

    def group_mask(self):
        """Groups with at least one unmasked weight."""
        return self.weight_mask.any(axis=self._group_sum_axes())

    def parameters(self):
        return [self.w_mu, self.w_logvar, self.bias_mu, self.bias_logvar, self.scale_mu, self.scale_logvar]

    def variational_parameters(self):
        return self.parameters()

    def mean_parameters(self):
        return [self.w_mu, self.bias_mu]

    # --- moments ---------------------------------------------------------

    def scale_moments(self):
        """(E[z], E[z^2], Var[z]) per group as Tensors broadcastable to the weights."""
        m = T.reshape(self.scale_mu, self._group_shape())
        v = T.exp(T.reshape(self.scale_logvar, self._group_shape()))
        ez = T.exp(m + 0.5 * v)
        ez2 = T.exp(2.0 * m + 2.0 * v)
        # Var[z] = E[z]^2 (e^v - 1), written to stay exact at v = 0
        varz = T.square(ez) * T.fused(np.expm1, lambda g, out, x: (g * (out + 1.0),), v)
        return ez, ez2, varz

    def effective_moments(self, masked=True):
        ez, ez2, varz = self.scale_moments()
        mean = ez * self.w_mu
        var = ez2 * T.exp(self.w_logvar) + varz * T.square(self.w_mu)
        if masked:
            mask = self.weight_mask.astype(np.float64)
            mean = mean * mask
            var = var * mask
        return mean, var

    def posterior_mean_weight(self):
        """E[z] * mu with masks applied, as a plain array."""
        ez = np.exp(self.scale_mu.data + 0.5 * np.exp(self.scale_logvar.data)).reshape(self._group_shape())
        return ez * self.w_mu.data * self.weight_mask

    def posterior_mean_bias(self):
        return self.bias_mu.data * self.out_mask

    def effective_log_alpha(self):
        """ln(Var/E^2) of each effective weight (inf where the mean is 0)."""
        v = np.exp(self.scale_logvar.data).reshape(self._group_shape())
        ratio = np.exp(self.w_logvar.data) / np.maximum(self.w_mu.data ** 2, 1e-300)
        with np.errstate(over="ignore"):
            return np.log(np.expm1(v) + np.exp(v) * ratio)

    # --- forward ---------------------------------------------------------

    def _linear(self, x, w):
        raise NotImplementedError

    def _bias_shape(self):
        raise NotImplementedError

    def forward(self, x, mode=POSTERIOR_MEAN, rng=None):
        if mode not in MODES:
            raise ContractError(f"unknown forward mode {mode!r}")
        x = T.as_tensor(x)
        self._check_input(x)
        out_mask = self.out_mask.astype(np.float64)
        bias_mu = T.reshape(self.bias_mu * out_mask, self._bias_shape())
        if mode == POSTERIOR_MEAN:
            ez = T.exp(self.scale_mu + 0.5 * T.exp(self.scale_logvar))
            w = T.reshape(ez, self._group_shape()) * self.w_mu * self.weight_mask.astype(np.float64)
            return self._linear(x, w) + bias_mu
        if rng is None:
            raise ContractError("stochastic forward needs an rng")
        mean_w, var_w = self.effective_moments()
        mean = self._linear(x, mean_w) + bias_mu
        var = self._linear(T.square(x), var_w) + T.reshape(T.exp(self.bias_logvar) * out_mask,
                                                            self._bias_shape())
        eps = rng.standard_normal(mean.shape)
        return mean + T.sqrt(var) * eps

    __call__ = forward

    # --- KL --------------------------------------------------------------

    def component_kls(self, mixture):
        """Per-group KL of each mixture component, as a Tensor [groups x K]."""
        mask = self.weight_mask.astype(np.float64)
        mean, var = self.effective_moments(masked=False)
        axes = self._group_sum_axes()
        log_scales = mixture.log_scales
        cols = []
        for k, kind in enumerate(mixture.kinds):
            if kind == "horseshoe":
                per_w = P.std_normal_kl_t(self.w_mu, self.w_logvar)
                scale = P.horseshoe_scale_kl_t(self.scale_mu, self.scale_logvar, log_scales[k])
                cols.append(T.tsum(per_w * mask, axis=axes) + scale)
            elif kind == "laplace":
                per_w = P.laplace_kl_t(mean, var, T.exp(log_scales[k]))
                cols.append(T.tsum(per_w * mask, axis=axes))
            else:
                # log-uniform on the effective weights and on the group scale itself
                per_w = P.jeffreys_kl_t(mean, var)
                ez, _, varz = self.scale_moments()
                col = T.tsum(per_w * mask, axis=axes) + P.jeffreys_kl_t(T.reshape(ez, (-1,)), T.reshape(varz, (-1,)))
                cols.append(col)
        return T.stack(cols, axis=-1)

    def kl(self, mixture, e_log_pi=None):
        """Mixture KL bound summed over live groups, plus the bias KL.

        Returns (scalar Tensor, responsibilities [groups x K]).
        """
        if e_log_pi is None:
            e_log_pi = P.dirichlet_elogpi_t(mixture.alpha_t())
        kls = self.component_kls(mixture)
        live = self.group_mask().astype(np.float64)
        bound = P.mixture_bound_t(kls, e_log_pi)
        total = T.tsum(bound * live)
        bias_kl = P.std_normal_kl_t(self.bias_mu, self.bias_logvar) * self.out_mask.astype(np.float64)
        total = total + T.tsum(bias_kl)
        resp = P.mixture_responsibilities(kls.data, e_log_pi.data)
        return total, resp

    # --- pruning statistic ----------------------------------------------

    def group_scores(self, reduce="min"):
        """E[ln z_g] - 0.5 * reduce_j ln(sigma_j^2 / mu_j^2 + eps) over unmasked weights.

        The default ``min`` scores a group by its most certain weight, so a
        unit stays alive while any of its weights does. ``max`` (least
        certain weight) and ``median`` are available for comparison.
        """
        if reduce not in ("min", "max", "median"):
            raise ContractError(f"reduce must be min, max or median, got {reduce!r}")
        with np.errstate(divide="ignore", over="ignore"):
            la = np.log(np.exp(self.w_logvar.data) / self.w_mu.data ** 2 + SCORE_EPS)
        live = np.moveaxis(self.weight_mask, self._group_axis, 0).reshape(self.n_groups, -1)
        flat = np.moveaxis(la, self._group_axis, 0).reshape(self.n_groups, -1)
        empty = ~live.any(axis=1)
        if reduce == "min":
            red = np.where(live, flat, np.inf).min(axis=1)
        elif reduce == "max":
            red = np.where(live, flat, -np.inf).max(axis=1)
        else:
            red = np.array([np.median(f[m]) if m.any() else np.inf for f, m in zip(flat, live)])
        red = np.where(empty, np.inf, red)
        return self.scale_mu.data - 0.5 * red

    # --- serialization ---------------------------------------------------

    def state(self):
        return {
            "w_mu": self.w_mu.data, "w_logvar": self.w_logvar.data,
            "bias_mu": self.bias_mu.data, "bias_logvar": self.bias_logvar.data,
            "scale_mu": self.scale_mu.data, "scale_logvar": self.scale_logvar.data,
            "weight_mask": self.weight_mask, "out_mask": self.out_mask,
        }

    def load_state(self, st):
        for key in ("w_mu", "w_logvar", "bias_mu", "bias_logvar", "scale_mu", "scale_logvar"):
            getattr(self, key).data = np.array(st[key], dtype=np.float64)
        self.weight_mask = np.array(st["weight_mask"], dtype=bool)
        self.out_mask = np.array(st["out_mask"], dtype=bool)


class BayesDense(BayesLayer):
    """Weights stored [in x out]; one scale per input unit."""

    kind = "dense"
    _group_axis = 0

    @property
    def n_in(self):
        return self.w_mu.shape[0]

    def _check_input(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"{self.name}: expected [batch x {self.n_in}] input, got {x.shape}")

    def _linear(self, x, w):
        return T.matmul(x, w)

    def _bias_shape(self):
        return (1, self.n_out)


class BayesConv(BayesLayer):
    """Kernels stored [c_out x c_in x kh x kw]; one scale per input feature map."""

    kind = "conv"
    _group_axis = 1

    def __init__(self, *args, stride=1, **kw):
        self.stride = stride
        super().__init__(*args, **kw)

    @property
    def n_in(self):
        return self.w_mu.shape[1]

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.n_in:
            raise DimensionError(f"{self.name}: expected [batch x {self.n_in} x h x w] input, got {x.shape}")

    def _linear(self, x, w):
        return T.conv2d(x, w, stride=self.stride)

    def _bias_shape(self):
        return (1, self.n_out, 1, 1)


def init_layer(shape, warm_start=None, seed=0, name="layer", warm_bias=None, block_size=16,
               block_stride=8, use_blocks=True, scale_init=0.0):
    """Build a dense ([in, out]) or conv ([co, ci, kh, kw]) layer.

    ``w_mu`` is ``warm_start`` when given, else He-scaled Gaussian noise.
    Weight log-variances start at ln(1e-8); group scales start at
    ln z = ``scale_init`` with log-variance ln(1e-8).
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) not in (2, 4):
        raise DimensionError(f"layer shape must be 2-d or 4-d, got {shape}")
    rng = np.random.default_rng(seed)
    fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
    if warm_start is not None:
        w = np.array(warm_start, dtype=np.float64)
        if w.shape != shape:
            raise DimensionError(f"warm start shape {w.shape} does not match {shape}")
    else:
        w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
    n_out = shape[1] if len(shape) == 2 else shape[0]
    n_groups = shape[0] if len(shape) == 2 else shape[1]
    bias = np.zeros(n_out) if warm_bias is None else np.array(warm_bias, dtype=np.float64)
    if bias.shape != (n_out,):
        raise DimensionError(f"warm bias shape {bias.shape} does not match ({n_out},)")
    args = (w, np.full(shape, math.log(INIT_WEIGHT_VAR)), bias, np.full(n_out, math.log(INIT_WEIGHT_VAR)),
            np.full(n_groups, float(scale_init)), np.full(n_groups, math.log(INIT_SCALE_VAR)))
    layout = layout_for(int(np.prod(shape)), block_size, block_stride) if use_blocks else None
    cls = BayesDense if len(shape) == 2 else BayesConv
    return cls(*args, name=name, block_layout=layout)
