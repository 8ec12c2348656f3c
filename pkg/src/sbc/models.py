"""Network containers for the benchmark architectures, plus checkpoints."""
import json

import numpy as np

from . import priors as P
from . import tensor as T
from .errors import ContractError, DimensionError, FormatError
from .layers import BayesConv, BayesDense, POSTERIOR_MEAN, init_layer

# (kind, shape, pool_after) per layer; ReLU follows every layer but the last.
ARCHITECTURES = {
    "lenet300": {
        "input": (1, 28, 28),
        "layers": [("dense", (784, 300), False), ("dense", (300, 100), False), ("dense", (100, 10), False)],
    },
    "lenet5": {
        "input": (1, 28, 28),
        "layers": [("conv", (20, 1, 5, 5), True), ("conv", (50, 20, 5, 5), True),
                   ("dense", (800, 500), False), ("dense", (500, 10), False)],
    },
    "synthconv": {
        "input": (1, 32, 32),
        "layers": [("conv", (16, 1, 3, 3), False), ("conv", (16, 16, 3, 3), True),
                   ("conv", (16, 16, 3, 3), True), ("dense", (576, 32), False), ("dense", (32, 4), False)],
    },
}


def architecture(name, classes=None):
    if name not in ARCHITECTURES:
        raise ContractError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
    spec = {"input": ARCHITECTURES[name]["input"], "layers": list(ARCHITECTURES[name]["layers"])}
    if classes is not None:
        kind, shape, pool = spec["layers"][-1]
        spec["layers"][-1] = (kind, (shape[0], int(classes)), pool)
    return spec


class Network:
    """A stack of Bayesian layers sharing one prior mixture."""

    def __init__(self, arch, layers, mixture, pools, input_shape):
        self.arch = arch
        self.layers = layers
        self.mixture = mixture
        self.pools = list(pools)
        self.input_shape = tuple(input_shape)

    @property
    def num_classes(self):
        return self.layers[-1].n_out

    def parameters(self):
        ps = [p for layer in self.layers for p in layer.parameters()]
        return ps + self.mixture.parameters()

    def mean_parameters(self):
        return [p for layer in self.layers for p in layer.mean_parameters()]

    def _prepare(self, x):
        x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
        if self.layers[0].kind == "dense":
            return x.reshape(len(x), -1)
        if x.ndim == 2:
            x = x.reshape((len(x),) + self.input_shape)
        return x

    def forward(self, x, mode=POSTERIOR_MEAN, rng=None):
        h = T.Tensor(self._prepare(x))
        last = len(self.layers) - 1
        for i, (layer, pool) in enumerate(zip(self.layers, self.pools)):
            if layer.kind == "dense" and h.ndim != 2:
                h = T.reshape(h, (h.shape[0], -1))
            h = layer(h, mode, rng)
            if i < last:
                h = T.relu(h)
            if pool:
                h = T.max_pool2(h)
        return h

    __call__ = forward

    def predict(self, x, batch_size=1000):
        out = []
        for s in range(0, len(x), batch_size):
            out.append(self.forward(x[s:s + batch_size], POSTERIOR_MEAN).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, int)

    def layer_input_shapes(self):
        """Per-sample input shape of each layer."""
        shapes, h = [], np.zeros((1,) + self.input_shape)
        for i, (layer, pool) in enumerate(zip(self.layers, self.pools)):
            if layer.kind == "dense":
                h = h.reshape(1, -1)
            shapes.append(h.shape[1:])
            w = np.zeros(layer.w_mu.shape)
            h = (h @ w) if layer.kind == "dense" else T.conv2d(h, w, layer.stride).data
            if pool:
                h = h[:, :, ::2, ::2]
        return shapes

    def kl(self):
        """Sum of layer KL bounds and the per-layer responsibilities."""
        e_log_pi = P.dirichlet_elogpi_t(self.mixture.alpha_t())
        total, resp = None, []
        for layer in self.layers:
            kl, r = layer.kl(self.mixture, e_log_pi)
            total = kl if total is None else total + kl
            resp.append(r)
        return total, resp

    def weight_counts(self):
        return [int(layer.w_mu.data.size) for layer in self.layers]

    def kept_counts(self):
        return [int(layer.weight_mask.sum()) for layer in self.layers]

    def unit_counts(self):
        """Live input groups per layer, i.e. the pruned-architecture string entries."""
        return [int(layer.group_mask().sum()) for layer in self.layers]

    def architecture_string(self):
        return "-".join(str(c) for c in self.unit_counts())

    # --- checkpoints -----------------------------------------------------

    def save(self, path):
        arrays = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.state().items():
                arrays[f"layer{i}.{k}"] = v
        arrays["mixture.alpha_raw"] = self.mixture.alpha_raw.data
        arrays["mixture.log_scales"] = self.mixture.log_scales.data
        meta = {"arch": self.arch, "classes": self.num_classes, "kinds": self.mixture.kinds,
                "learn_scales": self.mixture.learn_scales, "learn_alpha": self.mixture.learn_alpha}
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        try:
            z = np.load(path, allow_pickle=False)
            meta = json.loads(bytes(z["meta"]).decode())
        except (OSError, ValueError, KeyError) as err:
            raise FormatError(f"unreadable checkpoint {path}: {err}", offset=0) from err
        comps = [P.PriorComponent(k) for k in meta["kinds"]]
        mix = P.PriorMixtureSpec(comps, learn_scales=meta["learn_scales"], learn_alpha=meta["learn_alpha"])
        net = build_network(meta["arch"], classes=meta["classes"], mixture=mix)
        for i, layer in enumerate(net.layers):
            layer.load_state({k.split(".", 1)[1]: z[k] for k in z.files if k.startswith(f"layer{i}.")})
        mix.alpha_raw.data = np.array(z["mixture.alpha_raw"], dtype=np.float64)
        mix.log_scales.data = np.array(z["mixture.log_scales"], dtype=np.float64)
        return net


def default_mixture(scale=P.DEFAULT_SCALE, kinds=P.KINDS, learn_scales=True, learn_alpha=True):
    comps = [P.PriorComponent(k, scale) for k in kinds]
    return P.PriorMixtureSpec(comps, learn_scales=learn_scales, learn_alpha=learn_alpha)


def build_network(arch, classes=None, seed=0, mixture=None, warm_start=None, block_size=16, block_stride=8,
                  scale_init=0.0):
    """Fresh network; ``warm_start`` is a list of (weights, bias) per layer or None."""
    spec = architecture(arch, classes)
    if mixture is None:
        mixture = default_mixture()
    if warm_start is not None and len(warm_start) != len(spec["layers"]):
        raise DimensionError(f"warm start has {len(warm_start)} layers, {arch} has {len(spec['layers'])}")
    seeds = np.random.SeedSequence(seed).spawn(len(spec["layers"]))
    layers, pools = [], []
    for i, (kind, shape, pool) in enumerate(spec["layers"]):
        w, b = warm_start[i] if warm_start is not None else (None, None)
        layer = init_layer(shape, warm_start=w, warm_bias=b, seed=seeds[i], name=f"{arch}.{i}",
                           block_size=block_size, block_stride=block_stride, scale_init=scale_init)
        expected = BayesDense if kind == "dense" else BayesConv
        assert isinstance(layer, expected)
        layers.append(layer)
        pools.append(pool)
    return Network(arch, layers, mixture, pools, spec["input"])


def dense_weights(net):
    """Posterior-mean (weights, bias) per layer with masks applied."""
    return [(layer.posterior_mean_weight(), layer.posterior_mean_bias()) for layer in net.layers]
