"""Objective assembly and the training loop."""
import copy
import csv
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .blocks import cluster_penalty_t, skew_penalty_t
from .compress import PruneThresholds, prune
from .data import batches, epoch_seed
from .errors import DomainError, TrainingDiverged
from .layers import POSTERIOR_MEAN, STOCHASTIC
from .models import Network, build_network, default_mixture
from .optim import AdamState, adam_step, clip_global_norm, sgd_step
from .priors import DEFAULT_SCALE

HISTORY_FIELDS = ("epoch", "loss", "nll", "kl", "cluster", "skew", "test_error", "kept_fraction")


@dataclass
class TrainConfig:
    arch: str = "lenet300"
    epochs: int = 20
    batch_size: int = 128
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    kl_scale_N: int = None
    lambda_cluster: float = 1e-4
    lambda_skew: float = 1e-4
    seed: int = 0
    warm_start: str = None
    prune_epoch: int = None
    finetune: str = "mean"
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-3
    prior: bool = True
    prior_scale: float = DEFAULT_SCALE
    scale_init: float = 0.0
    clip_norm: float = 10.0
    logvar_lr: float = None
    group_tau: float = -math.inf
    weight_log_alpha_tau: float = 3.0
    classes: int = None
    kl_warmup_epochs: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if self.kl_scale_N is not None and self.kl_scale_N < 1:
            raise DomainError("kl_scale_N must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise DomainError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.finetune not in ("mean", "bayes", "none"):
            raise DomainError(f"finetune must be mean, bayes or none, got {self.finetune!r}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise DomainError("epoch counts must be >= 0")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def rates(self, params):
        """Per-parameter learning rates; log-variances may use ``logvar_lr``."""
        fast = self.logvar_lr or self.learning_rate
        return [fast if p.name and "logvar" in p.name else self.learning_rate for p in params]

    def thresholds(self):
        return PruneThresholds(self.group_tau, self.weight_log_alpha_tau)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_FIELDS)
            for r in self.records:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])

    def write_timing(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "seconds"))
            for r, s in zip(self.records, self.seconds):
                w.writerow((r["epoch"], f"{s:.3f}"))


@dataclass
class Objective:
    total: object
    nll: object
    kl: object
    cluster: object
    skew: object

    def values(self):
        return {k: float(getattr(self, k).item()) for k in ("total", "nll", "kl", "cluster", "skew")}


def _zero():
    return T.Tensor(0.0)


def block_penalties(net):
    """Cluster and skew penalties summed over layers with a block layout."""
    cluster, skew = _zero(), _zero()
    for layer in net.layers:
        if layer.block_layout is None:
            continue
        mean, _ = layer.effective_moments()
        flat = T.reshape(mean, (-1,))
        cluster = cluster + cluster_penalty_t(flat, layer.block_layout)
        skew = skew + skew_penalty_t(flat, layer.block_layout)
    return cluster, skew


def objective(net, batch, config, rng=None, kl_weight=1.0, mode=None):
    """total = mean NLL + kl_weight * KL / N + lambda_c * cluster + lambda_s * skew."""
    x, y = batch
    if len(y) == 0:
        raise DomainError("empty batch")
    if not config.prior:
        logits = net(x, POSTERIOR_MEAN)
        nll = T.softmax_xent(logits, y)
        return Objective(nll, nll, _zero(), _zero(), _zero())
    logits = net(x, mode or STOCHASTIC, rng)
    nll = T.softmax_xent(logits, y)
    kl, _ = net.kl()
    n = config.kl_scale_N
    kl_term = kl * (kl_weight / n)
    total = nll + kl_term
    cluster = skew = _zero()
    if config.lambda_cluster or config.lambda_skew:
        cluster, skew = block_penalties(net)
        total = total + config.lambda_cluster * cluster + config.lambda_skew * skew
    return Objective(total, nll, kl, cluster, skew)


def evaluate(net, dataset, batch_size=2000):
    """Posterior-mean test error in percent."""
    pred = net.predict(dataset.images, batch_size)
    return 100.0 * float(np.mean(pred != dataset.labels))


def _snapshot(net):
    return [copy.deepcopy(layer.state()) for layer in net.layers], \
        (net.mixture.alpha_raw.data.copy(), net.mixture.log_scales.data.copy())


def _restore(net, snap):
    states, (a, s) = snap
    for layer, st in zip(net.layers, states):
        layer.load_state(st)
    net.mixture.alpha_raw.data = a
    net.mixture.log_scales.data = s


def _run_epoch(net, config, dataset, params, state, seed, step_cfg, kl_weight, lr):
    sums = {"total": 0.0, "nll": 0.0, "kl": 0.0, "cluster": 0.0, "skew": 0.0}
    n_seen = 0
    rng = np.random.default_rng(seed + 1)
    for xb, yb in batches(dataset, config.batch_size, seed):
        g = T.Graph()
        with g:
            obj = objective(net, (xb, yb), step_cfg, rng, kl_weight)
        vals = obj.values()
        if not all(math.isfinite(v) for v in vals.values()):
            raise TrainingDiverged(f"non-finite objective {vals}")
        grads = T.gradients(obj.total, g)
        gl = [grads[p] if p in grads else np.zeros_like(p.data) for p in params]
        gl, _ = clip_global_norm(gl, config.clip_norm)
        if config.optimizer == "adam":
            adam_step(params, gl, state, lr)
        else:
            sgd_step(params, gl, state, lr)
        for k, v in vals.items():
            sums[k] += v * len(yb)
        n_seen += len(yb)
    return {k: v / max(n_seen, 1) for k, v in sums.items()}


def _deterministic_cfg(config):
    cfg = copy.copy(config)
    cfg.prior = False
    return cfg


def train(config, dataset, test=None, net=None, log=None, checkpoint_path=None, on_prune=None):
    """Train a network; returns (net, TrainHistory).

    Phases: optional deterministic pretraining (``pretrain_epochs``), then
    ``epochs`` of variational training. When ``prune_epoch`` is set the
    network is pruned after that epoch and the remaining epochs fine-tune
    the survivors (``finetune='mean'`` trains posterior means only).
    """
    if config.kl_scale_N is None:
        config = copy.copy(config)
        config.kl_scale_N = len(dataset)
    if net is None:
        classes = config.classes or dataset.num_classes
        mixture = default_mixture(config.prior_scale)
        warm = None
        if config.warm_start:
            src = Network.load(config.warm_start)
            warm = [(layer.posterior_mean_weight(), layer.posterior_mean_bias()) for layer in src.layers]
        net = build_network(config.arch, classes=classes, seed=config.seed, mixture=mixture, warm_start=warm,
                            scale_init=config.scale_init)
        if not config.prior:
            for layer in net.layers:
                layer.scale_logvar.data[:] = -np.inf
    history = TrainHistory()
    total_weights = sum(net.weight_counts())
    say = log or (lambda msg: None)

    def record(epoch, stats):
        err = evaluate(net, test) if test is not None and (epoch % config.eval_every == 0) else float("nan")
        history.records.append({"epoch": epoch, "loss": stats["total"], "nll": stats["nll"], "kl": stats["kl"],
                                "cluster": stats["cluster"], "skew": stats["skew"], "test_error": err,
                                "kept_fraction": sum(net.kept_counts()) / total_weights})
        say(f"epoch {epoch}: loss {stats['total']:.4f} nll {stats['nll']:.4f} kl {stats['kl']:.1f} "
            f"test error {err:.2f}%")

    epoch = 0
    det = _deterministic_cfg(config)
    if config.pretrain_epochs:
        params, state = net.mean_parameters(), AdamState()
        for _ in range(config.pretrain_epochs):
            t0 = time.perf_counter()
            stats = _run_epoch(net, config, dataset, params, state, epoch_seed(config.seed, epoch), det, 1.0,
                               config.pretrain_lr)
            epoch += 1
            history.seconds.append(time.perf_counter() - t0)
            record(epoch, stats)
        history.events.append(("pretrained", epoch))

    step_cfg = config if config.prior else det
    params = net.parameters() if config.prior else net.mean_parameters()
    state = AdamState()
    pruned = False
    for i in range(config.epochs):
        snap = _snapshot(net)
        t0 = time.perf_counter()
        warm = min(1.0, (i + 1) / config.kl_warmup_epochs) if config.kl_warmup_epochs else 1.0
        try:
            stats = _run_epoch(net, config, dataset, params, state, epoch_seed(config.seed, epoch), step_cfg, warm,
                               config.rates(params))
        except TrainingDiverged as err:
            _restore(net, snap)
            if checkpoint_path is not None:
                net.save(checkpoint_path)
            raise TrainingDiverged(f"epoch {epoch + 1}: {err}", checkpoint=checkpoint_path or snap) from err
        epoch += 1
        history.seconds.append(time.perf_counter() - t0)
        if config.prune_epoch is not None and not pruned and i + 1 == config.prune_epoch:
            if on_prune is not None:
                on_prune(net)
            prune(net, config.thresholds(), inplace=True)
            pruned = True
            history.events.append(("pruned", epoch, net.architecture_string()))
            say(f"pruned after epoch {epoch}: architecture {net.architecture_string()}, "
                f"kept {sum(net.kept_counts())}/{total_weights}")
            if config.finetune == "none":
                record(epoch, stats)
                break
            if config.finetune == "mean":
                step_cfg, params = det, net.mean_parameters()
            state = AdamState()
        record(epoch, stats)
    return net, history
