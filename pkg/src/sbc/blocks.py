"""Overlapping equal-size block layouts and the two block regularizers.

A layout covers a flattened weight vector of length ``n`` with blocks of
``block_size`` starting every ``stride`` entries; the last block is clipped at
``n``. The cluster penalty is a group lasso over block energies and the skew
penalty is the entropy of the normalized block-energy distribution.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError

DEFAULT_BLOCK_SIZE = 16
DEFAULT_STRIDE = 8


@dataclass(frozen=True)
class BlockLayout:
    n: int
    block_size: int
    stride: int
    offsets: tuple

    @property
    def num_blocks(self):
        return len(self.offsets)

    @property
    def blocks(self):
        return [range(o, min(o + self.block_size, self.n)) for o in self.offsets]

    def cover_counts(self):
        diff = np.zeros(self.n + 1)
        for o in self.offsets:
            diff[o] += 1
            diff[min(o + self.block_size, self.n)] -= 1
        return np.cumsum(diff[:-1])


def make_layout(n, block_size=DEFAULT_BLOCK_SIZE, stride=DEFAULT_STRIDE):
    if not (1 <= stride <= block_size <= n):
        raise DomainError(f"need 1 <= stride <= block_size <= n, got {stride}, {block_size}, {n}")
    k = max(0, math.ceil((n - block_size) / stride))
    return BlockLayout(n, block_size, stride, tuple(range(0, k * stride + 1, stride)))


def layout_for(n, block_size=DEFAULT_BLOCK_SIZE, stride=DEFAULT_STRIDE):
    """Layout with sizes shrunk to fit short vectors."""
    b = min(block_size, n)
    return make_layout(n, b, min(stride, b))


def _windows(x, layout):
    pad = layout.offsets[-1] + layout.block_size - layout.n
    xp = np.concatenate([x, np.zeros(pad)]) if pad > 0 else x
    win = np.lib.stride_tricks.sliding_window_view(xp, layout.block_size)
    return win[::layout.stride][:layout.num_blocks]


def _energy_data(w, layout):
    return _windows(w * w, layout).sum(axis=1)


def _spread(g, layout):
    """Per-index sum of block-level values g over the blocks covering each index."""
    diff = np.zeros(layout.n + 1)
    offs = np.asarray(layout.offsets)
    np.add.at(diff, offs, g)
    np.add.at(diff, np.minimum(offs + layout.block_size, layout.n), -g)
    return np.cumsum(diff[:-1])


def energies_t(w, layout):
    """Block energies of a flat Tensor ``w`` (differentiable)."""
    if w.shape != (layout.n,):
        raise ContractError(f"weight vector of length {w.shape} does not match layout n={layout.n}")

    def fwd(x):
        return _energy_data(x, layout)

    def bwd(g, out, x):
        return (2.0 * x * _spread(g, layout),)

    return T.fused(fwd, bwd, w)


@dataclass
class BlockEnergies:
    e: np.ndarray
    p: np.ndarray
    zero: bool = False


def block_energies(layout, w_mu):
    w_mu = np.asarray(w_mu, dtype=np.float64).reshape(-1)
    if w_mu.size != layout.n:
        raise ContractError(f"weight vector of length {w_mu.size} does not match layout n={layout.n}")
    e = _energy_data(w_mu, layout)
    total = e.sum()
    if total <= 0:
        return BlockEnergies(e, np.zeros_like(e), zero=True)
    return BlockEnergies(e, e / total)


def cluster_sparsity_penalty(layout, w_mu):
    """sum_b ||w_b||_2 over the (overlapping) blocks."""
    return float(np.sqrt(block_energies(layout, w_mu).e).sum())


def cluster_penalty_t(w, layout):
    return T.sqrt(energies_t(w, layout)).sum()


def _entropy(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(-np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)))


def skew_penalty(energies):
    """Entropy of the block-energy distribution; 0 when all energy is zero."""
    if energies.zero:
        return 0.0
    return _entropy(energies.p)


def skew_penalty_t(w, layout):
    e = energies_t(w, layout)

    def fwd(ev):
        tot = ev.sum()
        return np.asarray(_entropy(ev / tot) if tot > 0 else 0.0)

    def bwd(g, out, ev):
        tot = ev.sum()
        if tot <= 0:
            return (np.zeros_like(ev),)
        p = ev / tot
        with np.errstate(divide="ignore"):
            d = np.where(p > 0, -(np.log(np.where(p > 0, p, 1.0)) + out) / tot, 0.0)
        return (g * d,)

    return T.fused(fwd, bwd, e)


def energy_histogram(layout, w_mu, bins=20):
    """Histogram rows (bin_lo, bin_hi, count) of log10 block energies."""
    e = block_energies(layout, w_mu).e
    le = np.log10(np.maximum(e, 1e-300))
    counts, edges = np.histogram(le, bins=bins)
    return [(float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)]


def top_blocks(layout, w, k, suppress_overlaps=True):
    """Indices of the k highest-energy blocks, greedily skipping overlaps."""
    e = block_energies(layout, w).e
    chosen = []
    taken = np.zeros(layout.n, dtype=bool)
    for b in np.argsort(-e, kind="stable"):
        o = layout.offsets[b]
        span = slice(o, min(o + layout.block_size, layout.n))
        if suppress_overlaps and taken[span].any():
            continue
        chosen.append(int(b))
        taken[span] = True
        if len(chosen) == k:
            break
    return sorted(chosen)


# ---------------------------------------------------------------- recovery


@dataclass
class BlockRecovery:
    w: np.ndarray
    layout: BlockLayout
    blocks: list
    offsets: tuple
    losses: list


def fit_block_sparse(X, y, layout, lambda_cluster=0.05, lambda_skew=0.05, steps=2000, lr=0.01,
                     share=0.05, seed=0):
    """Least squares plus the cluster and skew penalties, fitted with Adam.

    Blocks are read off greedily (no overlaps) from the fitted energies;
    a block is kept while its share of the total energy is at least ``share``.
    """
    from .optim import AdamState, adam_step

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape != (len(y), layout.n):
        raise ContractError(f"design {X.shape} does not match {len(y)} samples and layout n={layout.n}")
    rng = np.random.default_rng(seed)
    w = T.Tensor(0.01 * rng.standard_normal(layout.n), requires_grad=True, name="w")
    xt, yt = T.Tensor(X), T.Tensor(y)
    state, losses = AdamState(), []
    for _ in range(steps):
        g = T.Graph()
        with g:
            r = T.reshape(T.matmul(xt, T.reshape(w, (-1, 1))), (-1,)) - yt
            loss = 0.5 * T.mean(T.square(r)) + lambda_cluster * cluster_penalty_t(w, layout) \
                + lambda_skew * skew_penalty_t(w, layout)
        grads = T.gradients(loss, g)
        adam_step([w], [grads[w]], state, lr)
        losses.append(loss.item())
    est = w.data.copy()
    en = block_energies(layout, est)
    chosen = [b for b in top_blocks(layout, est, layout.num_blocks) if en.p[b] >= share]
    return BlockRecovery(est, layout, chosen, tuple(layout.offsets[b] for b in chosen), losses)


def support_f1(found, truth):
    """F1 between two sets of block offsets."""
    found, truth = set(found), set(truth)
    if not found and not truth:
        return 1.0
    hit = len(found & truth)
    if hit == 0:
        return 0.0
    p, r = hit / len(found), hit / len(truth)
    return 2 * p * r / (p + r)
