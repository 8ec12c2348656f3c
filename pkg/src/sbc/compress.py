"""Pruning, bit-width assignment, compression accounting, the SBCM file
format and sparse inference."""
import copy
import io
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from scipy import sparse

from . import tensor as T
from .errors import EmptyLayerError, FormatError
from .models import architecture

MAGIC = b"SBCM"
VERSION = 1


@dataclass
class PruneThresholds:
    group_tau: float = -math.inf
    weight_log_alpha_tau: float = 3.0
    group_reduce: str = "min"


IDENTITY = PruneThresholds(-math.inf, math.inf)


# ---------------------------------------------------------------- unit wiring


def _unit_groups(net, l):
    """For each output unit of layer l, the slice of layer l+1 groups it feeds."""
    nxt = net.layers[l + 1]
    n_out = net.layers[l].n_out
    per = nxt.n_groups // n_out
    return [slice(j * per, (j + 1) * per) for j in range(n_out)]


def _column(layer, j):
    return (slice(None), j) if layer.kind == "dense" else (j,)


def _group_index(layer, g):
    return (g,) if layer.kind == "dense" else (slice(None), g)


def _fold_constant(net, l, j, groups):
    """Move the constant output relu(b_j) of an input-less unit into the next bias."""
    layer, nxt = net.layers[l], net.layers[l + 1]
    c = max(float(layer.bias_mu.data[j]), 0.0) if layer.out_mask[j] else 0.0
    if c == 0.0:
        return
    w = nxt.posterior_mean_weight()
    if nxt.kind == "dense":
        nxt.bias_mu.data += c * w[groups].sum(axis=0)
    else:
        nxt.bias_mu.data += c * w[:, groups].sum(axis=(1, 2, 3))


def _settle_units(net):
    """Propagate unit removals across layer boundaries until nothing changes."""
    changed = True
    while changed:
        changed = False
        for l in range(len(net.layers) - 1):
            layer, nxt = net.layers[l], net.layers[l + 1]
            for j, groups in enumerate(_unit_groups(net, l)):
                if not layer.out_mask[j]:
                    continue
                col = _column(layer, j)
                fed = layer.weight_mask[col].any()
                used = nxt.weight_mask[_group_index(nxt, groups)].any()
                if not used:
                    layer.weight_mask[col] = False
                    layer.out_mask[j] = False
                    changed = True
                elif not fed:
                    _fold_constant(net, l, j, groups)
                    nxt.weight_mask[_group_index(nxt, groups)] = False
                    layer.out_mask[j] = False
                    changed = True


@dataclass
class PruneResult:
    model: object
    masks: list
    architecture: list


def prune(net, thresholds=PruneThresholds(), inplace=False):
    """Apply the weight and group criteria, then make unit removal consistent.

    A weight is dropped when its effective ln(sigma^2 / mu^2) exceeds
    ``weight_log_alpha_tau``. Group scores are taken over the weights that
    survive that test; groups scoring below ``group_tau`` are dropped whole.
    """
    if not inplace:
        net = copy.deepcopy(net)
    for layer in net.layers:
        la = layer.effective_log_alpha()
        keep = layer.weight_mask & ~(la > thresholds.weight_log_alpha_tau)
        saved = layer.weight_mask
        layer.weight_mask = keep
        scores = layer.group_scores(thresholds.group_reduce)
        layer.weight_mask = saved
        dead = scores < thresholds.group_tau
        keep[_group_index(layer, np.flatnonzero(dead))] = False
        layer.weight_mask = keep
    _settle_units(net)
    survivors = [(i, int(l.weight_mask.sum()), int(l.group_mask().sum())) for i, l in enumerate(net.layers)]
    if any(k == 0 for _, k, _ in survivors):
        table = "\n".join(f"  layer {i}: {k} weights, {u} units" for i, k, u in survivors)
        raise EmptyLayerError(f"pruning would empty a layer:\n{table}", survivors)
    return PruneResult(net, [l.weight_mask.copy() for l in net.layers], net.unit_counts())


# ---------------------------------------------------------------- bits


def _matrix(layer, a):
    """Layer array as [rows x width]: rows are fan-in positions, columns are outputs."""
    if layer.kind == "dense":
        return a
    co = a.shape[0]
    return a.reshape(co, -1).T


def layer_survivors(layer):
    mean, var = layer.effective_moments(masked=False)
    m = layer.weight_mask
    return mean.data[m], np.sqrt(var.data[m])


def bits_for(values, stds):
    """clamp(ceil(log2(range / min sigma)) + 1, 1, 32)."""
    if values.size == 0:
        return 1
    rng = float(values.max() - values.min())
    smin = float(stds.min())
    if rng <= 0:
        return 1
    if smin <= 0:
        return 32
    return int(min(32, max(1, math.ceil(math.log2(rng / smin)) + 1)))


def assign_bits(net):
    bits = [bits_for(*layer_survivors(layer)) for layer in net.layers]
    kept = net.kept_counts()
    avg = float(np.dot(bits, kept) / max(sum(kept), 1))
    return bits, avg


def quant_params(values, b):
    """f32 (scale, offset) whose grid of 2^b levels covers every value."""
    lo = float(values.min()) if values.size else 0.0
    hi = float(values.max()) if values.size else 0.0
    levels = 2 ** b - 1
    offset = np.float32(lo)
    if offset > lo:
        offset = np.nextafter(offset, np.float32(-np.inf))
    if hi <= lo:
        return 1.0, float(offset), levels
    scale = np.float32((hi - float(offset)) / levels)
    while float(offset) + levels * float(scale) < hi:
        scale = np.nextafter(scale, np.float32(np.inf))
    return float(scale), float(offset), levels


def quantize(values, b):
    scale, offset, levels = quant_params(values, b)
    q = np.clip(np.rint((values - offset) / scale), 0, levels).astype(np.uint64)
    return q, scale, offset


def dequantize(q, scale, offset):
    return offset + q.astype(np.float64) * scale


# ---------------------------------------------------------------- compressed model


@dataclass
class CompressedLayer:
    kind: str
    shape: tuple
    bits: int
    scale: float
    offset: float
    indptr: np.ndarray
    indices: np.ndarray
    codes: np.ndarray
    out_mask: np.ndarray
    bias: np.ndarray
    _csr: object = field(default=None, repr=False)
    _csr_t: object = field(default=None, repr=False)

    @property
    def rows(self):
        return len(self.indptr) - 1

    @property
    def width(self):
        return self.shape[1] if self.kind == "dense" else self.shape[0]

    @property
    def kept(self):
        return len(self.indices)

    def values(self):
        return dequantize(self.codes, self.scale, self.offset)

    def csr(self):
        if self._csr is None:
            self._csr = sparse.csr_matrix((self.values(), self.indices, self.indptr), shape=(self.rows, self.width))
        return self._csr

    def csr_t(self):
        """Transposed storage [width x rows] in CSR, for feature-major products."""
        if self._csr_t is None:
            self._csr_t = self.csr().T.tocsr()
        return self._csr_t

    def dense_matrix(self):
        return self.csr().toarray()

    def kernel(self):
        """Dequantized weights in the layer's native shape."""
        m = self.dense_matrix()
        if self.kind == "dense":
            return m
        return m.T.reshape(self.shape)


@dataclass
class CompressedModel:
    arch: str
    classes: int
    layers: list
    pools: list
    input_shape: tuple
    _plan: object = field(default=None, repr=False, compare=False)

    def plan(self):
        """Execution plan over live channels, built once (see :func:`build_plan`)."""
        if self._plan is None:
            self._plan = build_plan(self)
        return self._plan


def compress(net, bits=None):
    """Quantize the surviving effective means of ``net`` into row storage."""
    if bits is None:
        bits = assign_bits(net)[0]
    out = []
    for layer, b in zip(net.layers, bits):
        mean, _ = layer.effective_moments(masked=False)
        m = _matrix(layer, layer.weight_mask)
        vals = _matrix(layer, mean.data)[m]
        q, scale, offset = quantize(vals, b)
        rows, cols = np.nonzero(m)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=m.shape[0]))]).astype(np.int64)
        bias = np.where(layer.out_mask, layer.bias_mu.data, 0.0).astype(np.float32).astype(np.float64)
        out.append(CompressedLayer(layer.kind, tuple(layer.w_mu.shape), int(b), scale, offset, indptr,
                                   cols.astype(np.int64), q, layer.out_mask.copy(), bias))
    return CompressedModel(net.arch, net.num_classes, out, list(net.pools), net.input_shape)


# ---------------------------------------------------------------- bit packing


def _nbits(n):
    return int(math.ceil(math.log2(n))) if n > 1 else 0


def _pack(fields):
    """Concatenate (values, width) fields MSB-first into bits (uint8 0/1 array)."""
    parts = []
    for vals, width in fields:
        vals = np.asarray(vals, dtype=np.uint64)
        if width == 0 or vals.size == 0:
            continue
        shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
        parts.append(((vals[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0, np.uint8)


class _BitReader:
    def __init__(self, bits, base):
        self.bits = bits
        self.pos = 0
        self.base = base

    def take(self, count, width):
        if width == 0 or count == 0:
            return np.zeros(count, dtype=np.uint64)
        end = self.pos + count * width
        if end > len(self.bits):
            raise FormatError("bit stream ends early", offset=self.base + len(self.bits) // 8)
        chunk = self.bits[self.pos:end].reshape(count, width).astype(np.uint64)
        self.pos = end
        weights = np.uint64(1) << np.arange(width - 1, -1, -1, dtype=np.uint64)
        return (chunk * weights).sum(axis=1, dtype=np.uint64)


def _layer_bits(cl):
    width = cl.width
    counts = np.diff(cl.indptr)
    row_map = counts > 0
    return _pack([
        (row_map, 1),
        (cl.out_mask, 1),
        (counts[row_map], _nbits(width + 1)),
        (cl.indices, _nbits(width)),
        (cl.codes, cl.bits),
    ])


def export_compressed(cm, path=None):
    """Serialize to SBCM bytes (and write them to ``path`` if given).

    Layout (little-endian): "SBCM", u16 version, u16 layer count, u8 name
    length, name, u16 classes; per layer: u32 width, u32 rows, u32 kept,
    u8 bits, f32 scale, f32 offset, u32 payload bytes, then a bit stream
    (row bitmap, output bitmap, per-row counts for non-empty rows at
    ceil(log2(width+1)) bits, column indices at ceil(log2(width)) bits,
    b-bit codes) padded to a byte, then f32 biases of live outputs.
    A CRC32 of everything before it closes the file.
    """
    buf = io.BytesIO()
    name = cm.arch.encode()
    buf.write(MAGIC + struct.pack("<HHB", VERSION, len(cm.layers), len(name)) + name)
    buf.write(struct.pack("<H", cm.classes))
    for cl in cm.layers:
        payload = np.packbits(_layer_bits(cl)).tobytes()
        payload += cl.bias[cl.out_mask].astype("<f4").tobytes()
        buf.write(struct.pack("<IIIBffI", cl.width, cl.rows, cl.kept, cl.bits, cl.scale, cl.offset, len(payload)))
        buf.write(payload)
    body = buf.getvalue()
    data = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def _need(data, pos, n, what):
    if pos + n > len(data):
        raise FormatError(f"truncated while reading {what}", offset=len(data))


def import_compressed(src):
    data = src if isinstance(src, (bytes, bytearray)) else open(src, "rb").read()
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic, not an SBCM file", offset=0)
    if len(data) < 13:
        raise FormatError("truncated header", offset=len(data))
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("checksum mismatch (file corrupt or truncated)", offset=len(data) - 4)
    version, n_layers, name_len = struct.unpack_from("<HHB", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    pos = 9
    _need(body, pos, name_len + 2, "architecture name")
    arch = body[pos:pos + name_len].decode()
    pos += name_len
    (classes,) = struct.unpack_from("<H", body, pos)
    pos += 2
    try:
        spec = architecture(arch, classes)
    except ValueError as err:
        raise FormatError(str(err), offset=9) from err
    if len(spec["layers"]) != n_layers:
        raise FormatError(f"{arch} has {len(spec['layers'])} layers, file has {n_layers}", offset=6)
    layers = []
    for kind, shape, _ in spec["layers"]:
        _need(body, pos, 25, "layer header")
        width, rows, kept, b, scale, offset, nbytes = struct.unpack_from("<IIIBffI", body, pos)
        pos += 25
        _need(body, pos, nbytes, "layer payload")
        bits = np.unpackbits(np.frombuffer(body, np.uint8, nbytes, pos))
        reader = _BitReader(bits, pos)
        row_map = reader.take(rows, 1).astype(bool)
        out_mask = reader.take(width, 1).astype(bool)
        counts = np.zeros(rows, dtype=np.int64)
        counts[row_map] = reader.take(int(row_map.sum()), _nbits(width + 1))
        indices = reader.take(kept, _nbits(width)).astype(np.int64)
        codes = reader.take(kept, b)
        bias_at = pos + (reader.pos + 7) // 8
        n_live = int(out_mask.sum())
        if bias_at + 4 * n_live != pos + nbytes or counts.sum() != kept:
            raise FormatError("layer payload size does not match its header", offset=pos)
        bias = np.zeros(width)
        bias[out_mask] = np.frombuffer(body, "<f4", n_live, bias_at).astype(np.float64)
        pos += nbytes
        indptr = np.concatenate([[0], np.cumsum(counts)])
        layers.append(CompressedLayer(kind, tuple(shape), b, scale, offset, indptr, indices, codes, out_mask, bias))
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} unexpected bytes before checksum", offset=pos)
    return CompressedModel(arch, classes, layers, [p for _, _, p in spec["layers"]], spec["input"])


# ---------------------------------------------------------------- accounting


@dataclass
class CompressionReport:
    arch: str
    architecture: list
    architecture_string: str
    total_weights: int
    kept_weights: int
    wr: float
    cr: float
    cr_values_only: float
    bits: list
    avg_bits: float
    index_bits: list
    kept_per_layer: list = field(default_factory=list)
    file_bits: int = 0
    error_before: float = float("nan")
    error_pruned: float = float("nan")
    error_quantized: float = float("nan")

    def as_dict(self):
        return asdict(self)


def compression_metrics(net_or_counts, cm, index_overhead=True, file_bytes=None):
    """WR and CR recomputed from raw counts.

    ``net_or_counts`` gives the dense weight count per layer (a Network or a list).
    """
    totals = net_or_counts if isinstance(net_or_counts, (list, tuple)) else net_or_counts.weight_counts()
    total = int(sum(totals))
    kept = [cl.kept for cl in cm.layers]
    bits = [cl.bits for cl in cm.layers]
    idx = [_nbits(cl.width) for cl in cm.layers]
    denom_vals = sum(k * b for k, b in zip(kept, bits))
    denom = denom_vals + (sum(k * i for k, i in zip(kept, idx)) if index_overhead else 0)
    units = [int((np.diff(cl.indptr) > 0).reshape(-1, *_row_block(cl)).any(axis=1).sum()) for cl in cm.layers]
    return CompressionReport(
        arch=cm.arch, architecture=units, architecture_string="-".join(map(str, units)),
        total_weights=total, kept_weights=int(sum(kept)), wr=100.0 * sum(kept) / total,
        cr=total * 32 / denom if denom else math.inf,
        cr_values_only=total * 32 / denom_vals if denom_vals else math.inf,
        bits=bits, avg_bits=float(np.dot(bits, kept) / max(sum(kept), 1)), index_bits=idx, kept_per_layer=kept,
        file_bits=8 * int(file_bytes) if file_bytes is not None else 0)


def _row_block(cl):
    """Rows per input group (1 for dense, kh*kw for conv)."""
    return (1,) if cl.kind == "dense" else (cl.shape[2] * cl.shape[3],)


def cr_denominator(cm, index_overhead=True):
    return sum(cl.kept * (cl.bits + (_nbits(cl.width) if index_overhead else 0)) for cl in cm.layers)


# ---------------------------------------------------------------- inference


def _im2col(x, kh, kw):
    return T._im2col(x, kh, kw, 1)


def _pool(h):
    """2x2 max pool over the last two axes (even sizes)."""
    return np.maximum(np.maximum(h[..., 0::2, 0::2], h[..., 0::2, 1::2]),
                      np.maximum(h[..., 1::2, 0::2], h[..., 1::2, 1::2]))


@numba.njit(fastmath=True, cache=True)
def _csr_rows(indptr, indices, data, x, bias, out):
    n = x.shape[1]
    for o in range(len(indptr) - 1):
        row = out[o]
        for t in range(n):
            row[t] = bias[o]
        for k in range(indptr[o], indptr[o + 1]):
            v = data[k]
            xr = x[indices[k]]
            for t in range(n):
                row[t] += v * xr[t]
    return out


def csr_apply(m, x, bias):
    """``m @ x + bias[:, None]`` for a CSR ``m``, walking only stored entries."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty((m.shape[0], x.shape[1]))
    return _csr_rows(m.indptr, m.indices, m.data, x, np.ascontiguousarray(bias, dtype=np.float64), out)


def sparse_layer(cl, h):
    """One layer over the sparse storage, feature-major.

    ``h`` is [features x batch] for dense layers and [c x batch x h x w] for
    conv layers; the output uses the same layout. Empty rows cost nothing.
    """
    st = cl.csr_t()
    if cl.kind == "dense":
        return csr_apply(st, h, cl.bias)
    c, n, hh, ww = h.shape
    kh, kw = cl.shape[2], cl.shape[3]
    ho, wo = hh - kh + 1, ww - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(h, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return csr_apply(st, cols, cl.bias).reshape(-1, n, ho, wo)


def dense_layer(kind, w, b, h):
    if kind == "dense":
        out = h @ w
        out += b
        return out
    out, _ = T._conv_data(h, w, 1)
    return out + b[None, :, None, None]


def _run(layers_fn, pools, x, first_kind, input_shape):
    h = np.asarray(x, dtype=np.float64)
    h = h.reshape(len(h), -1) if first_kind == "dense" else h.reshape((len(h),) + tuple(input_shape))
    last = len(pools) - 1
    for i, (fn, pool) in enumerate(zip(layers_fn, pools)):
        if fn[0] == "dense" and h.ndim != 2:
            h = h.reshape(len(h), -1)
        h = fn[1](h)
        if i < last:
            h = np.maximum(h, 0.0)
        if pool:
            h = _pool(h)
    return h


@dataclass
class PlanStep:
    kind: str
    keep_in: np.ndarray   # input channels (conv) or features (dense) read by this step
    keep_out: np.ndarray  # output channels this step produces
    op: object            # CSR [len(keep_out) x inputs], or a dense ndarray for the baseline
    bias: np.ndarray
    ksize: tuple


def _channel_rows(cl, chans):
    if cl.kind == "dense":
        return chans
    per = cl.shape[2] * cl.shape[3]
    return (chans[:, None] * per + np.arange(per)).ravel()


def _live_inputs(cl):
    rows = np.flatnonzero(np.diff(cl.indptr))
    if cl.kind == "dense":
        return rows
    return np.unique(rows // (cl.shape[2] * cl.shape[3]))


def build_plan(cm, compact=True):
    """Per-layer operators restricted to the channels that matter.

    An output channel is computed only when the next layer reads it, and an
    input channel only when some stored weight touches it; everything dropped
    would multiply a zero, so the result equals the full sparse product.
    ``compact=False`` gives the dense baseline: every channel, dense blocks.
    """
    layers = cm.layers
    if not compact:
        return [PlanStep(cl.kind, np.arange(cl.rows if cl.kind == "dense" else cl.shape[1]), np.arange(cl.width),
                         cl.csr_t().toarray(), cl.bias, tuple(cl.shape[2:])) for cl in layers]
    needed = [_live_inputs(cl) for cl in layers]
    steps = []
    for i, cl in enumerate(layers):
        if i + 1 == len(layers):
            keep_out = np.arange(cl.width)
        else:
            nxt = layers[i + 1]
            keep_out = needed[i + 1]
            if nxt.kind == "dense" and cl.kind != "dense":
                keep_out = np.unique(keep_out // (nxt.rows // cl.width))
        keep_in = needed[i]
        cols = _channel_rows(cl, keep_in)
        sub = cl.csr_t()[keep_out][:, cols]
        ksize = cl.shape[2:] if cl.kind != "dense" else ()
        steps.append(PlanStep(cl.kind, keep_in, keep_out, sub.tocsr(), cl.bias[keep_out], ksize))
    return steps


def sparse_forward(cm, x):
    """Forward pass over the compressed storage; activations stay feature-major.

    Only live channels are carried between layers and each layer walks the
    stored entries of its CSR rows; no dense weight matrix is built.
    """
    return run_plan(cm.plan(), cm.pools, cm.input_shape, x)


def _apply(st, x):
    if sparse.issparse(st.op):
        return csr_apply(st.op, x, st.bias)
    out = st.op @ x
    out += st.bias[:, None]
    return out


def run_plan(steps, pools, input_shape, x):
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    first = steps[0]
    if first.kind == "dense":
        h = np.ascontiguousarray(x.reshape(n, -1).T[first.keep_in])
    else:
        h = np.ascontiguousarray(x.reshape((n,) + tuple(input_shape)).transpose(1, 0, 2, 3)[first.keep_in])
    last = len(steps) - 1
    for i, (st, pool) in enumerate(zip(steps, pools)):
        if st.kind == "dense":
            if h.ndim != 2:
                per = h.shape[2] * h.shape[3]
                # keep_in indexes the full [c*h*w] flattening; h holds only the kept channels
                chan = np.searchsorted(steps[i - 1].keep_out, st.keep_in // per)
                h = h.transpose(0, 2, 3, 1).reshape(-1, n)[chan * per + st.keep_in % per]
            out = _apply(st, h)
        else:
            c, _, hh, ww = h.shape
            kh, kw = st.ksize
            ho, wo = hh - kh + 1, ww - kw + 1
            win = np.lib.stride_tricks.sliding_window_view(h, (kh, kw), axis=(2, 3))
            cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(c * kh * kw, n * ho * wo)
            out = _apply(st, cols).reshape(-1, n, ho, wo)
        h = out
        if i < last:
            np.maximum(h, 0.0, out=h)
        if pool:
            h = _pool(h)
    return h.T if h.ndim == 2 else h.transpose(1, 0, 2, 3)


def dense_forward(weights, kinds, pools, x, input_shape):
    """Plain numpy forward over dense (weights, bias) pairs."""
    fns = [(k, lambda h, k=k, w=w, b=b: dense_layer(k, w, b, h)) for k, (w, b) in zip(kinds, weights)]
    return _run(fns, pools, x, kinds[0], input_shape)


def masked_dense_forward(net, x):
    from .models import dense_weights

    return dense_forward(dense_weights(net), [l.kind for l in net.layers], net.pools, x, net.input_shape)


def compressed_dense_forward(cm, x):
    weights = [(cl.kernel(), cl.bias) for cl in cm.layers]
    return dense_forward(weights, [cl.kind for cl in cm.layers], cm.pools, x, cm.input_shape)


def error_rate(logits, labels):
    return 100.0 * float(np.mean(np.asarray(logits).argmax(axis=1) != labels))


def _batched(fn, x, batch=2000):
    return np.concatenate([fn(x[s:s + batch]) for s in range(0, len(x), batch)])


def evaluate_compressed(cm, dataset):
    return error_rate(_batched(lambda b: sparse_forward(cm, b), dataset.images), dataset.labels)


def evaluate_masked(net, dataset):
    return error_rate(_batched(lambda b: masked_dense_forward(net, b), dataset.images), dataset.labels)


def race(dense_fn, sparse_fn, repeats=7, burst=3):
    """Best-of timings, alternating short bursts of each side.

    Bursts keep each side's working set warm (the first call of a burst is
    rarely the best); alternating them spreads load drift over both sides.
    """
    best = [math.inf, math.inf]
    for _ in range(max(1, repeats // burst)):
        for i, fn in enumerate((dense_fn, sparse_fn)):
            for _ in range(burst):
                t0 = time.perf_counter()
                fn()
                best[i] = min(best[i], time.perf_counter() - t0)
    return Timing(*best)


@dataclass
class Timing:
    dense_seconds: float
    sparse_seconds: float

    @property
    def speedup(self):
        return self.dense_seconds / self.sparse_seconds


def time_model(cm, x, repeats=7):
    """End-to-end dense-vs-sparse wall time on the same dequantized weights.

    Both sides use the same feature-major executor, so the ratio measures
    what the pruning saves and not the memory layout.
    """
    full = build_plan(cm, compact=False)
    cm.plan()
    return race(lambda: run_plan(full, cm.pools, cm.input_shape, x), lambda: sparse_forward(cm, x), repeats)


def time_layer(cl, h, repeats=7):
    """Dense-vs-sparse wall time of a single layer on batch-major inputs ``h``.

    The sparse side runs on the feature-major copy it uses inside
    :func:`sparse_forward`; the layout change is not timed.
    """
    w = cl.kernel()
    cl.csr()
    ht = np.ascontiguousarray(h.T) if cl.kind == "dense" else np.ascontiguousarray(h.transpose(1, 0, 2, 3))
    cl.csr_t()
    return race(lambda: dense_layer(cl.kind, w, cl.bias, h), lambda: sparse_layer(cl, ht), repeats)


# ---------------------------------------------------------------- sweep


def sweep_curve(net, fractions, dataset):
    """(target fraction, kept fraction, error%) with weights ranked by effective log-alpha.

    Fractions are visited largest first so the kept fraction never increases.
    """
    total = sum(net.weight_counts())
    la = np.concatenate([np.where(l.weight_mask, l.effective_log_alpha(), np.inf).reshape(-1) for l in net.layers])
    order = np.sort(la)
    saved = [l.weight_mask.copy() for l in net.layers]
    rows = []
    try:
        for f in sorted(fractions, reverse=True):
            k = int(round(f * total))
            k = min(k, int(np.isfinite(order).sum()))
            cut = order[k - 1] if k > 0 else -np.inf
            kept = 0
            for layer, base in zip(net.layers, saved):
                m = base & (layer.effective_log_alpha() <= cut) if k > 0 else np.zeros_like(base)
                layer.weight_mask = m
                kept += int(m.sum())
            err = evaluate_masked(net, dataset)
            rows.append((float(f), kept / total, err))
    finally:
        for layer, base in zip(net.layers, saved):
            layer.weight_mask = base
    return rows


# ---------------------------------------------------------------- physical pruning


@dataclass
class PrunedNetwork:
    """Dense weights with removed units physically sliced away."""

    kinds: list
    weights: list
    pools: list
    input_index: np.ndarray
    input_shape: tuple

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kinds[0] == "dense":
            h = x.reshape(len(x), -1)[:, self.input_index]
        else:
            h = x.reshape((len(x),) + tuple(self.input_shape))[:, self.input_index]
        return _run([(k, lambda h, k=k, w=w, b=b: dense_layer(k, w, b, h))
                     for k, (w, b) in zip(self.kinds, self.weights)], self.pools, h, self.kinds[0],
                    h.shape[1:])

    def architecture(self):
        return [len(self.input_index)] + [len(b) for _, b in self.weights[:-1]]


def physical_prune(net):
    """Slice removed units out of the posterior-mean weights of a masked network."""
    from .models import dense_weights

    weights = dense_weights(net)
    first = net.layers[0]
    keep_in = np.flatnonzero(first.group_mask())
    out = []
    for l, (layer, (w, b)) in enumerate(zip(net.layers, weights)):
        keep_out = np.flatnonzero(layer.out_mask)
        if l == 0:
            rows = keep_in
        if layer.kind == "dense":
            out.append((w[rows][:, keep_out], b[keep_out]))
        else:
            out.append((w[keep_out][:, rows], b[keep_out]))
        if l + 1 < len(net.layers):
            per = net.layers[l + 1].n_groups // layer.n_out
            rows = (keep_out[:, None] * per + np.arange(per)[None, :]).reshape(-1)
    return PrunedNetwork([l.kind for l in net.layers], out, list(net.pools), keep_in, net.input_shape)
