"""Reference runs behind the acceptance checks.

Each run stores its checkpoints and a JSON summary under a cache directory
(``$SBC_CACHE_DIR``, default ``~/.cache/sbc``) keyed by name and config, so
repeated acceptance runs reuse finished training. Run one directly with

    python3 -m sbc.experiments lenet300-full --data /path/to/mnist
"""
import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import compress as C
from . import trainer as TR
from .blocks import fit_block_sparse, make_layout, support_f1
from .data import load_mnist, synth_blocksparse, synth_classification
from .models import Network

CACHE_ENV = "SBC_CACHE_DIR"
DATA_ENV = "SBC_DATA_DIR"

LENET300_FULL = TR.TrainConfig(arch="lenet300", pretrain_epochs=5, epochs=40, prune_epoch=35, logvar_lr=0.01,
                               kl_warmup_epochs=4, seed=0)
LENET300_CI = TR.TrainConfig(arch="lenet300", pretrain_epochs=10, epochs=10, prune_epoch=6, logvar_lr=0.05,
                             kl_warmup_epochs=3, seed=0)
SYNTHCONV = TR.TrainConfig(arch="synthconv", pretrain_epochs=2, epochs=16, prune_epoch=11, batch_size=64,
                           logvar_lr=0.05, kl_warmup_epochs=2, group_tau=1.5, weight_log_alpha_tau=2.0, seed=0)
LENET5 = TR.TrainConfig(arch="lenet5", pretrain_epochs=2, epochs=6, prune_epoch=4, logvar_lr=0.02,
                        kl_warmup_epochs=2, seed=0)
CI_TRAIN_SIZE = 10000
SYNTH_TRAIN, SYNTH_TEST = 2000, 1000
SWEEP_GRID = (1.0, 0.5, 0.2, 0.1, 0.05, 0.03, 0.02, 0.01, 0.005)


def cache_dir():
    root = Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "sbc")
    root.mkdir(parents=True, exist_ok=True)
    return root


def _key(name, payload):
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return f"{name}-{hashlib.sha256(blob).hexdigest()[:12]}"


def cached(name, payload, fn, refresh=False):
    """Return the JSON summary for ``name``; ``fn(run_dir)`` computes it when missing."""
    run = cache_dir() / _key(name, payload)
    summary = run / "summary.json"
    if summary.exists() and not refresh:
        return json.loads(summary.read_text())
    run.mkdir(parents=True, exist_ok=True)
    out = fn(run)
    out["run_dir"] = str(run)
    summary.write_text(json.dumps(out, indent=2, sort_keys=True, default=float))
    return out


def mnist(root=None):
    root = root or os.environ.get(DATA_ENV)
    if not root:
        raise FileNotFoundError(f"no MNIST directory: pass one or set ${DATA_ENV}")
    return load_mnist(root, "train"), load_mnist(root, "test")


def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


def train_and_compress(config, train, test, run, log=None):
    """Train with pruning, then compress; records the pre-prune state as well."""
    pre = {}

    def on_prune(net):
        net.save(run / "preprune.npz")
        pre["error"] = TR.evaluate(net, test)
        pre["kept"] = sum(net.kept_counts())
        pruned = C.prune(net, config.thresholds()).model
        pre["error_pruned"] = TR.evaluate(pruned, test)
        pre["kept_pruned"] = sum(pruned.kept_counts())

    t0 = time.perf_counter()
    net, hist = TR.train(config, train, test, log=log, on_prune=on_prune)
    seconds = time.perf_counter() - t0
    net.save(run / "final.npz")
    hist.write_csv(run / "history.csv")
    cm = C.compress(net)
    blob = C.export_compressed(cm, run / "model.sbcm")
    rep = C.compression_metrics(net, cm, file_bytes=len(blob))
    rep.error_before = pre.get("error", math.nan)
    rep.error_pruned = TR.evaluate(net, test)
    rep.error_quantized = C.evaluate_compressed(cm, test)
    total = sum(net.weight_counts())
    return {
        "config": asdict(config), "seconds": seconds, "epochs_run": len(hist),
        "error": rep.error_pruned, "error_compressed": rep.error_quantized,
        "error_preprune": pre.get("error"), "error_pruned_no_finetune": pre.get("error_pruned"),
        "kept_fraction_pruned": pre.get("kept_pruned", total) / total,
        "report": rep.as_dict(), "units": net.unit_counts(),
        "history": [{k: _finite(v) for k, v in r.items()} for r in hist.records],
    }


def lenet300_full(data=None, refresh=False, log=None):
    train, test = mnist(data)
    cfg = LENET300_FULL
    return cached("lenet300-full", asdict(cfg), lambda run: train_and_compress(cfg, train, test, run, log),
                  refresh)


def lenet300_ci(data=None, refresh=False, log=None):
    train, test = mnist(data)
    cfg = LENET300_CI
    return cached("lenet300-ci", {**asdict(cfg), "n": CI_TRAIN_SIZE},
                  lambda run: train_and_compress(cfg, train.subset(CI_TRAIN_SIZE), test, run, log), refresh)


def lenet5(data=None, refresh=False, log=None):
    train, test = mnist(data)
    cfg = LENET5
    return cached("lenet5", {**asdict(cfg), "n": CI_TRAIN_SIZE},
                  lambda run: train_and_compress(cfg, train.subset(CI_TRAIN_SIZE), test, run, log), refresh)


def sweep(summary, data=None, grid=SWEEP_GRID):
    """Kept-fraction sweep on the pre-prune checkpoint of a finished run."""
    _, test = mnist(data)
    net = Network.load(Path(summary["run_dir"]) / "preprune.npz")
    return [list(r) for r in C.sweep_curve(net, grid, test)]


def synthconv(refresh=False, log=None, repeats=15):
    cfg = SYNTHCONV

    def run_fn(run):
        train = synth_classification(SYNTH_TRAIN, seed=1)
        test = synth_classification(SYNTH_TEST, seed=2)
        out = train_and_compress(cfg, train, test, run, log)
        return out

    out = cached("synthconv", {**asdict(cfg), "n": SYNTH_TRAIN}, run_fn, refresh)
    out["timing"] = synthconv_timing(out, repeats)
    return out


def _largest_dense(cm):
    dense = [i for i, cl in enumerate(cm.layers) if cl.kind == "dense"]
    return max(dense, key=lambda i: cm.layers[i].rows * cm.layers[i].width)


def synthconv_timing(summary, repeats=15, batch=2000):
    """Timings are never cached: they depend on the machine and its load."""
    cm = C.import_compressed(Path(summary["run_dir"]) / "model.sbcm")
    i = _largest_dense(cm)
    cl = cm.layers[i]
    total = cl.shape[0] * cl.shape[1]
    h = np.random.default_rng(0).random((batch, cl.shape[0]))
    layer = C.time_layer(cl, h, repeats)
    x = synth_classification(500, seed=3).images
    model = C.time_model(cm, x, max(3, repeats // 3))
    return {"layer": i, "shape": list(cl.shape), "kept": cl.kept, "sparsity": 1 - cl.kept / total,
            "bits": cl.bits, "value_bits_dense": 32 * total, "value_bits_kept": cl.kept * cl.bits,
            "footprint_ratio": 32 * total / max(cl.kept * cl.bits, 1),
            "layer_dense_s": layer.dense_seconds, "layer_sparse_s": layer.sparse_seconds,
            "layer_speedup": layer.speedup, "model_dense_s": model.dense_seconds,
            "model_sparse_s": model.sparse_seconds, "model_speedup": model.speedup}


def block_recovery(seeds=range(5), n=256, block=16, k=3, snr_db=20.0, samples=128, steps=1500):
    rows = []
    for s in seeds:
        prob = synth_blocksparse(n, block, k, samples, seed=s, snr_db=snr_db)
        fit = fit_block_sparse(prob.X, prob.y, make_layout(n, block, block // 2), steps=steps)
        rows.append({"seed": int(s), "found": list(fit.offsets), "truth": list(prob.active_offsets),
                     "f1": support_f1(fit.offsets, prob.active_offsets)})
    return rows


RUNS = {"lenet300-full": lenet300_full, "lenet300-ci": lenet300_ci, "lenet5": lenet5}


def main(argv=None):
    p = argparse.ArgumentParser(prog="python3 -m sbc.experiments")
    p.add_argument("run", choices=sorted(RUNS) + ["synthconv", "blocks"])
    p.add_argument("--data", default=None)
    p.add_argument("--refresh", action="store_true")
    a = p.parse_args(argv)
    say = lambda m: print(m, file=sys.stderr, flush=True)  # noqa: E731
    if a.run == "synthconv":
        out = synthconv(a.refresh, say)
    elif a.run == "blocks":
        out = {"rows": block_recovery()}
    else:
        out = RUNS[a.run](a.data, a.refresh, say)
    out.pop("history", None)
    print(json.dumps(out, indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
