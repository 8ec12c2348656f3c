"""Static figures written next to the CSV outputs (Agg backend, no display)."""
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_history(records, path):
    """Loss (log scale) and test error per epoch."""
    epochs = [r["epoch"] for r in records]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.4))
    a.semilogy(epochs, [max(r["loss"], 1e-12) for r in records], label="total")
    a.semilogy(epochs, [max(r["nll"], 1e-12) for r in records], label="nll")
    a.set_xlabel("epoch")
    a.set_ylabel("objective")
    a.legend()
    pts = [(e, r["test_error"]) for e, r in zip(epochs, records) if not math.isnan(r["test_error"])]
    if pts:
        b.plot(*zip(*pts), marker="o")
    b.set_xlabel("epoch")
    b.set_ylabel("test error (%)")
    b2 = b.twinx()
    b2.plot(epochs, [100 * r["kept_fraction"] for r in records], color="gray", ls="--")
    b2.set_ylabel("kept weights (%)", color="gray")
    return _save(fig, path)


def plot_curve(rows, path):
    """Error against kept fraction for a pruning sweep."""
    rows = sorted(rows, key=lambda r: r[1])
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot([100 * r[1] for r in rows], [r[2] for r in rows], marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("kept weights (%)")
    ax.set_ylabel("test error (%)")
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def plot_priors(cols, path):
    """Log densities on the positive half of the profile grid."""
    w = cols["w"]
    pos = w > 0
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for kind, logp in cols.items():
        if kind == "w":
            continue
        ax.plot(w[pos], logp[pos], label=kind)
    ax.set_xscale("log")
    ax.set_xlabel("|w|")
    ax.set_ylabel("log density")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_report(report, path):
    """Kept weights and bit width per layer."""
    d = report if isinstance(report, dict) else report.as_dict()
    n = len(d["bits"])
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    a.bar(range(n), d["kept_per_layer"])
    a.set_yscale("log")
    a.set_xlabel("layer")
    a.set_ylabel("kept weights")
    b.bar(range(n), d["bits"])
    b.set_xlabel("layer")
    b.set_ylabel("bits")
    fig.suptitle(f"{d['architecture_string']}  WR {d['wr']:.2f}%  CR {d['cr']:.1f}", fontsize=9)
    return _save(fig, path)
