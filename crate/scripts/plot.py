"""Draw PNGs from the plot_*.tsv files written by `fm plots`.

usage: python scripts/plot.py OUT_DIR
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read(path):
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f, delimiter="\t") if r and not r[0].startswith("#")]
    return rows[0], rows[1:]


def series(rows, x, label, y):
    out = defaultdict(list)
    for r in rows:
        out[r[label]].append((float(r[x]), float(r[y])))
    return {k: sorted(v) for k, v in out.items()}


def draw(path, x, label, y, title, logx=False, png=None):
    header, rows = read(path)
    idx = {h: i for i, h in enumerate(header)}
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, pts in series(rows, idx[x], idx[label], idx[y]).items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    if logx:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png or path.with_suffix(".png"), dpi=120)
    plt.close(fig)


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "out")
    done = False
    p = out / "plot_loss_so_far.tsv"
    if p.exists():
        draw(p, "cutoff", "model", "loss", "loss so far", logx=True)
        done = True
    p = out / "plot_sweep.tsv"
    if p.exists():
        header, rows = read(p)
        # One line per variant, best temperature per m.
        best = {}
        for m, variant, tau, loss in rows:
            key = (variant, int(m))
            if key not in best or float(loss) < best[key]:
                best[key] = float(loss)
        fig, ax = plt.subplots(figsize=(6, 4))
        for variant in sorted({k[0] for k in best}):
            pts = sorted((m, l) for (v, m), l in best.items() if v == variant)
            ax.plot([q[0] for q in pts], [q[1] for q in pts], marker="o", label=variant)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("m")
        ax.set_ylabel("test loss")
        ax.set_title("memory sweep")
        ax.legend()
        fig.tight_layout()
        fig.savefig(p.with_suffix(".png"), dpi=120)
        plt.close(fig)
        done = True
    p = out / "plot_generation.tsv"
    if p.exists():
        draw(p, "position", "variant", "latency_us", "per-token latency")
        draw(p, "position", "variant", "state_bytes", "inference state", png=out / "plot_generation_state.png")
        done = True
    if not done:
        sys.exit(f"no plot_*.tsv files in {out}")


if __name__ == "__main__":
    main()
