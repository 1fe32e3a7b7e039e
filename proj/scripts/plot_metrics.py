"""Plot per-epoch losses from a pretrain run's metrics.jsonl.

usage: plot_metrics.py RUN_DIR [OUT.png]
"""

import json
import pathlib
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(run_dir):
    rows = [json.loads(line) for line in (pathlib.Path(run_dir) / "metrics.jsonl").read_text().splitlines() if line]
    return [r for r in rows if r["stage"] == 1], [r for r in rows if r["stage"] == 2]


def main(run_dir, out=None):
    s1, s2 = load(run_dir)
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    a.plot([r["epoch"] for r in s1], [r["l_ctr"] for r in s1], label="stage 1")
    a.plot([len(s1) + r["epoch"] for r in s2], [r["l_ctr"] for r in s2], label="stage 2")
    a.set_title("l_ctr")
    a.set_xlabel("epoch")
    a.legend()
    for key in ("l_de", "l_kp", "l_dct"):
        b.plot([r["epoch"] for r in s2], [r[key] for r in s2], label=key)
    b.set_title("stage 2 denoising")
    b.set_xlabel("epoch")
    b.set_yscale("log")
    b.legend()
    fig.tight_layout()
    fig.savefig(out or pathlib.Path(run_dir) / "metrics.png", dpi=120)


if __name__ == "__main__":
    main(*sys.argv[1:3])
