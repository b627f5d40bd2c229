"""Scaling benchmark: solve time and memory proxies for dense vs sparsified graphs."""

import csv
import math
import os
import resource
import time
from dataclasses import replace

import numpy as np
import psutil
import torch

from .data import generate_puzzle, shuffle_instance, synth_image
from .graph import build_complete, edge_memory_estimate, sparsify
from .model import AssemblyModel, NetworkPredictor
from .sampler import solve

FIELDS = ["M", "mode", "real_edges", "virtual_edges", "edge_proxy", "time_median_s", "times_s",
          "rss_delta_mb", "maxrss_delta_mb", "status"]


def bench_instance(M, patch=8, seed=0):
    n = math.isqrt(M)
    if n * n != M:
        raise ValueError(f"puzzle benchmark sizes must be square numbers, got {M}")
    img = synth_image(n * patch, seed)
    return shuffle_instance(generate_puzzle(img, n, rotate=True, seed=seed), seed)


def edge_counts(M, cfg, sparse):
    g = build_complete(np.zeros((M, 1)))
    if sparse:
        g = sparsify(g, cfg.graph.sparsifier)
    return len(g.edges), g.num_nodes * g.virtual_count, edge_memory_estimate(g)


def _maxrss_mb():
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def bench(cfg, sizes=None, out_dir=None, model=None, log=print):
    """Time ``solve`` per size for dense and sparse graphs; returns rows (also CSV/plots when ``out_dir``)."""
    bc = cfg.bench
    sizes = bc.sizes if sizes is None else sizes
    if cfg.task != "puzzle2d":
        raise ValueError("the scaling benchmark uses the 2D puzzle task")
    torch.manual_seed(cfg.train.seed)
    model = model or AssemblyModel(cfg)
    model.eval()
    stride = max(1, math.ceil(cfg.schedule.T / bc.steps))
    proc = psutil.Process()
    rows = []
    for M in sizes:
        inst = bench_instance(M, bc.patch)
        for mode in ("dense", "sparse"):
            mcfg = replace(cfg, graph=replace(cfg.graph, sparse=(mode == "sparse")),
                           schedule=replace(cfg.schedule, stride=stride))
            real, virt, proxy = edge_counts(M, mcfg, mode == "sparse")
            row = {"M": M, "mode": mode, "real_edges": real, "virtual_edges": virt, "edge_proxy": proxy}
            rss0, max0 = proc.memory_info().rss, _maxrss_mb()
            times = []
            try:
                for r in range(bc.repeats):
                    t0 = time.perf_counter()
                    solve(inst, NetworkPredictor(model, mcfg), mcfg, seed=r)
                    times.append(time.perf_counter() - t0)
                row["status"] = "ok"
            except (MemoryError, RuntimeError) as exc:
                if isinstance(exc, RuntimeError) and "memory" not in str(exc).lower():
                    raise
                row["status"] = "oom"
            row["times_s"] = ";".join(f"{x:.4f}" for x in times)
            row["time_median_s"] = float(np.median(times)) if times else float("nan")
            row["rss_delta_mb"] = (proc.memory_info().rss - rss0) / 2 ** 20
            row["maxrss_delta_mb"] = _maxrss_mb() - max0
            rows.append(row)
            log(f"M={M:5d} {mode:6s} edges={proxy:8d} time={row['time_median_s']:.3f}s {row['status']}")
    if out_dir:
        write_outputs(rows, out_dir)
    return rows


def write_outputs(rows, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "bench.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in FIELDS})
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for key, ylabel, fname in (("time_median_s", "solve time [s]", "time.png"),
                               ("edge_proxy", "edges (memory proxy)", "memory.png")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for mode in ("dense", "sparse"):
            pts = [(r["M"], r[key]) for r in rows if r["mode"] == mode]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
        ax.set_xlabel("pieces M")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, fname), dpi=120)
        plt.close(fig)
