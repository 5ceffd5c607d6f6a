#!/usr/bin/env python3
"""Plot phasescope CSV outputs. Each file starts with a `# {json}` metadata line."""

import argparse
import json
import math
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np


def read_table(path):
    lines = Path(path).read_text().splitlines()
    meta = json.loads(lines[0][2:])
    columns = lines[1].split(",")
    rows = [[float(v) for v in line.split(",")] for line in lines[2:] if line]
    data = np.array(rows) if rows else np.empty((0, len(columns)))
    return meta, {name: data[:, i] for i, name in enumerate(columns)}


def finite_ratio(values):
    # U/J = inf plots at the right edge of the finite range
    finite = values[np.isfinite(values)]
    edge = finite.max() * 2 if finite.size else 1.0
    return np.where(np.isfinite(values), values, edge)


def plot_perturbative(args):
    _, cols = read_table(args.files[0])
    fig, ax = plt.subplots()
    for u in np.unique(cols["u_over_j"]):
        mask = cols["u_over_j"] == u
        ax.plot(cols["omega"][mask], cols["S"][mask], label=f"U/J={u:g}")
    ax.set_xlabel("omega")
    ax.set_ylabel("S(omega)")
    ax.legend(fontsize="small")
    return fig


def plot_summary(args):
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True)
    for path in args.files:
        meta, cols = read_table(path)
        label = Path(path).stem.replace("perturbative_", "").replace("_summary", "")
        u = finite_ratio(cols["u_over_j"])
        top.semilogx(u, cols["F"], "o-", label=label)
        bottom.loglog(u, cols["Gamma_max"], "o-", label=label)
    top.set_ylabel("F")
    bottom.set_ylabel("Gamma_max")
    bottom.set_xlabel("U/J")
    top.legend()
    return fig


def plot_psd(args):
    _, cols = read_table(args.files[0])
    fig, ax = plt.subplots()
    ax.plot(cols["omega"], cols["S"])
    ax.set_xlabel("omega")
    ax.set_ylabel("S(omega)")
    return fig


def plot_diagram(args):
    meta, cols = read_table(args.files[0])
    kinds = meta.get("kind_codes", [])
    fig, axes = plt.subplots(1, max(len(kinds), 1), squeeze=False)
    for code, ax in enumerate(axes[0]):
        mask = cols["kind"] == code
        u = finite_ratio(cols["u_over_j"][mask])
        g = cols["gamma"][mask]
        f = cols["F"][mask]
        us, gs = np.unique(u), np.unique(g)
        grid = np.full((len(gs), len(us)), math.nan)
        for i, gv in enumerate(gs):
            for j, uv in enumerate(us):
                sel = (u == uv) & (g == gv)
                if sel.any():
                    grid[i, j] = f[sel].mean()
        mesh = ax.pcolormesh(us, gs, grid, shading="nearest")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("U/J")
        ax.set_ylabel("gamma")
        ax.set_title(kinds[code] if code < len(kinds) else str(code))
        fig.colorbar(mesh, ax=ax, label="seed-mean F")
    return fig


def plot_matrix(args):
    meta, cols = read_table(args.files[0])
    n = int(cols["j"].max()) + 1
    matrix = np.zeros((n, n))
    matrix[cols["j"].astype(int), cols["k"].astype(int)] = cols["M_jk"]
    fig, ax = plt.subplots()
    limit = np.abs(matrix).max()
    image = ax.imshow(matrix, cmap="RdBu_r", vmin=-limit, vmax=limit)
    ax.set_xlabel("k")
    ax.set_ylabel("j")
    ax.set_title(meta.get("probe", {}).get("mode", ""))
    fig.colorbar(image, ax=ax)
    return fig


PLOTS = {
    "perturbative": plot_perturbative,
    "summary": plot_summary,
    "psd": plot_psd,
    "diagram": plot_diagram,
    "matrix": plot_matrix,
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("kind", choices=sorted(PLOTS))
    parser.add_argument("files", nargs="+")
    parser.add_argument("--out", help="save to this file instead of showing")
    args = parser.parse_args()
    fig = PLOTS[args.kind](args)
    fig.tight_layout()
    if args.out:
        fig.savefig(args.out, dpi=150)
    else:
        plt.show()


if __name__ == "__main__":
    main()
