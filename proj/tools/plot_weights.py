#!/usr/bin/env python3
"""Render weights.csv (round, peer, omega, ...) as an SVG line chart of omega per peer."""

import argparse
import csv
import sys
from collections import defaultdict

COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def read_series(path):
    series = defaultdict(list)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            series[int(row["peer"])].append((int(row["round"]), float(row["omega"])))
    for points in series.values():
        points.sort()
    return dict(sorted(series.items()))


def render(series, title, width=640, height=400):
    left, right, top, bottom = 60, 110, 40, 50
    pw, ph = width - left - right, height - top - bottom
    rounds = [r for pts in series.values() for r, _ in pts]
    omegas = [w for pts in series.values() for _, w in pts]
    r_max = max(max(rounds), 1)
    w_max = max(max(omegas) * 1.1, 1e-9)

    def x(r):
        return left + pw * r / r_max

    def y(w):
        return top + ph * (1.0 - w / w_max)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">round</text>',
        f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + ph / 2})">omega</text>',
    ]
    for k in range(5):
        w = w_max * k / 4
        out.append(f'<text x="{left - 6}" y="{y(w) + 4:.1f}" text-anchor="end">{w:.2f}</text>')
        out.append(f'<line x1="{left}" y1="{y(w):.1f}" x2="{left + pw}" y2="{y(w):.1f}" '
                   f'stroke="#ddd"/>')
    step = max(1, r_max // 10)
    for r in range(0, r_max + 1, step):
        out.append(f'<text x="{x(r):.1f}" y="{top + ph + 16}" text-anchor="middle">{r}</text>')
    for n, (peer, pts) in enumerate(series.items()):
        color = COLORS[n % len(COLORS)]
        coords = " ".join(f"{x(r):.1f},{y(w):.1f}" for r, w in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 16 * n + 8
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 36}" y="{ly + 4}">peer {peer}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("weights_csv")
    ap.add_argument("-o", "--output", help="SVG path (default: stdout)")
    ap.add_argument("--title", default="peer weights")
    args = ap.parse_args()
    series = read_series(args.weights_csv)
    if not series:
        sys.exit("no rows in " + args.weights_csv)
    svg = render(series, args.title)
    if args.output:
        with open(args.output, "w") as f:
            f.write(svg)
    else:
        sys.stdout.write(svg)


if __name__ == "__main__":
    main()
