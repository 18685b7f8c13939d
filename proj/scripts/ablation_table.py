#!/usr/bin/env python3
"""Summarise training runs as an ablation table.

Every directory below the given roots that holds metrics.jsonl and
effective_config.json is one run. Runs are grouped by conversion stage,
loss mode and band mask; each cell is the median over seeds of the final
evaluation.

    scripts/ablation_table.py runs/ [--markdown] [--metric rgb_psnr]
"""
import argparse
import json
import pathlib
import statistics
from collections import defaultdict

METRICS = ["spectral_psnr", "spectral_ssim", "rgb_psnr", "rgb_ssim"]


def final_eval(path):
    last = None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                last = json.loads(line)
    return last


def collect(roots):
    runs = []
    for root in roots:
        for metrics in sorted(pathlib.Path(root).rglob("metrics.jsonl")):
            cfg_path = metrics.parent / "effective_config.json"
            if not cfg_path.exists():
                continue
            cfg = json.loads(cfg_path.read_text())
            record = final_eval(metrics)
            if record is None:
                continue
            runs.append({
                "dir": str(metrics.parent),
                "stage": cfg["conversion_stage"],
                "loss": cfg["loss_mode"],
                "bands": cfg.get("bands", "all"),
                "seed": cfg["seed"],
                "iteration": record["iteration"],
                **{m: record[m] for m in METRICS},
            })
    return runs


def table(runs):
    groups = defaultdict(list)
    for r in runs:
        groups[(r["stage"], r["loss"], r["bands"])].append(r)
    rows = []
    for key in sorted(groups):
        rs = groups[key]
        row = dict(zip(("stage", "loss", "bands"), key))
        row["seeds"] = len(rs)
        for m in METRICS:
            row[m] = statistics.median(r[m] for r in rs)
        rows.append(row)
    return rows


def render(rows, markdown):
    cols = ["stage", "loss", "bands", "seeds"] + METRICS
    cells = [[str(r[c]) if not isinstance(r[c], float) else f"{r[c]:.4f}" if "ssim" in c else f"{r[c]:.2f}"
              for c in cols] for r in rows]
    if markdown:
        out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        out += ["| " + " | ".join(c) + " |" for c in cells]
        return "\n".join(out)
    widths = [max(len(c), *(len(x[i]) for x in cells)) for i, c in enumerate(cols)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    return "\n".join(fmt.format(*r).rstrip() for r in [cols] + cells)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("roots", nargs="+", help="directories to search for runs")
    ap.add_argument("--markdown", action="store_true", help="emit a markdown table")
    ap.add_argument("--metric", choices=METRICS, help="also print each arm's margin over the best other arm")
    args = ap.parse_args()

    rows = table(collect(args.roots))
    if not rows:
        raise SystemExit("no runs found")
    print(render(rows, args.markdown))
    if args.metric:
        print()
        for r in rows:
            others = [o[args.metric] for o in rows if o is not r and o["bands"] == r["bands"]]
            if others:
                print(f"{r['stage']}/{r['loss']}/{r['bands']}: {r[args.metric] - max(others):+.3f} vs best other")


if __name__ == "__main__":
    main()
