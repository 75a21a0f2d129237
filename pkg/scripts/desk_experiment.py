"""Run the full pipeline for several master seeds and print summary tables.

    python scripts/desk_experiment.py configs/desk.toml --seeds 0 1 2 --out runs/desk

For each seed this writes ``<out>/seed<s>/run.toml`` (the base config with the
seed replaced), then runs gen-data, trains every (variant, K) listed under
``matrix``, and evaluates the matrix. The tables report medians over seeds:
validation MSE per variant and K, closed-loop metrics at the training swarm
size, and rollout error per evaluation swarm size.
"""

import argparse
import json
import statistics
import sys
from pathlib import Path

from modgnn import cli
from modgnn.config import load_config
from modgnn.evalkit import read_metrics_csv


def write_seed_config(base, seed: int, path: Path) -> None:
    doc = base.resolved()
    doc.pop("format_version")
    doc["seed"] = seed
    lines = [f"seed = {seed}"]
    for section, values in doc.items():
        if isinstance(values, dict):
            lines += [f"{section}.{k} = {json.dumps(v)}" for k, v in values.items()]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def run_seed(cfg_path: Path, variants, K_values, jobs: int) -> None:
    cfg = str(cfg_path)
    if cli.main(["gen-data", "--config", cfg]) != 0:
        sys.exit("gen-data failed")
    for v in variants:
        for k in K_values:
            if cli.main(["train", "--config", cfg, "--variant", v, "--K", str(k)]) != 0:
                sys.exit(f"training {v} K={k} failed")
    if cli.main(["matrix", "--config", cfg, "--jobs", str(jobs)]) != 0:
        sys.exit("matrix failed")


def median(xs):
    xs = [x for x in xs if x is not None]
    return statistics.median(xs) if xs else float("nan")


def print_table(title, header, rows):
    print(f"\n{title}")
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    for r in [header] + rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))


def summarize(root: Path, seeds, base) -> None:
    m = base.matrix
    trained = [v for v in m.variants if v != "expert"]
    val = {}
    rows = {}
    for s in seeds:
        d = root / f"seed{s}/out/reports"
        for v in trained:
            for k in m.K:
                rep = json.loads((d / f"{v}_K{k}.report.json").read_text())["report"]
                val.setdefault((v, k), []).append(rep["val_loss"][-1] if rep["val_loss"] else None)
        for r in read_metrics_csv(d / "matrix.csv"):
            rows.setdefault((r.variant, r.K, r.N), []).append(r)

    print_table(
        "validation MSE (median over seeds)",
        ["variant"] + [f"K={k}" for k in m.K],
        [[v] + [f"{median(val[(v, k)]):.4f}" for k in m.K] for v in trained],
    )

    n0 = base.env.n_agents
    table = []
    for v in m.variants:
        for k in m.K:
            rs = rows.get((v, k, n0), [])
            if rs:
                table.append([v, k, f"{median(r.error for r in rs):.4f}",
                              f"{median(r.leader_dist_mean for r in rs):.3f}",
                              f"{median(r.cohesion_mean for r in rs):.3f}",
                              f"{median(r.separation_mean for r in rs):.3f} +- {median(r.separation_std for r in rs):.3f}"])
    print_table(f"closed loop at N={n0} (median over seeds)",
                ["variant", "K", "error", "leader dist", "cohesion", "separation"], table)

    table = []
    for v in m.variants:
        for k in m.K:
            cells = [rows.get((v, k, n)) for n in m.N]
            if any(cells):
                table.append([v, k] + [f"{median(r.error for r in c):.4f}" if c else "-" for c in cells])
    print_table("rollout error by swarm size (median over seeds)", ["variant", "K"] + [f"N={n}" for n in m.N], table)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--summarize-only", action="store_true", help="only print tables from an earlier run")
    args = ap.parse_args()

    base = load_config(args.config)
    root = Path(args.out)
    if not args.summarize_only:
        trained = [v for v in base.matrix.variants if v != "expert"]
        for s in args.seeds:
            path = root / f"seed{s}/run.toml"
            write_seed_config(base, s, path)
            run_seed(path, trained, base.matrix.K, args.jobs)
    summarize(root, args.seeds, base)


if __name__ == "__main__":
    main()
