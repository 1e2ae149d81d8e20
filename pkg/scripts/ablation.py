"""Component ablation (baseline / +SSM / +aux loss / full), 1-shot, fold 0."""

import argparse
import logging

from sst.experiments import ablation, desk_config, write_json

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--eta", type=float, help="override the desk tuning step")
    ap.add_argument("--out", default="results/ablation.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = desk_config() if args.eta is None else desk_config(eta=args.eta)
    res = ablation(args.seeds, base)
    write_json(res, args.out)
    for name, value in res["mean"].items():
        print(f"{name:<10}{value:.4f}  per seed {[round(v, 4) for v in res['per_seed'][name]]}")
