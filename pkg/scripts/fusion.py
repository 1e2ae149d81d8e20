"""5-shot fusion comparison (weighted / average / maximum) with the full model."""

import argparse
import logging

from sst.experiments import desk_config, fusion, write_json

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="results/fusion.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = fusion(args.seeds, desk_config())
    write_json(res, args.out)
    for name, value in res["mean"].items():
        print(f"{name:<10}{value:.4f}  per seed {[round(v, 4) for v in res['per_seed'][name]]}")
    print(f"mean |w - 1/5| = {res['mean_abs_weight_deviation_from_uniform']:.4f}")
