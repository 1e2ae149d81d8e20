"""Held-out test mean-IoU and train-class self-segmentation IoU of the full model."""

import argparse
import json
import logging

from sst.experiments import competence, desk_config, write_json

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/competence.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = competence(args.seed, desk_config())
    write_json(res, args.out)
    print(json.dumps({k: v for k, v in res.items() if k != "config"}, indent=2))
