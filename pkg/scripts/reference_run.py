"""Train AttrMoGen and the attribute-blind baseline on the synthetic corpus and print the headline numbers."""

import argparse
import json
import logging

import torch

from attrmogen.reference import reference_config, run_reference


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/reference")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-cache", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    res = run_reference(args.out, reference_config(args.seed), use_cache=not args.no_cache)
    for name in ("attrmogen", "baseline"):
        r = res[name]
        shuf = r["protocol_shuffled"]
        print(f"{name:10s} probe gender={r['probe']['gender']:.3f} age={r['probe']['age']:.3f} "
              f"relMSE={r['val_relative_mse']:.4f} "
              f"shuffled clf g={shuf['classifier']['gender']['avg']:.3f} a={shuf['classifier']['age_group']['avg']:.3f} "
              f"oracle g={shuf['oracle']['gender']['avg']:.3f} a={shuf['oracle']['age_group']['avg']:.3f} "
              f"proto={r['prototype']['accuracy']:.3f}")
    print(json.dumps({"seconds": round(res["seconds"], 1), "repeat_identical": res["repeat_identical"]}))


if __name__ == "__main__":
    main()
