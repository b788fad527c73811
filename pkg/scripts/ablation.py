"""Sweep alpha and lambda around the reference setting; report gender/age probe accuracy and reconstruction."""

import argparse
import dataclasses
import json

import numpy as np
import torch

from attrmogen.classifier import linear_probe
from attrmogen.motion_data import normalize_corpus
from attrmogen.reference import reference_config
from attrmogen.synth import generate_corpus
from attrmogen.vqvae import encode_array, reconstruct_array, relative_mse, train_decoup_vqvae

GRID = [(0.0, 0.0), (0.01, 0.0), (0.0, 0.5), (0.01, 0.5), (0.005, 0.5), (0.02, 0.5), (0.01, 0.25), (0.01, 1.0)]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int)
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = reference_config(args.seed)
    corpus, _ = normalize_corpus(generate_corpus(cfg.synth, cfg.data.n_per_cell))
    x, labels, _, _ = corpus.arrays("train")
    xv, lv, _, _ = corpus.arrays("val")
    xt, lt, _, _ = corpus.arrays("test")
    for alpha, lam in GRID:
        vq = dataclasses.replace(cfg.vqvae, alpha=alpha, lam=lam,
                                 iterations=args.iterations or cfg.vqvae.iterations)
        run = train_decoup_vqvae(vq, x, labels)
        s = encode_array(run.model, np.concatenate([x, xt])).mean(axis=1)
        is_train = np.arange(len(s)) < len(x)
        probe = linear_probe(s, np.concatenate([labels, lt]), is_train, args.seed)
        rel = relative_mse(xv, reconstruct_array(run.model, xv, lv))
        print(json.dumps({"alpha": alpha, "lambda": lam, **probe, "val_relative_mse": round(rel, 4)}), flush=True)


if __name__ == "__main__":
    main()
