#!/usr/bin/env python3
"""Train on the planted synthetic set and report per-epoch losses and training F.

    python3 scripts/planted_run.py                      # acceptance defaults, supervised
    python3 scripts/planted_run.py --unsupervised
    python3 scripts/planted_run.py --lr 1e-3 --decay-every 600 --rec none --epochs 30
"""
import argparse
import json
import time

import numpy as np

from rsgn import metrics as mt
from rsgn.dataio import generate_synthetic
from rsgn.generator import GeneratorConfig
from rsgn.trainer import TrainConfig, fit, prepare


def main():
    ap = argparse.ArgumentParser(formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--videos", type=int, default=20)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--edge", default="dot")
    ap.add_argument("--encoder", default="sg")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--lr", type=float, default=1e-5)
    ap.add_argument("--decay-every", type=int, default=30)
    ap.add_argument("--rec", default="both")
    ap.add_argument("--baseline", action="store_true")
    ap.add_argument("--unsupervised", action="store_true")
    ap.add_argument("--every", type=int, default=5, help="print every N epochs")
    args = ap.parse_args()

    ds = generate_synthetic(seed=args.seed, n_videos=args.videos)
    train = ds.without_labels() if args.unsupervised else ds
    cfg = TrainConfig(learning_rate=args.lr, lr_decay_every=args.decay_every, epochs=args.epochs,
                      rewards=args.rec, baseline=args.baseline, supervised=not args.unsupervised, seed=args.seed)
    gcfg = GeneratorConfig(input_dim=ds.dim, hidden=args.hidden, edge_mode=args.edge, encoder=args.encoder)
    t0 = time.perf_counter()
    res = fit(train, cfg, generator_config=gcfg)
    for e in res.log:
        if e["epoch"] % args.every == 0 or e["epoch"] == 1:
            print(json.dumps({k: (round(v, 5) if isinstance(v, float) else v) for k, v in e.items()}))
    fs = []
    for v in ds.videos:
        pv = prepare(v, ds.fps)
        mask, _ = mt.summarize(res.model.predict(pv.features, pv.spans), pv.spans, 0.15)
        fs.append(mt.protocol_f(mask, v.user_summaries, "max"))
    J = [e["J"] for e in res.log]
    print(json.dumps({
        "train_f_max": round(float(np.mean(fs)), 4),
        "J_first5": round(float(np.mean(J[:5])), 5) if J else None,
        "J_last5": round(float(np.mean(J[-5:])), 5) if J else None,
        "seconds": round(time.perf_counter() - t0, 1),
    }))


if __name__ == "__main__":
    main()
