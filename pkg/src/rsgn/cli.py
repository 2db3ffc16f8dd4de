"""Command-line entry point: ``rsgn {synth,segment,train,summarize,evaluate,crossval}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import kts, metrics
from .dataio import DatasetError, Dataset, generate_synthetic, load_dataset, save_dataset, shot_spans
from .generator import EDGE_MODES, ENCODERS, GeneratorConfig
from .model import RSGN, CheckpointError, load_checkpoint, save_checkpoint
from .reconstructor import REWARD_MODES
from .trainer import TrainConfig, fit

log = logging.getLogger("rsgn")


class CLIError(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Print defaults only where they carry information (not for flags or unset options)."""

    def _get_help_string(self, action):
        if action.default is None or action.required or isinstance(action.default, bool):
            return action.help
        return super()._get_help_string(action)


# ---------------------------------------------------------------- helpers

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr, weight_decay=args.wd, lr_decay_every=args.lr_decay_every,
        lr_decay_rate=args.lr_decay_rate, episodes=args.episodes, epochs=args.epochs,
        epsilon=args.epsilon, supervised=args.supervised, baseline=args.baseline,
        rewards=args.rec, seed=args.seed,
    )


def _generator_config(args, dim: int) -> GeneratorConfig:
    return GeneratorConfig(input_dim=dim, hidden=args.hidden, embed_dim=args.embed,
                           relation_dim=args.embed, edge_mode=args.edge, encoder=args.encoder,
                           normalize_edges=args.normalize_edges)


def _spans(video, ds: Dataset, args):
    if video.boundaries is not None:
        return video.spans()
    cap = args.max_segments or kts.default_max_segments(video.n_frames, ds.fps)
    return kts.segment(video.features, min(cap, video.n_frames), args.kts_penalty).spans()


def write_predictions(model: RSGN, ds: Dataset, out: Path, budget: float, args=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for v in ds.videos:
        spans = _spans(v, ds, args) if args is not None else shot_spans(v, ds.fps)
        probs = model.predict(v.features, spans)
        mask, frame = metrics.summarize(probs, spans, budget)
        (out / f"{v.id}.summary.json").write_text(json.dumps(mask.astype(int).tolist()) + "\n")
        with open(out / f"{v.id}.scores.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "score"])
            for i, s in enumerate(frame, start=1):
                w.writerow([i, repr(float(s))])


def read_predictions(pred_dir: Path, vid: str, n: int):
    mpath = pred_dir / f"{vid}.summary.json"
    spath = pred_dir / f"{vid}.scores.csv"
    if not mpath.exists():
        raise CLIError(f"{mpath}: missing prediction for video {vid}")
    try:
        mask = np.asarray(json.loads(mpath.read_text()), dtype=bool)
    except (json.JSONDecodeError, ValueError) as exc:
        raise CLIError(f"{mpath}: unreadable summary mask ({exc})") from exc
    if mask.size != n:
        raise CLIError(f"{mpath}: mask has {mask.size} frames, video has {n}")
    scores = None
    if spath.exists():
        with open(spath, newline="") as fh:
            rows = list(csv.DictReader(fh))
        scores = np.array([float(r["score"]) for r in rows])
        if scores.size != n:
            raise CLIError(f"{spath}: {scores.size} scores for {n} frames")
    return mask, scores


def evaluate_dataset(pred_dir: Path, ds: Dataset, mode: str, budget: float, seed: int, args=None) -> dict:
    rows, rand_rows, human = [], [], []
    for k, v in enumerate(ds.videos):
        mask, scores = read_predictions(pred_dir, v.id, v.n_frames)
        rows.append(metrics.evaluate_video(v.id, mask, scores, v.user_summaries, v.frame_scores, mode))
        spans = _spans(v, ds, args) if args is not None else shot_spans(v, ds.fps)
        rnd = metrics.random_scores(v.n_frames, seed + k)
        rmask = metrics.assemble_summary(metrics.shot_scores_from_frames(rnd, spans),
                                         [b - a for a, b in spans], budget)
        rand_rows.append(metrics.evaluate_video(v.id, rmask, rnd, v.user_summaries, v.frame_scores, mode))
        users = v.user_scores if v.user_scores is not None else (
            [s.astype(float) for s in v.user_summaries] if v.user_summaries else None)
        if users is not None and len(users) >= 2:
            human.append(metrics.human_leave_one_out(users, mode))
    report = metrics.aggregate(rows, mode)
    rnd = metrics.aggregate(rand_rows, mode)
    report.baselines["random"] = {"f": rnd.f, "tau": rnd.tau, "rho": rnd.rho}
    if human:
        report.baselines["human"] = {k: float(np.mean([h[k] for h in human])) for k in ("f", "tau", "rho")}
    return report.to_dict()


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    if args.videos < 1:
        raise CLIError("--videos must be at least 1")
    ds = generate_synthetic(args.seed, args.videos, args.frames, args.dim, args.key_shots,
                            args.key_fraction, args.noise, fps=args.fps, with_labels=not args.no_labels)
    try:
        path = save_dataset(ds, args.out)
    except OSError as exc:
        raise CLIError(f"{args.out}: cannot write dataset ({exc.strerror})") from exc
    print(f"wrote {len(ds)} videos to {path}")
    return 0


def cmd_segment(args) -> int:
    ds = load_dataset(args.dataset)
    out = Path(args.out) if args.out else Path(args.dataset)
    out.mkdir(parents=True, exist_ok=True)
    ends = {}
    for v in ds.videos:
        cap = args.max_segments or kts.default_max_segments(v.n_frames, ds.fps)
        seg = kts.segment(v.features, min(cap, v.n_frames), args.kts_penalty)
        ends[v.id] = seg.ends
        (out / f"{v.id}.boundaries.json").write_text(json.dumps(seg.ends) + "\n")
        print(f"{v.id}: {seg.n_segments} segments")
    if out.resolve() == Path(args.dataset).resolve():
        mpath = out / "manifest.json"
        manifest = json.loads(mpath.read_text())
        for entry in manifest["videos"]:
            entry["boundaries"] = f"{entry['id']}.boundaries.json"
        mpath.write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    if args.supervised:
        missing = [v.id for v in ds.videos if v.frame_scores is None]
        if missing:
            raise CLIError(f"supervised training needs frame scores, missing for {', '.join(missing[:5])}; "
                           "pass --unsupervised or add <id>.scores.json files")
    else:
        ds = ds.without_labels() if not args.keep_labels else ds
    for v in ds.videos:
        if v.boundaries is None:
            v.boundaries = [e for _, e in _spans(v, ds, args)]
    cfg = _train_config(args)
    gcfg = _generator_config(args, ds.dim)
    out = Path(args.out)
    result = fit(ds, cfg, generator_config=gcfg, out_dir=out, model_seed=args.seed)
    if result.log:
        last = result.log[-1]
        print(json.dumps({k: v for k, v in last.items() if k != "seconds"}))
    print(f"checkpoints in {out}")
    return 0


def cmd_summarize(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    if ds.dim != model.config.input_dim:
        raise CLIError(f"{args.checkpoint}: model expects {model.config.input_dim}-d features, "
                       f"dataset {args.dataset} has {ds.dim}")
    write_predictions(model, ds, Path(args.out), args.budget, args)
    print(f"wrote summaries for {len(ds)} videos to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.dataset)
    report = evaluate_dataset(Path(args.pred), ds, args.fmode, args.budget, args.seed, args)
    text = json.dumps(report, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(json.dumps({k: report[k] for k in ("mode", "f", "tau", "rho")}))
    return 0


def cmd_crossval(args) -> int:
    ds = load_dataset(args.dataset)
    for v in ds.videos:
        if v.boundaries is None:
            v.boundaries = [e for _, e in _spans(v, ds, args)]
    out = Path(args.out)
    cfg = _train_config(args)
    gcfg = _generator_config(args, ds.dim)
    reports = []

    def train_fn(subset, split):
        sub = subset if args.supervised or args.keep_labels else subset.without_labels()
        return fit(sub, cfg, generator_config=gcfg, out_dir=out / f"split{split}", model_seed=args.seed + split).model

    def eval_fn(model, subset, split):
        pred = out / f"split{split}" / "pred"
        write_predictions(model, subset, pred, args.budget, args)
        rep = evaluate_dataset(pred, subset, args.fmode, args.budget, args.seed, args)
        rep["split"] = split
        reports.append(rep)
        return rep["f"] if rep["f"] is not None else float("nan")

    cv = metrics.cross_validate(ds, train_fn, eval_fn, args.repeats, args.train_fraction, args.seed)
    summary = {"f_mean": cv.mean, "f_std": cv.std, "f_per_split": cv.scores,
               "splits": [{"train": [ds.videos[i].id for i in tr], "test": [ds.videos[i].id for i in te]}
                          for tr, te in cv.splits],
               "reports": reports}
    _write_json(out / "crossval.json", summary)
    print(json.dumps({"f_mean": cv.mean, "f_std": cv.std}))
    return 0


# ---------------------------------------------------------------- parser

def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="random seed")


def _add_kts(p):
    p.add_argument("--kts-penalty", type=float, default=kts.DEFAULT_PENALTY,
                   help="KTS model-selection penalty per segment")
    p.add_argument("--max-segments", type=int, default=None,
                   help="KTS segment cap (unset: one segment per second of video)")


def _add_model(p):
    p.add_argument("--hidden", type=int, default=256, help="LSTM and graph hidden size")
    p.add_argument("--embed", type=int, default=None, help="phi/psi/tau embedding size (unset: same as --hidden)")
    p.add_argument("--edge", choices=EDGE_MODES, default="dot", help="edge-weight function")
    p.add_argument("--encoder", choices=ENCODERS, default="sg",
                   help="s: BiLSTM only, g/mg: mean-pooled shots + graph, sg: BiLSTM + graph")
    p.add_argument("--normalize-edges", action="store_true", help="row-softmax the edge matrix")
    p.add_argument("--rec", choices=REWARD_MODES, default="both", help="reconstructor reward components")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--supervised", dest="supervised", action="store_true", default=True,
                      help="train with the prediction loss (needs frame scores; the default)")
    mode.add_argument("--unsupervised", dest="supervised", action="store_false",
                      help="train from reconstructor rewards only")
    p.add_argument("--keep-labels", action="store_true",
                   help="with --unsupervised, keep annotations loaded (never used as targets)")
    p.add_argument("--epochs", type=int, default=60, help="training epochs")
    p.add_argument("--episodes", type=int, default=10, help="policy-gradient episodes per update")
    p.add_argument("--lr", type=float, default=1e-5, help="Adam learning rate")
    p.add_argument("--wd", type=float, default=1e-5, help="decoupled weight decay")
    p.add_argument("--lr-decay-every", type=int, default=30, help="update steps between learning-rate decays")
    p.add_argument("--lr-decay-rate", type=float, default=0.1, help="learning-rate decay factor")
    p.add_argument("--epsilon", type=float, default=0.5, help="target mean selection probability")
    p.add_argument("--baseline", action="store_true", help="subtract a running-mean reward baseline")


def _add_eval(p):
    p.add_argument("--budget", type=float, default=metrics.DEFAULT_BUDGET, help="summary length fraction")
    p.add_argument("--fmode", choices=("max", "mean"), default="max",
                   help="combine per-annotator F by max (SumMe) or mean (TVsum)")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="rsgn", description="Key-shot video summarization: segment, train, summarize, evaluate.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a planted synthetic dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="dataset directory to create")
    _add_seed(p)
    p.add_argument("--videos", type=int, default=20, help="number of videos")
    p.add_argument("--frames", type=int, default=300, help="frames per video")
    p.add_argument("--dim", type=int, default=16, help="feature dimension")
    p.add_argument("--key-shots", type=int, default=4, help="planted key shots per video")
    p.add_argument("--key-fraction", type=float, default=0.12, help="fraction of frames in key shots")
    p.add_argument("--noise", type=float, default=0.01, help="within-shot noise std")
    p.add_argument("--fps", type=float, default=15.0, help="nominal frame rate")
    p.add_argument("--no-labels", action="store_true", help="omit scores and user summaries")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="detect shot boundaries with KTS", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", default=None, help="where to write <id>.boundaries.json (default: dataset)")
    _add_kts(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics.jsonl")
    _add_seed(p)
    _add_model(p)
    _add_kts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("summarize", help="write summaries and score curves", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="prediction directory")
    _add_eval(p)
    _add_kts(p)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("evaluate", help="score predictions against annotations", formatter_class=fmt)
    p.add_argument("--pred", required=True, help="prediction directory from 'summarize'")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", default=None, help="write the full JSON report here")
    _add_seed(p)
    _add_eval(p)
    _add_kts(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", help="repeated random 80/20 train/test evaluation", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--repeats", type=int, default=5, help="independent random splits")
    p.add_argument("--train-fraction", type=float, default=0.8, help="training share per split")
    _add_seed(p)
    _add_model(p)
    _add_eval(p)
    _add_kts(p)
    p.set_defaults(func=cmd_crossval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, DatasetError, CheckpointError, OSError, ValueError) as exc:
        print(f"rsgn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
