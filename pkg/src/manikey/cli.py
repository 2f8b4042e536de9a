"""``manikey`` command line: synth, precompute, train, eval and ablate.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
A global ``--config file.json`` supplies defaults for any flag (keys are the
long flag names with dashes or underscores); explicit flags win. Keys may also
be nested under the command name.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .augment import AUGMENTATIONS, AugmentationConfig
from .errors import DataError, EmptyDataset, InvalidParams, NumericError
from .field import extract_keypoints, rbf_map
from .geodesy import DEFAULT_T_SCALE, DIJKSTRA, HEAT, METHODS, build_knn_graph, dijkstra_field, geodesic_field, heat_field
from .io import dump_json, list_samples, load_dataset, load_sample, save_sample
from .regressor import forward, load_params
from .synthrig import QuadrupedParams, RigConfig, SynthConfig, default_rig, make_dataset
from .training import TrainConfig, keypoint_errors, rmse_cm, train_samples

log = logging.getLogger("manikey")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
REPORT_SCHEMA = Path(__file__).with_name("report_schema.json")


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _split_dirs(data):
    """``data`` may be a dataset root with ``train``/``test`` below it."""
    data = Path(data)
    return data / "train", data / "test"


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    params = QuadrupedParams.from_dict(args.quadruped) if args.quadruped else None
    rig = RigConfig.from_dict(args.rig) if args.rig else default_rig()
    written = make_dataset(args.out, args.train, args.test, params=params, rig=rig, seed=args.seed)
    print(f"wrote {len(written['train'])} train and {len(written['test'])} test samples to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# precompute


def _sample_dirs(data):
    data = Path(data)
    dirs = []
    for sub in (data, data / "train", data / "test"):
        if sub.is_dir():
            dirs.extend(list_samples(sub))
    if not dirs:
        raise EmptyDataset(f"no samples below {data}")
    return sorted(set(dirs))


def _spearman_min(a, b):
    return float(min(spearmanr(a[:, j], b[:, j]).statistic for j in range(a.shape[1])))


def cmd_precompute(args):
    dirs = _sample_dirs(args.data)
    done = skipped = 0
    for d in dirs:
        sample = load_sample(d)
        if sample.geodesic is not None and not args.overwrite:
            skipped += 1
            continue
        sample = geodesic_field(sample, args.method, k=args.k, t_scale=args.t_scale, overwrite=True)
        geo = sample.geodesic
        save_sample(sample.replace(geodesic=type(geo)(geo.values.astype(np.float32), geo.method), meta={**sample.meta, "k": args.k}), d)
        done += 1
    print(f"precomputed {done} sample(s) with {args.method}, skipped {skipped}")
    if args.compare:
        rows = []
        for d in dirs[: args.compare]:
            sample = load_sample(d)
            graph = build_knn_graph(sample.cloud, args.k)
            src = sample.keypoints.indices
            rho = _spearman_min(heat_field(graph, sample.cloud, src, args.t_scale).values, dijkstra_field(graph, src).values)
            rows.append({"sample": str(d), "spearman_min": rho})
            print(f"{d}: heat vs dijkstra Spearman (min over keypoints) {rho:.4f}")
        if args.report:
            dump_json(args.report, {"comparison": rows, "k": args.k, "t_scale": args.t_scale})
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _augmentation_config(args):
    aug = AugmentationConfig.from_dict(args.augmentation) if args.augmentation else AugmentationConfig()
    off = [name for name in AUGMENTATIONS if getattr(args, f"no_{name}")]
    return aug.without(*off) if off else aug


def _train_config(args, seed=None):
    return TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        epochs=args.epochs,
        batch_size=args.batch_size,
        subsample_n=args.subsample,
        seed=args.seed if seed is None else seed,
        augmentation=_augmentation_config(args),
        augmentation_enabled=not args.no_augment,
    )


def _train_dirs(args):
    if args.data:
        tr, te = _split_dirs(args.data)
    else:
        tr, te = None, None
    tr = Path(args.train_dir) if args.train_dir else tr
    te = Path(args.test_dir) if args.test_dir else te
    if tr is None or te is None:
        raise UsageError("give --data or both --train-dir and --test-dir")
    return tr, te


def cmd_train(args):
    tr, te = _train_dirs(args)
    config = _train_config(args)
    train_set, test_set = load_dataset(tr), load_dataset(te)

    def progress(row):
        log.info("epoch %d train %.5f test %.5f rmse %.2f cm", row["epoch"], row["train_loss"], row["test_loss"], row["test_rmse_cm"])

    history = train_samples(train_set, test_set, config, progress)
    out = Path(args.out)
    history.save(out)
    dump_json(out / "config.json", config.to_dict())
    last = history.rows[-1]
    print(f"trained {config.epochs} epochs: train {last['train_loss']:.5f}, test {last['test_loss']:.5f}, rmse {last['test_rmse_cm']:.2f} cm")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _resolved(args):
    skip = {"func", "command", "config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def cmd_eval(args):
    timings = {}
    t0 = time.perf_counter()
    if not args.ground_truth and not args.params:
        raise UsageError("give --params or --ground-truth")
    params = load_params(args.params) if args.params else None
    test_dir = Path(args.test_dir) if args.test_dir else _split_dirs(args.data)[1] if args.data else None
    if test_dir is None:
        raise UsageError("give --test-dir or --data")
    samples = load_dataset(test_dir)
    if not samples:
        raise EmptyDataset(f"no samples in {test_dir}")
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    dropped = sorted(set(args.drop_camera or []))
    errors, conf, names = [], [], []
    for d, s in zip(list_samples(test_dir), samples):
        keep = np.flatnonzero(~np.isin(s.cloud.camera_id, dropped))
        if len(keep) == 0:
            raise DataError(f"{d}: no points left after dropping cameras {dropped}")
        cloud = s.cloud.subset(keep)
        if args.ground_truth:
            field = rbf_map(s.geodesic.values[keep], args.epsilon).values
        else:
            field = forward(params, cloud)
        pred = extract_keypoints(field)
        errors.append(keypoint_errors(pred.indices, cloud, s.keypoints.positions))
        conf.append(pred.confidences.tolist())
        names.append(d.name)
    timings["predict"] = time.perf_counter() - t0
    agg, per = rmse_cm(np.array(errors))
    report = {
        "rmse_cm": {"aggregate": agg, "per_keypoint": per},
        "confidences": conf,
        "samples": names,
        "keypoint_labels": list(samples[0].keypoints.labels),
        "config": _resolved(args),
        # Wall-clock values would make reruns differ, so they are opt-in.
        "timings_s": timings if args.timings else {},
        "seed": args.seed,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_json(out, report)
    print(f"RMSE {agg:.2f} cm over {len(samples)} sample(s); per keypoint " + ", ".join(f"{v:.2f}" for v in per))
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate

ABLATION_COLUMNS = (
    "train_size", "augmentation", "seeds",
    "median_test_mse", "median_train_loss", "median_gap", "median_test_rmse_cm",
)


def ablation_rows(train_set, test_set, sizes, seeds, base: TrainConfig, progress=None):
    """Final-epoch metrics (medians over seeds) for every size x augmentation cell."""
    rows = []
    for size in sizes:
        if size < 1 or size > len(train_set):
            raise InvalidParams(f"train size {size} outside 1..{len(train_set)}")
        for aug in (True, False):
            finals = []
            for seed in seeds:
                cfg = TrainConfig(**{**base.__dict__, "seed": seed, "augmentation_enabled": aug})
                h = train_samples(train_set[:size], test_set, cfg)
                finals.append(h.rows[-1])
                if progress is not None:
                    progress(size, aug, seed, h.rows[-1])
            med = lambda key: float(np.median([r[key] for r in finals]))  # noqa: E731
            rows.append({
                "train_size": size,
                "augmentation": "on" if aug else "off",
                "seeds": " ".join(str(s) for s in seeds),
                "median_test_mse": med("test_loss"),
                "median_train_loss": med("train_loss"),
                "median_gap": float(np.median([r["test_loss"] - r["train_loss"] for r in finals])),
                "median_test_rmse_cm": med("test_rmse_cm"),
            })
    return rows


def ablation_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in ABLATION_COLUMNS])
    return buf.getvalue()


def cmd_ablate(args):
    tr, te = _train_dirs(args)
    train_set, test_set = load_dataset(tr), load_dataset(te)
    seeds = args.seeds if args.seeds else [args.seed]

    def progress(size, aug, seed, row):
        log.info("size %d aug %s seed %d: test mse %.5f rmse %.2f cm", size, aug, seed, row["test_loss"], row["test_rmse_cm"])

    rows = ablation_rows(train_set, test_set, args.train_sizes, seeds, _train_config(args), progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(ablation_csv(rows))
    print(f"wrote {len(rows)} ablation rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_training_flags(p):
    p.add_argument("--data", help="dataset root holding train/ and test/")
    p.add_argument("--train-dir")
    p.add_argument("--test-dir")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--momentum", type=float, default=TrainConfig.momentum)
    p.add_argument("--subsample", type=int, default=TrainConfig.subsample_n)
    p.add_argument("--no-augment", action="store_true", help="disable all augmentation")
    for name in AUGMENTATIONS:
        p.add_argument(f"--no-{name}", action="store_true", help=f"disable {name} augmentation")
    p.add_argument("--augmentation", type=json.loads, default=None, help="augmentation settings as JSON")


def build_parser():
    parser = argparse.ArgumentParser(prog="manikey", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file with defaults for any flag")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic train/test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=60)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quadruped", type=json.loads, default=None, help="shape parameters as JSON")
    p.add_argument("--rig", type=json.loads, default=None, help="rig configuration as JSON")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("precompute", help="attach geodesic fields to every sample")
    p.add_argument("--data", required=True, help="sample directory, split directory or dataset root")
    p.add_argument("--method", choices=METHODS, default=DIJKSTRA)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--t-scale", type=float, default=DEFAULT_T_SCALE)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--compare", type=int, default=0, metavar="N", help="rank-correlate heat and Dijkstra on N samples")
    p.add_argument("--report", help="write the comparison as JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("train", help="train the field regressor")
    _add_training_flags(p)
    p.add_argument("--out", required=True, help="output directory for history and parameters")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="predict keypoints on a test set and report RMSE")
    p.add_argument("--params")
    p.add_argument("--data")
    p.add_argument("--test-dir")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--drop-camera", type=int, action="append", metavar="ID")
    p.add_argument("--ground-truth", action="store_true", help="use the annotated fields as predictions")
    p.add_argument("--epsilon", type=float, default=10.0)
    p.add_argument("--timings", action="store_true", help="record wall-clock timings in the report")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="training-size x augmentation grid")
    _add_training_flags(p)
    p.add_argument("--train-sizes", type=_int_list, default=[50, 25, 10])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)
    return parser


def _config_defaults(parser, argv):
    """Apply ``--config`` values as subcommand defaults so that explicit flags win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = json.loads(Path(known.config).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {known.config} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in subparsers.choices.items():
        dests = {a.dest for a in sp._actions}
        flat = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict) or k.replace("-", "_") in dests}
        nested = cfg.get(name)
        if isinstance(nested, dict):
            flat.update({k.replace("-", "_"): v for k, v in nested.items()})
        unknown = {k for k in set(flat) - dests if not isinstance(cfg.get(k), dict) or k not in subparsers.choices}
        if unknown and name in argv:
            raise UsageError(f"unknown config key(s) for {name}: {', '.join(sorted(unknown))}")
        sp.set_defaults(**{k: v for k, v in flat.items() if k in dests})
        # Required flags satisfied by the config file are no longer required.
        for a in sp._actions:
            if a.dest in flat:
                a.required = False


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _config_defaults(parser, argv)
    except UsageError as exc:
        print(f"manikey: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"manikey: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"manikey: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"manikey: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
