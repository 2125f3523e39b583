"""``fss`` command line: generate, train, eval, sweep, attention, embed, baseline-pcak, gradcheck.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DatasetFormatError,
    SplitSpec,
    builtin_templates,
    generate_synthetic,
    load_dataset,
    normalize_dataset,
    save_dataset,
    split,
)
from .episodes import sample_episode
from .model import FssModel, attention_maps
from .tensor import NumericError, RngStream

log = logging.getLogger("fss")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_PROPORTIONS = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _proportion(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"proportion must lie in (0, 1], got {text}")
    return v


def _proportion_list(text):
    try:
        return [_proportion(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad proportion list {text!r}") from None


def _add_train_flags(p):
    p.add_argument("--ways", type=_positive_int, default=2)
    p.add_argument("--shots", type=_positive_int, default=2)
    p.add_argument("--queries", type=_positive_int, default=1)
    p.add_argument("--epochs", type=_positive_int, default=50)
    p.add_argument("--batch", type=_positive_int, default=50, help="tasks per batch")
    p.add_argument("--batches-per-epoch", type=_positive_int, default=50)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--clip-norm", type=float, default=1.0, help="gradient-norm ceiling; 0 disables")
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--val-tasks", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")


def build_parser():
    parser = _Parser(prog="fss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fss {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    parser.add_argument("--workers", type=_positive_int, default=None,
                        help="cap numeric threads (default: $FSS_WORKERS)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset (CSV + manifest)")
    p.add_argument("--bank", choices=("easy", "difficult"), default="easy")
    p.add_argument("--per-class", type=_positive_int, default=300)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="meta-train a model on a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--proportion", type=_proportion, default=1.0)
    _add_train_flags(p)
    p.add_argument("--out", type=Path, default=Path("model.ckpt"))
    p.add_argument("--history", type=Path, default=None, help="default: <out>.history.csv")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on sampled episodes")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--tasks", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--record-time", action="store_true", help="fill wall_time_s in the report")

    p = sub.add_parser("sweep", help="train/test one model per data proportion")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--proportions", type=_proportion_list, default=_proportion_list(DEFAULT_PROPORTIONS))
    _add_train_flags(p)
    p.add_argument("--tasks", type=_positive_int, default=1000)
    p.add_argument("--out", type=Path, default=Path("sweep"))
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("attention", help="export attention maps for one test episode")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("embed", help="export 128-d embedding features with labels")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--n", type=_positive_int, default=500)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("baseline-pcak", help="PCA (3 components) + k-means baseline")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=_positive_int, default=10)
    p.add_argument("--report", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seeds", type=_positive_int, default=20)
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _now():
    return datetime.now(timezone.utc)


def _manifest(output, args, outputs, started, t0):
    from .reports import write_run_manifest

    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    return write_run_manifest(
        output, args.command, cfg, getattr(args, "seed", None), outputs, started, time.perf_counter() - t0
    )


def _train_config(args):
    from .train import TrainConfig

    try:
        return _build_train_config(TrainConfig, args)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _build_train_config(TrainConfig, args):
    return TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        tasks_per_batch=args.batch,
        batches_per_epoch=args.batches_per_epoch,
        seed=args.seed,
        ways=args.ways,
        shots=args.shots,
        queries=args.queries,
        val_tasks=args.val_tasks,
        clip_norm=args.clip_norm,
        weight_decay=args.weight_decay,
    )


def cmd_generate(args):
    started, t0 = _now(), time.perf_counter()
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    ds = generate_synthetic(
        builtin_templates(args.bank), args.per_class, args.sigma, args.seed,
        name=f"{args.bank}_{args.sigma:g}",
    )
    out = save_dataset(ds, args.out)
    _manifest(out, args, [out, out.with_suffix(".json")], started, t0)
    print(f"wrote {len(ds)} windows ({ds.n_classes} classes, sigma_n={ds.sigma_n:g}) to {out}")


def cmd_train(args):
    from .reports import write_history_csv
    from .train import build_model, meta_train, prepare_pools

    started, t0 = _now(), time.perf_counter()
    cfg = _train_config(args)
    ds = load_dataset(args.data)
    pools = prepare_pools(ds, args.proportion, args.seed, min_per_class=args.shots + args.queries)
    model = build_model(pools, cfg, args.dtype)
    mcfg = model.config
    print(
        f"proportion={args.proportion:g} n_train={pools.n_d} f={mcfg.f} "
        f"dropout={mcfg.dropout_rate:.2f} Z={mcfg.Z} params={model.count_parameters()}"
    )
    history = meta_train(model, pools.train, pools.val, cfg)
    extra = {"proportion": args.proportion, "split_seed": args.seed, "n_train": pools.n_d,
             "n_min": pools.n_min, "n_max": pools.n_max}
    ckpt = model.save(args.out, extra=extra)
    hist_path = args.history or args.out.with_name(args.out.name + ".history.csv")
    write_history_csv(history, hist_path)
    outputs = [ckpt, ckpt.with_name(ckpt.name + ".bin"), hist_path]
    if not args.no_plots:
        from .plots import plot_history

        outputs.append(plot_history(history, hist_path.with_suffix(".png")))
    _manifest(ckpt, args, outputs, started, t0)
    last = history[-1]
    print(f"final train_loss={last['train_loss']:.4f} val_accuracy={last['val_accuracy']:.4f}; wrote {ckpt}")


def _checkpoint_split(model_path, data_path, which):
    """The split of ``data_path`` that matches the checkpoint's training split."""
    manifest = json.loads(Path(model_path).read_text(encoding="utf-8"))
    seed = manifest.get("extra", {}).get("split_seed", 0)
    ds = normalize_dataset(load_dataset(data_path))
    if which == "all":
        return ds
    train, val, test = split(ds, SplitSpec(seed=seed))
    return {"train": train, "val": val, "test": test}[which]


def cmd_eval(args):
    from .reports import write_report_json
    from .train import evaluate

    started, t0 = _now(), time.perf_counter()
    model = FssModel.load(args.model)
    data = _checkpoint_split(args.model, args.data, args.split)
    rep = evaluate(model, data, args.tasks, RngStream(args.seed))
    extra = json.loads(Path(args.model).read_text(encoding="utf-8")).get("extra", {})
    rep.proportion = extra.get("proportion")
    rep.extra.update(f=model.config.f, dropout=model.config.dropout_rate, params=model.count_parameters())
    wall = time.perf_counter() - t0
    out = write_report_json(rep, args.report, wall if args.record_time else None)
    _manifest(out, args, [out], started, t0)
    print(f"accuracy={rep.accuracy:.4f} precision={rep.precision:.4f} recall={rep.recall:.4f} over {args.tasks} tasks")


def cmd_sweep(args):
    from .reports import write_json, write_sweep_csv
    from .train import proportion_sweep

    started, t0 = _now(), time.perf_counter()
    cfg = _train_config(args)
    ds = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    res = proportion_sweep(ds, args.proportions, cfg, eval_tasks=args.tasks, dtype=args.dtype)
    csv_path = write_sweep_csv(res.rows, args.out / "sweep.csv")
    fit_path = write_json({"slope": res.slope, "intercept": res.intercept}, args.out / "fit.json")
    outputs = [csv_path, fit_path]
    if not args.no_plots:
        from .plots import plot_sweep

        outputs.append(plot_sweep(res.rows, res.slope, res.intercept, args.out / "sweep.png"))
    _manifest(args.out, args, outputs, started, t0)
    for r in res.rows:
        print(f"{r['proportion']:.2f}  f={r['f']:<3d} dropout={r['dropout']:.2f}  params={r['params']:>9d}  acc={r['accuracy']:.4f}")
    print(f"slope={res.slope:+.5f}")


def cmd_attention(args):
    from .reports import write_matrix_csv

    started, t0 = _now(), time.perf_counter()
    model = FssModel.load(args.model)
    data = _checkpoint_split(args.model, args.data, "test")
    cfg = model.config
    ep = sample_episode(data, cfg.ways, cfg.shots, cfg.queries, RngStream(args.seed))
    maps = attention_maps(model, ep)
    args.out.mkdir(parents=True, exist_ok=True)
    windows = ep.windows()
    labels = np.concatenate([ep.class_map[ep.support_labels], ep.class_map[ep.query_truth]])
    outputs = [write_matrix_csv(windows, args.out / "waveforms.csv")]
    (args.out / "labels.csv").write_text("\n".join(str(int(v)) for v in labels) + "\n")
    outputs.append(args.out / "labels.csv")
    for i, m in enumerate(maps["embedding"]):
        outputs.append(write_matrix_csv(m, args.out / f"embedding_spike{i}.csv"))
        if not args.no_plots:
            from .plots import plot_attention

            outputs.append(plot_attention(m, windows[i], args.out / f"embedding_spike{i}.png",
                                          title=f"spike {i} (class {labels[i]})"))
    for name in sorted(k for k in maps if k.startswith("ra")):
        outputs.append(write_matrix_csv(maps[name], args.out / f"{name}.csv"))
    _manifest(args.out, args, outputs, started, t0)
    print(f"wrote {len(outputs)} files to {args.out}")


def cmd_embed(args):
    from .reports import write_embeddings_csv
    from .train import export_embeddings

    started, t0 = _now(), time.perf_counter()
    model = FssModel.load(args.model)
    data = _checkpoint_split(args.model, args.data, "test")
    feats, labels = export_embeddings(model, data, args.n)
    out = write_embeddings_csv(feats, labels, args.out)
    outputs = [out]
    if not args.no_plots:
        from .plots import plot_embeddings

        outputs.append(plot_embeddings(feats, labels, Path(args.out).with_suffix(".png")))
    _manifest(out, args, outputs, started, t0)
    print(f"wrote {len(labels)} x {feats.shape[1]} features to {out}")


def cmd_baseline_pcak(args):
    from .pcak import pcak_sort
    from .reports import write_report_json

    started, t0 = _now(), time.perf_counter()
    ds = normalize_dataset(load_dataset(args.data))
    rep = pcak_sort(ds, seed=args.seed, restarts=args.restarts)
    rep.extra.update(dataset=ds.name, sigma_n=ds.sigma_n)
    out = write_report_json(rep, args.report)
    _manifest(out, args, [out], started, t0)
    print(f"pca-k accuracy={rep.accuracy:.4f} precision={rep.precision:.4f} recall={rep.recall:.4f}")


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    results = run_suite(args.tolerance, seeds=range(args.seeds))
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.name}: relative error {r.max_rel_error:.3e}")
    status = "PASS" if not failed else "FAIL"
    print(f"{status} {len(results) - len(failed)}/{len(results)} checks; "
          f"max relative error {worst.max_rel_error:.3e} ({worst.name}), tolerance {args.tolerance:g}")
    return EXIT_OK if not failed else EXIT_NUMERIC


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "attention": cmd_attention,
    "embed": cmd_embed,
    "baseline-pcak": cmd_baseline_pcak,
    "gradcheck": cmd_gradcheck,
}


def _thread_limit(workers):
    if workers is None:
        env = os.environ.get("FSS_WORKERS")
        workers = int(env) if env and env.isdigit() and int(env) > 0 else None
    if workers is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=workers)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        with _thread_limit(args.workers):
            code = COMMANDS[args.command](args)
    except UsageError as e:
        print(f"fss {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"fss {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, ValueError, OSError) as e:
        print(f"fss {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
