"""Command-line experiment runner.

Verbs:
  run <config>               train the configured models x seeds, evaluate
                             clean/fgsm/pgd, write results.csv + artifacts
  report <results-dir>       aggregate results.csv to mean/std per cell
  attack <checkpoint> <csv>  attack a saved model on a dataset dump
  codebook-stats <csv>       print separation statistics of a codebook
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import ATTACK_KINDS, AttackConfig, evaluate
from .codebook import Codebook, load_codebook, save_codebook, separation_report
from .config import ConfigError, load_config
from .data import (Dataset, load_dataset_csv, load_idx, make_blobs,
                   make_texture_images, replicate_channels, split)
from .network import load_checkpoint, save_checkpoint
from .training import (MODEL_KIND_ECOC, TrainedModel, run_pipeline)

CONDITIONS = ("clean", "fgsm", "pgd")
_CONDITION_ATTACK = {"clean": "none", "fgsm": "fgsm", "pgd": "pgd"}

RESULTS_HEADER = "model,seed,condition,accuracy,epochs,wall_ms"


def build_dataset(spec):
    """Materialize the dataset a config describes."""
    if spec.kind == "blobs":
        ds = make_blobs(spec.blobs_classes, spec.blobs_per_class, spec.blobs_dim,
                        spec.blobs_spread, spec.seed,
                        center_span=spec.blobs_center_span)
    elif spec.kind == "textures":
        ds = make_texture_images(spec.textures_classes, spec.textures_per_class,
                                 spec.seed, size=spec.textures_size)
    elif spec.kind == "idx":
        ds = load_idx(spec.idx_images, spec.idx_labels)
    else:
        ds = load_dataset_csv(spec.csv_path)
    if spec.replicate_channels and ds.inputs.ndim == 4:
        ds = Dataset(replicate_channels(ds.inputs), ds.labels, ds.num_classes)
    if spec.limit and spec.limit < len(ds):
        order = np.random.default_rng(spec.seed).permutation(len(ds))
        ds = ds.subset(order[:spec.limit])
    return ds


def _evaluate_conditions(model, test_split, attack_cfg, seed):
    accs = {}
    for condition in CONDITIONS:
        accs[condition] = evaluate(model, test_split,
                                   attack=_CONDITION_ATTACK[condition],
                                   cfg=attack_cfg, seed=seed)
    return accs


def _run_single(model_name, seed, net_cfg, train_cfg, splits, attack_cfg,
                out_dir, fixed_book_rows):
    """One (model, seed) job: train, save artifacts, evaluate all conditions.
    Top-level so a process pool can pickle it."""
    run_dir = Path(out_dir) / f"{model_name}_seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = replace(train_cfg, seed=seed)
    fixed_book = Codebook(fixed_book_rows) if fixed_book_rows is not None else None
    result = run_pipeline(model_name, net_cfg, cfg, splits,
                          fixed_book=fixed_book, out_dir=run_dir)

    kind = result.model.kind
    save_checkpoint(result.model.params, run_dir / "model_best.npz",
                    extra={"model": model_name, "kind": kind, "seed": seed})
    final_book = result.reports["finetune"].final_codebook
    if result.model.book is not None:
        save_codebook(result.model.book, run_dir / "codebook_best.csv")
    if final_book is not None:
        save_codebook(final_book, run_dir / "codebook_final.csv")

    accs = _evaluate_conditions(result.model, splits["test"], attack_cfg, seed)
    rows = [(model_name, seed, cond, accs[cond], result.epochs_total,
             result.wall_ms) for cond in CONDITIONS]
    return rows, (final_book.rows if final_book is not None else None)


def run_experiment(cfg, output_dir, workers=None):
    """Execute every (model, seed) combination and write results.csv.

    acl-tfc consumes the final codebook of the same-seed acl-cfpc run unless
    the config names an external codebook file, so cfpc jobs run first.
    """
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = workers or cfg.workers

    dataset = build_dataset(cfg.dataset)
    splits = split(dataset, cfg.split_ratios, seed=cfg.dataset.seed)
    net_cfg = cfg.net_config(dataset.sample_shape, dataset.num_classes)

    first_wave = [(m, s) for m in cfg.models if m != "acl-tfc" for s in cfg.seeds]
    rows = []
    cfpc_books = {}

    def submit_all(jobs, books):
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_single, m, s, net_cfg, cfg.train,
                                       splits, cfg.attack, str(out_dir),
                                       books.get(s)) for m, s in jobs]
                return [f.result() for f in futures]
        return [_run_single(m, s, net_cfg, cfg.train, splits, cfg.attack,
                            str(out_dir), books.get(s)) for m, s in jobs]

    for (model_name, seed), (job_rows, book_rows) in zip(
            first_wave, submit_all(first_wave, {})):
        rows.extend(job_rows)
        if model_name == "acl-cfpc" and book_rows is not None:
            cfpc_books[seed] = book_rows

    if "acl-tfc" in cfg.models:
        if cfg.tfc_codebook:
            fixed = load_codebook(cfg.tfc_codebook)
            books = {s: fixed.rows for s in cfg.seeds}
        else:
            books = cfpc_books
            missing = [s for s in cfg.seeds if s not in books]
            if missing:
                raise ConfigError(
                    f"no cfpc codebook available for seeds {missing}")
        tfc_jobs = [("acl-tfc", s) for s in cfg.seeds]
        for (_, _), (job_rows, _) in zip(tfc_jobs, submit_all(tfc_jobs, books)):
            rows.extend(job_rows)

    model_order = {m: i for i, m in enumerate(cfg.models)}
    cond_order = {c: i for i, c in enumerate(CONDITIONS)}
    rows.sort(key=lambda r: (model_order[r[0]], r[1], cond_order[r[2]]))
    results_path = out_dir / "results.csv"
    with open(results_path, "w", encoding="utf-8") as fh:
        fh.write(RESULTS_HEADER + "\n")
        for model_name, seed, cond, acc, epochs, wall in rows:
            fh.write(f"{model_name},{seed},{cond},{repr(float(acc))},"
                     f"{epochs},{repr(float(wall))}\n")
    return results_path


def read_results(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != RESULTS_HEADER:
            raise ConfigError(f"unexpected results header in {path}: {header!r}")
        for line in fh:
            model, seed, cond, acc, epochs, wall = line.strip().split(",")
            rows.append((model, int(seed), cond, float(acc), int(epochs),
                         float(wall)))
    return rows


def summarize_results(rows):
    """mean/std accuracy per (model, condition); single seeds get std 0."""
    cells = {}
    for model, _seed, cond, acc, _epochs, _wall in rows:
        cells.setdefault((model, cond), []).append(acc)
    summary = {}
    for key, accs in cells.items():
        arr = np.asarray(accs)
        summary[key] = (float(arr.mean()), float(arr.std()), len(accs))
    return summary


def format_summary_table(summary, models=None):
    models = models or sorted({m for m, _ in summary})
    lines = [f"{'model':<12}" + "".join(f"{c:>20}" for c in CONDITIONS)]
    for model in models:
        cells = []
        for cond in CONDITIONS:
            if (model, cond) in summary:
                mean, std, _ = summary[(model, cond)]
                cells.append(f"{mean * 100:6.2f}% ± {std * 100:5.2f}%")
            else:
                cells.append("-")
        lines.append(f"{model:<12}" + "".join(f"{c:>20}" for c in cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_run(args):
    cfg = load_config(args.config)
    output = args.output or cfg.output_dir or "results"
    path = run_experiment(cfg, output, workers=args.workers)
    print(f"wrote {path}")
    return 0


def cmd_report(args):
    results_path = Path(args.results_dir) / "results.csv"
    if not results_path.exists():
        print(f"no results.csv under {args.results_dir}", file=sys.stderr)
        return 1
    rows = read_results(results_path)
    summary = summarize_results(rows)
    seen = []
    for model, *_ in rows:
        if model not in seen:
            seen.append(model)
    table = format_summary_table(summary, models=seen)
    print(table)
    summary_path = Path(args.results_dir) / "summary.csv"
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("model,condition,mean_accuracy,std_accuracy,seeds\n")
        for model in seen:
            for cond in CONDITIONS:
                if (model, cond) in summary:
                    mean, std, n = summary[(model, cond)]
                    fh.write(f"{model},{cond},{repr(mean)},{repr(std)},{n}\n")
    print(f"wrote {summary_path}")
    return 0


def cmd_attack(args):
    params, extra = load_checkpoint(args.checkpoint)
    kind = extra.get("kind", "baseline")
    book = None
    if args.codebook:
        book = load_codebook(args.codebook)
    elif kind == MODEL_KIND_ECOC:
        sibling = Path(args.checkpoint).parent / "codebook_best.csv"
        if sibling.exists():
            book = load_codebook(sibling)
        else:
            print("this checkpoint decodes against a codebook; pass --codebook",
                  file=sys.stderr)
            return 1
    model = TrainedModel(kind, params, book)
    dataset = load_dataset_csv(args.dataset)
    cfg = AttackConfig(epsilon=args.epsilon, pgd_steps=args.steps,
                       pgd_alpha=args.alpha, random_start=not args.no_random_start)
    clean = evaluate(model, dataset, attack="none")
    attacked = evaluate(model, dataset, attack=args.attack, cfg=cfg,
                        seed=args.seed, dump_path=args.dump)
    print(f"clean accuracy:    {clean:.4f}")
    print(f"{args.attack} accuracy:     {attacked:.4f} "
          f"(epsilon={cfg.epsilon:.6g}, steps={cfg.pgd_steps})")
    if args.dump:
        print(f"adversarial dump: {args.dump}")
    return 0


def cmd_codebook_stats(args):
    book = load_codebook(args.codebook)
    report = separation_report(book)
    print(f"classes (K):                 {book.num_classes}")
    print(f"code length (n):             {book.code_length}")
    for key, value in report.as_dict().items():
        print(f"{key + ':':<29}{value}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ecoclearn",
        description="Learned ECOC codebooks with adversarial robustness evaluation")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--output", default="", help="results directory")
    p_run.add_argument("--workers", type=int, default=None,
                       help="parallel (model, seed) jobs")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="summarize a results directory")
    p_rep.add_argument("results_dir")
    p_rep.set_defaults(func=cmd_report)

    p_att = sub.add_parser("attack", help="attack a saved checkpoint")
    p_att.add_argument("checkpoint")
    p_att.add_argument("dataset", help="dataset CSV dump")
    p_att.add_argument("--attack", choices=[a for a in ATTACK_KINDS if a != "none"],
                       default="fgsm")
    p_att.add_argument("--codebook", default="")
    p_att.add_argument("--epsilon", type=float, default=8.0 / 255.0)
    p_att.add_argument("--alpha", type=float, default=2.0 / 255.0)
    p_att.add_argument("--steps", type=int, default=10)
    p_att.add_argument("--seed", type=int, default=0)
    p_att.add_argument("--no-random-start", action="store_true")
    p_att.add_argument("--dump", default=None, help="write adversarial CSV here")
    p_att.set_defaults(func=cmd_attack)

    p_cb = sub.add_parser("codebook-stats", help="separation statistics of a codebook CSV")
    p_cb.add_argument("codebook")
    p_cb.set_defaults(func=cmd_codebook_stats)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
