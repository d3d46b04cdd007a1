"""Command-line interface: gen / train / eval / sweep / shift / report.

Exit codes: 0 success, 1 I/O problem, 2 configuration problem,
3 training divergence, 4 missing oracle prerequisite.
"""

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys

import numpy as np

from . import harness, nn, solvers, trainers
from .config import ConfigError, harness_config, load_config, save_effective_config
from .ioutil import atomic_write_text

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_MISSING_ORACLE = 4


def _add_common(p):
    p.add_argument("--config", required=True, help="path to a run config")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--paper-scale", action="store_true",
                   help="use full-size problem dimensions")


def build_parser():
    ap = argparse.ArgumentParser(prog="ltof",
                                 description="feature-to-solution training benchmarks")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate datasets and oracle caches")
    _add_common(p)

    for name in ("train", "eval"):
        p = sub.add_parser(name, help=f"{name} one experiment cell")
        _add_common(p)
        p.add_argument("--method", required=True, choices=harness.METHODS)
        p.add_argument("--k", type=int, default=None,
                       help="feature-map depth (default: first configured)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--dc3-eq-mode", action="store_true",
                       help="allow dc3 on the simplex problem by treating the "
                            "budget constraint as its single equality")
        p.add_argument("--force", action="store_true", help="retrain even if cached")

    p = sub.add_parser("sweep", help="run every configured cell")
    _add_common(p)
    p.add_argument("--method", default=None, choices=harness.METHODS,
                   help="restrict to one method")
    p.add_argument("--k", type=int, default=None, help="restrict to one depth")
    p.add_argument("--seed", type=int, default=None, help="restrict to one seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel cells")
    p.add_argument("--dc3-eq-mode", action="store_true")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("shift", help="distribution-shift sweep of a pretrained proxy")
    _add_common(p)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("report", help="aggregate results into a markdown table")
    _add_common(p)
    return ap


def _load(args):
    eff = load_config(args.config, paper_scale=args.paper_scale)
    if args.out:
        eff["output"]["dir"] = args.out
    out_dir = eff["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    save_effective_config(eff, os.path.join(out_dir, "effective-config.toml"))
    return eff, harness_config(eff), out_dir


def _resolve_seeds(args, eff):
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    env = os.environ.get("LTOF_SEED")
    if env is not None:
        try:
            return [int(env)]
        except ValueError:
            raise ConfigError(f"LTOF_SEED must be an integer, got {env!r}")
    return list(eff["problem"]["seeds"])


def _k_list(args, eff):
    if getattr(args, "k", None) is not None:
        return [args.k]
    return list(eff["features"]["k"])


def _check_dc3(method, cfg, args):
    if method == "dc3" and cfg["kind"] == "portfolio" \
            and not getattr(args, "dc3_eq_mode", False):
        raise ConfigError(
            "dc3 on the simplex problem needs --dc3-eq-mode "
            "(treats the budget constraint as the completed equality)")


def _file_hash(*paths):
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()[:16]


def cmd_gen(args):
    eff, cfg, out_dir = _load(args)
    for k in _k_list(args, eff):
        harness.ensure_dataset(cfg, k, out_dir)
        csv_path = os.path.join(out_dir, "datasets",
                                harness.dataset_name(cfg, k) + ".csv")
        sidecar = csv_path[:-4] + ".json"
        print(f"dataset {harness.dataset_name(cfg, k)} "
              f"hash {_file_hash(csv_path, sidecar)}")
    return EXIT_OK


def _print_report(tag, rep):
    print(f"{tag}: regret {rep['regret_pct_mean']:.4f}% "
          f"(pre-restoration {rep['regret_pct_pre_mean']:.4f}%), "
          f"violation pre {rep['violation_pre']:.3e} post {rep['violation_post']:.3e}, "
          f"epochs {rep['epochs']} (best {rep['early_stop_epoch']})")


def cmd_train(args):
    eff, cfg, out_dir = _load(args)
    _check_dc3(args.method, cfg, args)
    k = _k_list(args, eff)[0]
    seed = _resolve_seeds(args, eff)[0]
    rep = harness.run_experiment(args.method, k, seed, cfg=cfg, out_dir=out_dir,
                                 timing_samples=0, force=args.force,
                                 train_only=True)
    _print_report(f"trained {args.method} k={k} seed={seed}", rep)
    return EXIT_OK


def cmd_eval(args):
    eff, cfg, out_dir = _load(args)
    _check_dc3(args.method, cfg, args)
    k = _k_list(args, eff)[0]
    seed = _resolve_seeds(args, eff)[0]
    rep = harness.run_experiment(args.method, k, seed, cfg=cfg, out_dir=out_dir,
                                 timing_samples=eff["output"]["timing_samples"],
                                 force=args.force)
    _print_report(f"eval {args.method} k={k} seed={seed}", rep)
    if not np.isnan(rep["it_ms"]):
        line = f"  timing: inference {rep['it_ms']:.3f} ms"
        if not np.isnan(rep["fct_ms"]):
            line += f", restoration {rep['fct_ms']:.3f} ms"
        if not np.isnan(rep["et_ms"]):
            line += f", solver {rep['et_ms']:.3f} ms"
        if not np.isnan(rep["oracle_ms"]):
            line += f", oracle {rep['oracle_ms']:.3f} ms"
        print(line)
    return EXIT_OK


def _sweep_methods(cfg, args):
    if args.method:
        _check_dc3(args.method, cfg, args)
        return [args.method]
    if cfg["kind"] == "portfolio":
        methods = ["two-stage", "ld", "pdl", "epo-proxy"]
        if args.dc3_eq_mode:
            methods.insert(3, "dc3")
        return methods
    return ["two-stage", "ld", "pdl", "dc3"]


def cmd_sweep(args):
    eff, cfg, out_dir = _load(args)
    if cfg["kind"] == "toy2d":
        raise ConfigError("sweep is not defined for the 2-d illustration; use shift")
    methods = _sweep_methods(cfg, args)
    ks = _k_list(args, eff)
    seeds = _resolve_seeds(args, eff)
    timing = eff["output"]["timing_samples"]
    cells = [(m, k, s) for k in ks for m in methods for s in seeds]

    # datasets are shared across cells; build them up front so parallel
    # workers never race on the files
    for k in ks:
        harness.ensure_dataset(cfg, k, out_dir)

    results_path = os.path.join(out_dir, "results.csv")
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as ex:
            futs = {ex.submit(harness.run_experiment, m, k, s, cfg=cfg,
                              out_dir=out_dir, timing_samples=timing,
                              force=args.force, write_row=False): (m, k, s)
                    for (m, k, s) in cells}
            for fut in concurrent.futures.as_completed(futs):
                m, k, s = futs[fut]
                rep = fut.result()
                harness.upsert_result(results_path, harness._report_row(rep))
                print(f"done {m} k={k} seed={s}: {rep['regret_pct_mean']:.4f}%")
    else:
        for (m, k, s) in cells:
            rep = harness.run_experiment(m, k, s, cfg=cfg, out_dir=out_dir,
                                         timing_samples=timing, force=args.force)
            print(f"done {m} k={k} seed={s}: {rep['regret_pct_mean']:.4f}%")

    rows = harness.load_results(results_path)
    summary = harness.summarize_results(rows)
    _write_summary(os.path.join(out_dir, "summary.csv"), summary)
    print(harness.render_report(rows))
    return EXIT_OK


def _write_summary(path, summary):
    cols = ("method", "k", "n_seeds", "regret_pct_mean", "regret_pct_std",
            "violation_pre", "violation_post", "it_ms", "fct_ms", "et_ms")
    lines = [",".join(cols)]
    for s in summary:
        lines.append(",".join(
            "" if isinstance(s[c], float) and np.isnan(s[c])
            else ("%.12g" % s[c] if isinstance(s[c], float) else str(s[c]))
            for c in cols))
    atomic_write_text(path, "\n".join(lines) + "\n")


def cmd_shift(args):
    eff, cfg, out_dir = _load(args)
    if cfg["kind"] != "toy2d":
        raise ConfigError("shift study is defined on the 2-d illustration problem")
    seed = _resolve_seeds(args, eff)[0]
    problem, dataset = harness.ensure_dataset(cfg, 0, out_dir)
    tr = dataset.train_idx
    proxy, history = trainers.pretrain_proxy(
        problem, dataset.zeta[tr], cfg.get("proxy_method", "pdl"), seed,
        x_star=dataset.x_star[tr], f_star=dataset.f_star[tr],
        hidden_width=cfg["hidden_width"], n_hidden=eff["epo"]["layers"],
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        dropout=cfg["dropout"], batchnorm=cfg["batchnorm"],
        patience=cfg["patience"])
    sigma = (cfg["zeta_high"] - cfg["zeta_low"]) / np.sqrt(12.0)
    rows = harness.shift_sweep(proxy, problem, dataset.zeta,
                               cfg["shift_direction"], sigma, cfg["shifts"],
                               harness.oracle_solve_fn(problem, cfg))
    shift_dir = os.path.join(out_dir, "shift")
    os.makedirs(shift_dir, exist_ok=True)
    nn.save_checkpoint(proxy, os.path.join(shift_dir, "proxy.json"))
    history.save_csv(os.path.join(shift_dir, "history.csv"))
    cols = ("shift", "regret_mean", "regret_pct_mean", "violation_pre")
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join("%.12g" % r[c] for c in cols))
        print(f"shift {r['shift']:.2f}: regret {r['regret_pct_mean']:.4f}% "
              f"violation {r['violation_pre']:.3e}")
    atomic_write_text(os.path.join(shift_dir, "shift.csv"), "\n".join(lines) + "\n")
    return EXIT_OK


def _collect_pre_restoration(out_dir, kind):
    """Mean pre-restoration percentage regret per (method, k) from cell files."""
    cells_dir = os.path.join(out_dir, "cells")
    if not os.path.isdir(cells_dir):
        return {}
    acc = {}
    for name in sorted(os.listdir(cells_dir)):
        if not name.startswith(kind + "_"):
            continue
        path = os.path.join(cells_dir, name, "eval.json")
        if not os.path.exists(path):
            continue
        with open(path) as fh:
            rep = json.load(fh)["report"]
        key = (rep["method"], rep["k"])
        acc.setdefault(key, []).append(rep["regret_pct_pre_mean"])
    return {key: float(np.mean(v)) for key, v in acc.items()}


def cmd_report(args):
    eff, cfg, out_dir = _load(args)
    results_path = os.path.join(out_dir, "results.csv")
    if not os.path.exists(results_path):
        raise FileNotFoundError(f"no results at {results_path}; run sweep first")
    rows = harness.load_results(results_path)
    pre = _collect_pre_restoration(out_dir, cfg["kind"])
    text = _markdown_report(rows, pre)
    atomic_write_text(os.path.join(out_dir, "report.md"), text)
    print(text)
    return EXIT_OK


def _markdown_report(rows, pre):
    summary = harness.summarize_results(rows)
    ks = sorted({s["k"] for s in summary})
    methods = []
    for s in summary:
        if s["method"] not in methods:
            methods.append(s["method"])
    by = {(s["method"], s["k"]): s for s in summary}

    def cell(m, k, field, fmt):
        s = by.get((m, k))
        return "-" if s is None else fmt % s[field]

    lines = ["# Results", "", "## Percentage regret (mean over seeds)", ""]
    lines.append("| method | " + " | ".join(f"k={k}" for k in ks) + " |")
    lines.append("|---" * (len(ks) + 1) + "|")
    for m in methods:
        vals = []
        for k in ks:
            s = by.get((m, k))
            vals.append("-" if s is None else
                        f"{s['regret_pct_mean']:.4f} ± {s['regret_pct_std']:.4f}")
        lines.append(f"| {m} | " + " | ".join(vals) + " |")
        if any((m, k) in pre for k in ks):
            vals = ["-" if (m, k) not in pre else f"{pre[(m, k)]:.4f}" for k in ks]
            lines.append(f"| {m} (*) | " + " | ".join(vals) + " |")
    lines += ["", "(*) denotes before restoration.", "",
              "## Mean constraint violation (pre-restoration)", ""]
    lines.append("| method | " + " | ".join(f"k={k}" for k in ks) + " |")
    lines.append("|---" * (len(ks) + 1) + "|")
    for m in methods:
        lines.append(f"| {m} | " + " | ".join(
            cell(m, k, "violation_pre", "%.3e") for k in ks) + " |")
    lines += ["", "## Median per-sample time (ms)", ""]
    lines.append("| method | inference | restoration | solver |")
    lines.append("|---|---|---|---|")

    def nmean(vals):
        good = [v for v in vals if not np.isnan(v)]
        return float(np.mean(good)) if good else np.nan

    for m in methods:
        agg = [s for s in summary if s["method"] == m]
        it = nmean([a["it_ms"] for a in agg])
        fct = nmean([a["fct_ms"] for a in agg])
        et = nmean([a["et_ms"] for a in agg])
        fmt = lambda v: "-" if np.isnan(v) else f"{v:.3f}"
        lines.append(f"| {m} | {fmt(it)} | {fmt(fct)} | {fmt(et)} |")
    return "\n".join(lines) + "\n"


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
             "sweep": cmd_sweep, "shift": cmd_shift, "report": cmd_report}


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except nn.DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except trainers.MissingOracleError as e:
        print(f"missing oracle prerequisite: {e}", file=sys.stderr)
        return EXIT_MISSING_ORACLE
    except (OSError, json.JSONDecodeError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
