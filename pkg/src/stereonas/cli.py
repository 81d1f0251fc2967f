"""Command-line pipeline tying the modules into end-to-end workflows.

Subcommands: gen-data, search, train, bohb, fanova, report.  Each is
reproducible from a config file plus seed, and every emitted artifact
carries the resolved config (JSON key, CSV comment line, or SVG desc).
Exit codes: 0 success, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .bilevel import (AdamConfig, SearchTrainConfig, SgdConfig, TrainSchedule,
                      TrainValSplit, snapshot_restart, train_derived,
                      train_search, write_history)
from .bohb import (Dim, HyperparamSpace, hyperband_brackets,
                   incumbent_trajectory, make_synthetic_objective,
                   read_trials, run_bohb, space_from_json, space_to_json)
from .cellspace import (CellKind, CellTemplate, discretize,
                        genotype_from_json, genotype_to_json,
                        sample_random_genotype)
from .config import RunConfig, config_to_doc, default_config, load_config
from .errors import ConfigError, DataError, ParseError
from .fanova import curves_to_csv, fit_forest, importance, report_to_json
from .netbuilder import (DerivedNetConfig, SearchNetConfig, StackConfig,
                         build_stack, save_checkpoint)
from .stereodata import (evaluate, generate_dataset, load_dataset,
                         save_dataset, write_eval_csv)
from .svgplot import PALETTE, Figure
from .tensor import Tensor


# ---------------------------------------------------------------------------
# Config plumbing and artifact provenance


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return default_config(getattr(args, "profile", "toy"))


def _override(cfg: RunConfig, section: str, **updates) -> RunConfig:
    updates = {k: v for k, v in updates.items() if v is not None}
    if not updates:
        return cfg
    part = dataclasses.replace(getattr(cfg, section), **updates)
    return dataclasses.replace(cfg, **{section: part})


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _config_comment(cfg: RunConfig) -> str:
    return "# config: " + json.dumps(config_to_doc(cfg), sort_keys=True) + "\n"


def _write_json(path, doc: dict, cfg: RunConfig) -> None:
    doc = dict(doc)
    doc["config"] = config_to_doc(cfg)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_run_config(out: str, cfg: RunConfig) -> None:
    with open(os.path.join(out, "run_config.json"), "w") as fh:
        json.dump(config_to_doc(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepend_comment(path, cfg: RunConfig) -> None:
    with open(path) as fh:
        body = fh.read()
    with open(path, "w") as fh:
        fh.write(_config_comment(cfg))
        fh.write(body)


def _write_csv(path, header, rows, cfg: RunConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_config_comment(cfg))
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    cfg = _override(cfg, "data", n=args.n, height=args.height,
                    width=args.width, max_disp=args.max_disp,
                    seed=args.seed, channels=args.channels)
    dc = cfg.data
    ds = generate_dataset(dc.n, dc.height, dc.width, dc.max_disp, dc.seed,
                          channels=dc.channels)
    out = _ensure_out(args.out)
    save_dataset(ds, out)
    _write_run_config(out, cfg)
    print(f"wrote {dc.n} samples ({dc.height}x{dc.width}, "
          f"max disparity {dc.max_disp:g}, seed {dc.seed}) to {out}")
    return 0


# ---------------------------------------------------------------------------
# search


def cmd_search(args) -> int:
    cfg = _resolve_config(args)
    cfg = _override(cfg, "search", seed=args.seed)
    sc = cfg.search
    out = _ensure_out(args.out)
    ds = load_dataset(args.data)

    if args.random_cells:
        templates = {kind: CellTemplate(kind, sc.num_intermediate)
                     for kind in (CellKind.NORMAL, CellKind.REDUCTION,
                                  CellKind.UPSAMPLING)}
        for i in range(args.random_cells):
            g = sample_random_genotype(templates, seed=sc.seed + i, k=2,
                                       meta={"source": "random",
                                             "seed": sc.seed + i})
            _write_json(os.path.join(out, f"random_{i:02d}.json"),
                        json.loads(genotype_to_json(g)), cfg)
        _write_run_config(out, cfg)
        print(f"wrote {args.random_cells} random genotypes to {out}")
        return 0

    net_cfg = SearchNetConfig(
        c_init=sc.c_init, num_encoder_cells=sc.num_encoder_cells,
        num_decoder_cells=sc.num_decoder_cells,
        num_intermediate=sc.num_intermediate,
        in_channels=ds.manifest.channels, max_disp=sc.max_disp)
    train_cfg = SearchTrainConfig(
        net=net_cfg, warm_start_iters=sc.warm_start_iters,
        alternating_iters=sc.alternating_iters, batch_size=sc.batch_size,
        sgd=SgdConfig(lr_base=sc.w_lr, lr_min=sc.w_lr_min,
                      momentum=sc.w_momentum, weight_decay=sc.w_weight_decay),
        adam=AdamConfig(lr=sc.alpha_lr, weight_decay=sc.alpha_weight_decay),
        tau_start=sc.tau_start, tau_end=sc.tau_end)
    result = train_search(train_cfg, ds.search_split(), seed=sc.seed)

    genotype = discretize(result.alphas, k=2, meta={"seed": sc.seed})
    _write_json(os.path.join(out, "genotype.json"),
                json.loads(genotype_to_json(genotype)), cfg)
    _write_json(os.path.join(out, "alphas.json"),
                {"temperature": result.alphas.temperature,
                 "alphas": result.alphas.snapshot()}, cfg)
    history_path = os.path.join(out, "history.csv")
    write_history(history_path, result.history)
    _prepend_comment(history_path, cfg)
    _write_run_config(out, cfg)
    print(f"search done: validation EPE {result.val_epe_start:.4f} -> "
          f"{result.val_epe_end:.4f}; artifacts in {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _stack_params(stack) -> int:
    return sum(p.data.size for net in stack.nets for p in net.params())


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    stack = args.stack if args.stack is not None else cfg.train.stack
    if args.c_init is not None:
        c_inits = (args.c_init,) * len(stack)
    elif len(cfg.train.c_inits) != len(stack):
        # --stack changed the depth; repeat the base width
        c_inits = (cfg.train.c_inits[0],) * len(stack)
    else:
        c_inits = None
    cfg = _override(cfg, "train", stack=args.stack, c_inits=c_inits,
                    iters=args.iters, seed=args.seed,
                    freeze_previous=args.freeze_previous)
    tc = cfg.train
    out = _ensure_out(args.out)

    with open(args.genotype) as fh:
        genotype = genotype_from_json(fh.read())
    ds = load_dataset(args.data)
    split = TrainValSplit(ds.arrays("search_train"), ds.arrays("test"))

    def build(c_inits, seed):
        base = DerivedNetConfig(
            c_init=c_inits[0], num_encoder_cells=tc.num_encoder_cells,
            num_decoder_cells=tc.num_decoder_cells,
            in_channels=ds.manifest.channels, max_disp=tc.max_disp)
        stack_cfg = StackConfig(roles=tuple(tc.stack),
                                freeze_previous=tc.freeze_previous)
        return build_stack(genotype, stack_cfg, c_inits=list(c_inits),
                           base_cfg=base, seed=seed)

    if args.zero_refinement:
        stack = build(tc.c_inits, tc.seed)
        for net in stack.nets[1:]:
            for p in net.params():
                p.data[:] = 0.0
        left = Tensor(split.val.left[:2])
        right = Tensor(split.val.right[:2])
        results = stack.forward(left, right)
        identical = bool(np.array_equal(results[0][0].data,
                                        results[-1][0].data))
        _write_json(os.path.join(out, "zero_refinement.json"),
                    {"stack": tc.stack, "identical": identical}, cfg)
        print(f"zeroed refinement output identical to first net: {identical}")
        if not identical:
            raise DataError("zeroed refinement changed the stack output")
        return 0

    schedule = TrainSchedule(adam=AdamConfig(lr=tc.lr),
                             milestones=tc.milestones,
                             drop_factor=tc.drop_factor,
                             batch_size=tc.batch_size)

    if args.c_init_sweep:
        try:
            values = [int(v) for v in args.c_init_sweep.split(",") if v]
        except ValueError:
            raise ConfigError(
                f"--c-init-sweep wants comma-separated integers, "
                f"got {args.c_init_sweep!r}") from None
        if not values:
            raise ConfigError("--c-init-sweep list is empty")
        rows = []
        for c in values:
            stack = build((c,) * len(tc.stack), tc.seed)
            res = train_derived(stack, split, schedule,
                                budget_iters=tc.iters, seed=tc.seed)
            rows.append((c, _stack_params(stack), res.final_epe))
            print(f"c_init {c}: {rows[-1][1]} params, "
                  f"val EPE {res.final_epe:.4f}")
        _write_csv(os.path.join(out, "sweep.csv"),
                   ["c_init", "params", "val_epe"], rows, cfg)
        _write_run_config(out, cfg)
        return 0

    stack = build(tc.c_inits, tc.seed)
    result = train_derived(stack, split, schedule, budget_iters=tc.iters,
                           seed=tc.seed)
    ckpt = os.path.join(out, "checkpoint")
    for i, net in enumerate(stack.nets):
        save_checkpoint(os.path.join(ckpt, f"net_{i}"), net)
    _write_json(os.path.join(ckpt, "stack.json"),
                {"roles": list(tc.stack), "c_inits": list(tc.c_inits)}, cfg)
    report = evaluate(stack, ds.arrays("test"))
    eval_path = os.path.join(out, "eval.csv")
    write_eval_csv(eval_path, report)
    _prepend_comment(eval_path, cfg)
    _write_csv(os.path.join(out, "train_history.csv"), ["iter", "loss"],
               list(enumerate(result.history)), cfg)
    _write_run_config(out, cfg)
    print(f"trained {tc.stack!r} stack ({_stack_params(stack)} params) "
          f"for {tc.iters} iters: test EPE {report.mean_epe:.4f}")
    return 0


# ---------------------------------------------------------------------------
# bohb


def _closed_form_budget(b_min: float, b_max: float, eta: float,
                        n_iterations: int) -> float:
    """Total budget the bracket cascade consumes, from the arithmetic alone."""
    brackets = hyperband_brackets(b_min, b_max, eta)
    total = 0.0
    for it in range(n_iterations):
        br = brackets[it % len(brackets)]
        n = br.n_configs
        for r in range(br.s + 1):
            total += n * b_max * eta ** (r - br.s)
            if r < br.s:
                n = int(n // eta)
                if n == 0:
                    break
    return total


def cmd_bohb(args) -> int:
    cfg = _resolve_config(args)
    cfg = _override(cfg, "bohb", workers=args.workers, seed=args.seed,
                    n_iterations=args.iterations, b_min=args.b_min,
                    b_max=args.b_max, eta=args.eta)
    bc = cfg.bohb
    out = _ensure_out(args.out)

    if args.synthetic and args.checkpoint:
        raise ConfigError("pick one of --synthetic and --checkpoint")
    if args.checkpoint:
        if not args.data:
            raise ConfigError("--checkpoint mode needs --data")
        ds = load_dataset(args.data)
        split = ds.search_split()
        space = HyperparamSpace([
            Dim("lr", "log_uniform", bc.lr_low, bc.lr_high),
            Dim("weight_decay", "log_uniform", bc.wd_low, bc.wd_high),
        ])

        def objective(config, budget, seed):
            lr, wd = config
            return snapshot_restart(args.checkpoint, lr=lr, weight_decay=wd,
                                    budget_iters=max(1, int(round(budget))),
                                    data=split, seed=seed)
    else:
        space = HyperparamSpace([Dim("x", "uniform", 0.0, 1.0),
                                 Dim("y", "uniform", 0.0, 1.0)])
        objective = make_synthetic_objective(b_max=bc.b_max)

    trials_path = os.path.join(out, "trials.jsonl")
    result = run_bohb(objective, space, bc.b_min, bc.b_max, bc.eta,
                      bc.n_iterations, workers=bc.workers, seed=bc.seed,
                      log_path=trials_path)

    expected = _closed_form_budget(bc.b_min, bc.b_max, bc.eta,
                                   bc.n_iterations)
    print(f"total budget consumed: {result.total_budget:g} "
          f"(= {result.total_budget / bc.b_max:g} x b_max; "
          f"closed form {expected:g})")
    if abs(result.total_budget - expected) > 1e-9 * max(expected, 1.0):
        raise DataError(
            f"budget accounting drifted: consumed {result.total_budget!r}, "
            f"closed form {expected!r}")

    space_doc = json.loads(space_to_json(space))
    _write_json(os.path.join(out, "space.json"), space_doc, cfg)
    traj = incumbent_trajectory(result.records, budget=bc.b_max)
    _write_csv(os.path.join(out, "incumbent.csv"),
               ["wall_time", "best_loss"], traj, cfg)
    _write_run_config(out, cfg)
    if result.incumbent_config is None:
        print("no trial finished at the maximum budget")
    else:
        pretty = ", ".join(f"{d.name}={v:g}" for d, v in
                           zip(space.dims, result.incumbent_config))
        print(f"incumbent: {pretty} (loss {result.incumbent_loss:g}, "
              f"{len(result.records)} trials)")
    return 0


# ---------------------------------------------------------------------------
# fanova


def _budget_tag(b: float) -> str:
    return f"{b:g}".replace(".", "p").replace("+", "").replace("-", "m")


def cmd_fanova(args) -> int:
    cfg = _resolve_config(args)
    records = read_trials(args.trials)
    with open(args.space) as fh:
        space = space_from_json(fh.read())
    out = _ensure_out(args.out)

    budgets = sorted({r.budget for r in records})
    if not budgets:
        raise DataError(f"no trials in {args.trials}")
    if args.budget is not None:
        matches = [b for b in budgets if abs(b - args.budget) <= 1e-9 * b]
        if not matches:
            have = ", ".join(f"{b:g}" for b in budgets)
            raise ConfigError(
                f"no trials at budget {args.budget:g}; present: {have}")
        budgets = matches

    wrote = 0
    for b in budgets:
        recs = [r for r in records if r.budget == b]
        try:
            forest = fit_forest(recs, space, n_trees=cfg.fanova.n_trees,
                                seed=cfg.fanova.seed)
        except DataError as exc:
            if args.budget is not None:
                raise
            print(f"budget {b:g}: skipped ({exc})")
            continue
        rep = importance(forest, space)
        tag = _budget_tag(b)
        doc = json.loads(report_to_json(rep))
        doc["budget"] = b
        _write_json(os.path.join(out, f"importance_b{tag}.json"), doc, cfg)
        curves_path = os.path.join(out, f"marginals_b{tag}.csv")
        curves_to_csv(rep, curves_path)
        _prepend_comment(curves_path, cfg)
        ranked = sorted(rep.individual.items(), key=lambda kv: -kv[1])
        pretty = ", ".join(f"{k}={v:.3f}" for k, v in ranked)
        print(f"budget {b:g}: {pretty} (higher order {rep.higher_order:.3f})")
        wrote += 1
    if wrote == 0:
        raise DataError("no budget had enough finished trials")
    _write_run_config(out, cfg)
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    cfg = _resolve_config(args)
    records = read_trials(args.trials)
    if not records:
        raise DataError(f"no trials in {args.trials}")
    out = _ensure_out(args.out)
    desc = json.dumps(config_to_doc(cfg), sort_keys=True)
    budgets = sorted({r.budget for r in records})

    fig = Figure(title="Trials by budget", xlabel="finish time",
                 ylabel="loss", y_log=args.log_y, desc=desc)
    for i, b in enumerate(budgets):
        pts = [r for r in records if r.budget == b and r.status == "finished"]
        if pts:
            fig.scatter([r.wall_time for r in pts], [r.loss for r in pts],
                        color=PALETTE[i % len(PALETTE)], label=f"b={b:g}")
    traj = incumbent_trajectory(records, budget=budgets[-1])
    if traj:
        fig.line([t for t, _ in traj], [v for _, v in traj], color="#000000",
                 width=2.0, label="incumbent", step=True)
    fig.save(os.path.join(out, "trials.svg"))

    _write_csv(os.path.join(out, "trials.csv"),
               ["config_id", "budget", "loss", "wall_time", "status"],
               [(r.config_id, r.budget,
                 r.loss if r.status == "finished" else "", r.wall_time,
                 r.status) for r in records], cfg)

    curves = incumbent_trajectory(records)
    fig2 = Figure(title="Best loss per budget", xlabel="consumed budget",
                  ylabel="best loss", y_log=args.log_y, desc=desc)
    rows = []
    for i, b in enumerate(budgets):
        tr = curves.get(b, [])
        if tr:
            fig2.line([t for t, _ in tr], [v for _, v in tr],
                      color=PALETTE[i % len(PALETTE)], label=f"b={b:g}",
                      step=True)
        rows.extend((b, t, v) for t, v in tr)
    fig2.save(os.path.join(out, "curves.svg"))
    _write_csv(os.path.join(out, "curves.csv"),
               ["budget", "wall_time", "best_loss"], rows, cfg)

    if args.history:
        iters, train_epe, val_iters, val_epe = [], [], [], []
        with open(args.history) as fh:
            body = [ln for ln in fh if not ln.startswith("#")]
        for row in csv.DictReader(body):
            iters.append(float(row["iter"]))
            train_epe.append(float(row["train_epe"]))
            if row["val_epe"]:
                val_iters.append(float(row["iter"]))
                val_epe.append(float(row["val_epe"]))
        fig3 = Figure(title="Search training", xlabel="iteration",
                      ylabel="EPE", desc=desc)
        fig3.line(iters, train_epe, color=PALETTE[0], label="train")
        if val_iters:
            fig3.line(val_iters, val_epe, color=PALETTE[3], label="val")
        fig3.save(os.path.join(out, "search_history.svg"))

    _write_run_config(out, cfg)
    print(f"report written to {out} ({len(records)} trials, "
          f"{len(budgets)} budgets)")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stereonas",
        description="architecture search and hyperparameter tuning on a "
                    "synthetic stereo task")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON config file")
        sp.add_argument("--profile", default="toy", choices=("toy", "paper"),
                        help="base profile when no config file is given")

    g = sub.add_parser("gen-data", help="render a synthetic stereo dataset")
    common(g)
    g.add_argument("--n", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--max-disp", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--channels", type=int, choices=(1, 3))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("search", help="bilevel cell search on a dataset")
    common(s)
    s.add_argument("--data", required=True, help="gen-data output directory")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--random-cells", type=int, metavar="N",
                   help="emit N random genotypes instead of searching")
    s.set_defaults(func=cmd_search)

    t = sub.add_parser("train", help="train a derived net or residual stack")
    common(t)
    t.add_argument("--genotype", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stack", choices=("c", "cs", "css"))
    t.add_argument("--c-init", type=int)
    t.add_argument("--c-init-sweep", metavar="LIST",
                   help="comma-separated c_init values; emits sweep.csv")
    t.add_argument("--freeze-previous", action=argparse.BooleanOptionalAction,
                   default=None)
    t.add_argument("--zero-refinement", action="store_true",
                   help="zero refinement nets and check the residual identity")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bohb", help="multi-fidelity hyperparameter search")
    common(b)
    b.add_argument("--out", required=True)
    b.add_argument("--synthetic", action="store_true",
                   help="tune the built-in quadratic objective (default)")
    b.add_argument("--checkpoint",
                   help="derived-net checkpoint to restart from")
    b.add_argument("--data", help="dataset for --checkpoint mode")
    b.add_argument("--workers", type=int)
    b.add_argument("--iterations", type=int)
    b.add_argument("--b-min", type=float)
    b.add_argument("--b-max", type=float)
    b.add_argument("--eta", type=float)
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_bohb)

    f = sub.add_parser("fanova", help="hyperparameter importance from trials")
    common(f)
    f.add_argument("--trials", required=True, help="trials.jsonl from bohb")
    f.add_argument("--space", required=True, help="space.json from bohb")
    f.add_argument("--out", required=True)
    f.add_argument("--budget", type=float,
                   help="analyze only this budget (default: all)")
    f.set_defaults(func=cmd_fanova)

    r = sub.add_parser("report", help="render trial scatter and curves")
    common(r)
    r.add_argument("--trials", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--history", help="history.csv from search")
    r.add_argument("--log-y", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
