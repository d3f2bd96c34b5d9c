"""Command-line surface: sensitivity, attack, baseline, calibrate, evolve,
report. Exit codes: 0 success, 1 usage error, 2 runtime error. All
randomness is controlled by the seed (config key `seed`, overridable with
--seed); repeated runs with identical flags and seed write byte-identical
output files."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from . import attack as atk
from . import device as dev
from . import genetic as ga
from . import io_formats as io
from . import sensitivity as sens
from .device import FaultParams


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> Parser:
    p = Parser(prog="glitchsim", description=__doc__)
    p.add_argument("--version", action="version", version=f"glitchsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sensitivity", help="rank fault targets by bit-gradient sensitivity")
    s.add_argument("--model", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--granularity", default="element", choices=io._GRANULARITIES)
    s.add_argument("--mode", default="dep", choices=["dep", "indep"])
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--input-index", type=int, default=0)
    s.add_argument("--sample-size", type=int, default=32)
    s.add_argument("--target-class", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    a = sub.add_parser("attack", help="run an attack campaign from a config file")
    a.add_argument("--config", required=True)
    a.add_argument("--target-class", type=int, default=None)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--jobs", type=int, default=None)

    b = sub.add_parser("baseline", help="uncontrolled random fault-injection baseline")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int, default=None)

    c = sub.add_parser("calibrate", help="sweep a (V_l, F_h) grid and report outcome rates")
    c.add_argument("--model", required=True)
    c.add_argument("--profile", default="default")
    c.add_argument("--v-grid", default=",".join(str(v) for v in dev.DEFAULT_V_GRID))
    c.add_argument("--f-grid", default=",".join(str(1000.0 + o) for o in dev.DEFAULT_F_OFFSETS))
    c.add_argument("--t-d", type=float, default=2.0)
    c.add_argument("--trials", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)

    e = sub.add_parser("evolve", help="genetic refinement of fault parameters")
    e.add_argument("--config", required=True)
    e.add_argument("--seed", type=int, default=None)

    r = sub.add_parser("report", help="summarize a trials JSONL file")
    r.add_argument("--in", dest="infile", required=True)
    r.add_argument("--out-confusion", default=None)
    return p


def _profile_by_name(name: str) -> dev.DeviceProfile:
    if name == "default":
        return dev.default_profile()
    if name == "ideal":
        return dev.ideal_profile()
    raise ValueError(f"unknown profile {name!r} (expected 'default' or 'ideal')")


def _params_from_config(cfg: dict) -> FaultParams:
    return FaultParams(
        f_c=cfg["fault_f_c"], v_c=cfg["fault_v_c"],
        f_g=cfg["fault_f_g"], v_g=cfg["fault_v_g"],
        f_h=cfg["fault_f_h"], v_l=cfg["fault_v_l"],
        t_w=cfg["fault_t_w"], t_d=cfg["fault_t_d"],
    )


def _load_campaign_inputs(cfg: dict, context: str):
    io.require_keys(cfg, ["model", "images", "labels", "out_dir"], context)
    model = io.load_model(cfg["model"])
    dataset = io.load_idx(cfg["images"], cfg["labels"])
    profile = _profile_by_name(cfg["profile"])
    params = _params_from_config(cfg)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    return model, dataset, profile, params


def _write_campaign_outputs(report: atk.CampaignReport, out_dir: str, prov: str):
    io.write_jsonl(os.path.join(out_dir, "trials.jsonl"), report.records, prov)
    rows = [
        ("trials", report.trials),
        ("completed", report.completed),
        ("crashes", report.crashes),
        ("no_responses", report.no_responses),
        ("baseline_accuracy_pct", report.baseline_accuracy),
        ("attacked_accuracy_pct", report.attacked_accuracy),
        ("degradation_points", report.degradation),
        ("crash_rate", report.crash_rate),
        ("noresp_rate", report.noresp_rate),
    ]
    if report.targeted_success is not None:
        rows.append(("targeted_success_pct", report.targeted_success))
    io.write_csv(os.path.join(out_dir, "summary.csv"), ["metric", "value"], rows, prov)
    io.write_confusion_csv(os.path.join(out_dir, "confusion.csv"), report.confusion, prov)


def _cmd_sensitivity(args) -> int:
    model = io.load_model(args.model)
    dataset = io.load_idx(args.images, args.labels)
    digest = io.model_digest(model)
    if args.mode == "dep":
        table = sens.evaluate_sensitivity(
            model, dataset.x[args.input_index], int(dataset.labels[args.input_index]),
            args.granularity, args.target_class,
        )
    else:
        sample = [
            (dataset.x[i], int(dataset.labels[i]))
            for i in range(min(args.sample_size, len(dataset)))
        ]
        tables = [
            sens.evaluate_sensitivity(model, x, t, args.granularity, args.target_class)
            for x, t in sample
        ]
        table = sens.accumulate_tables(tables)
    table = sens.SensitivityTable(table.mode, table.entries, digest)
    prov = io.provenance_line(args.seed, digest[:16], __version__)
    io.write_sensitivity_csv(args.out, table, prov)
    top = sens.get_top_set(table, args.n)
    print(f"wrote {len(table.entries)} candidates to {args.out}")
    for t, s in [(t, s) for t, s in table.entries if t in set(top.targets)][: args.n]:
        print(f"  layer {t.addr.layer} element {t.addr.index} {t.granularity.value}"
              f"{'' if t.anchor_bit is None else ' bit ' + str(t.anchor_bit)}  S={s:.6g}")
    return 0


def _cmd_attack(args) -> int:
    cfg = io.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.target_class is not None:
        cfg["target_class"] = args.target_class
        cfg["mode"] = "targeted"
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    model, dataset, profile, params = _load_campaign_inputs(cfg, "attack")
    if cfg["mode"] == "targeted":
        io.require_keys(cfg, ["target_class"], "targeted attack")
    report = atk.run_campaign(
        model, dataset, profile, params,
        mode=cfg["mode"], target_class=cfg["target_class"],
        selection=cfg["search"], injection=cfg["injection"],
        granularity=cfg["granularity"], n=cfg["n"], trials=cfg["trials"],
        pool=cfg["pool"], sample_size=cfg["sample_size"], seed=cfg["seed"],
        jobs=cfg["jobs"],
    )
    prov = io.provenance_line(cfg["seed"], cfg.get("_sha256", "-"), __version__)
    _write_campaign_outputs(report, cfg["out_dir"], prov)
    print(f"trials={report.trials} completed={report.completed} "
          f"crash_rate={report.crash_rate:.3f} noresp_rate={report.noresp_rate:.3f}")
    print(f"baseline={report.baseline_accuracy:.1f}% attacked={report.attacked_accuracy:.1f}% "
          f"degradation={report.degradation:.1f} points")
    if report.targeted_success is not None:
        print(f"targeted_success={report.targeted_success:.1f}%")
    return 0


def _cmd_baseline(args) -> int:
    cfg = io.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    model, dataset, profile, params = _load_campaign_inputs(cfg, "baseline")
    report = atk.run_random_baseline(
        model, dataset, profile, params,
        attempts=cfg["n"], trials=cfg["trials"], pool=cfg["pool"],
        sample_size=cfg["sample_size"], seed=cfg["seed"],
        v_range=cfg["range_v_l"], f_range=cfg["range_f_h"],
        t_d_range=cfg["range_t_d"],
    )
    prov = io.provenance_line(cfg["seed"], cfg.get("_sha256", "-"), __version__)
    _write_campaign_outputs(report, cfg["out_dir"], prov)
    print(f"trials={report.trials} completed={report.completed} "
          f"crash_rate={report.crash_rate:.3f} noresp_rate={report.noresp_rate:.3f}")
    print(f"baseline={report.baseline_accuracy:.1f}% attacked={report.attacked_accuracy:.1f}% "
          f"degradation={report.degradation:.1f} points")
    return 0


def _cmd_calibrate(args) -> int:
    model = io.load_model(args.model)
    profile = (
        _profile_by_name(args.profile)
        if args.profile in ("default", "ideal")
        else io.load_profile(args.profile)
    )
    v_grid = [float(v) for v in args.v_grid.split(",") if v]
    f_grid = [float(f) for f in args.f_grid.split(",") if f]
    schedule = dev.build_schedule(model, profile, dev.default_fault_params().f_g)
    rows = dev.calibrate_sweep(
        profile, schedule, v_grid, f_grid, args.t_d, args.trials, seed=args.seed
    )
    prov = io.provenance_line(args.seed, "-", __version__)
    io.write_csv(
        args.out,
        ["v_l", "f_h", "rate_no_effect", "rate_fault", "rate_crash", "rate_noresp", "mean_bits"],
        [
            (r.v_l, r.f_h, r.rate_no_effect, r.rate_fault, r.rate_crash,
             r.rate_noresp, r.mean_bits)
            for r in rows
        ],
        prov,
    )
    best = max(rows, key=lambda r: r.rate_single_bit)
    print(f"wrote {len(rows)} cells to {args.out}")
    print(f"best single-bit cell: V_l={best.v_l} mV, F_h={best.f_h} MHz "
          f"(rate {best.rate_single_bit:.3f})")
    return 0


def _cmd_evolve(args) -> int:
    cfg = io.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    model, dataset, profile, params = _load_campaign_inputs(cfg, "evolve")
    rng = np.random.default_rng(cfg["seed"])
    sample = [
        (dataset.x[i], int(dataset.labels[i]))
        for i in range(min(cfg["sample_size"], len(dataset)))
    ]
    targets = sens.input_independent_search(model, sample, cfg["n"], cfg["granularity"])
    schedule = dev.build_schedule(model, profile, params.f_g)
    plan = atk.plan_injections(schedule, targets, params)
    pool_x = dataset.x[cfg["sample_size"] : cfg["sample_size"] + cfg["pool"]]
    pool_y = dataset.labels[cfg["sample_size"] : cfg["sample_size"] + cfg["pool"]]
    from .engine import forward

    baseline_classes = [
        forward(model, pool_x[i], int(pool_y[i])).predicted_class
        for i in range(len(pool_x))
    ]
    baseline_acc = 100.0 * sum(
        baseline_classes[i % len(pool_x)] == pool_y[i % len(pool_x)]
        for i in range(cfg["ga_trials"])
    ) / cfg["ga_trials"]
    ctx = ga.FitnessContext(
        model=model,
        dataset=io.Dataset(x=pool_x, labels=pool_y),
        plan=plan,
        profile=profile,
        base_params=params,
        trials=cfg["ga_trials"],
        baseline_accuracy=baseline_acc,
        baseline_classes=baseline_classes,
    )
    ranges = ga.GeneRanges(
        f_h=cfg["range_f_h"], v_l=cfg["range_v_l"],
        t_w=cfg["range_t_w"], t_d=cfg["range_t_d"],
    )
    center = ga.Seed(params.f_h, params.v_l, params.t_w, params.t_d)
    initial = ga.initial_population(center, cfg["population"], rng, ranges)
    best, trace, _ = ga.refine_parameters(
        initial, ctx, cfg["generations"], rng, ranges,
        target_fitness=cfg["ga_target_fitness"],
    )
    prov = io.provenance_line(cfg["seed"], cfg.get("_sha256", "-"), __version__)
    io.write_csv(
        os.path.join(cfg["out_dir"], "evolve_trace.csv"),
        ["generation", "best_fitness", "mean_fitness", "best_so_far",
         "f_h", "v_l", "t_w", "t_d"],
        [
            (g.generation, g.best_fitness, g.mean_fitness, g.best_so_far,
             g.best_seed.f_h, g.best_seed.v_l, g.best_seed.t_w, g.best_seed.t_d)
            for g in trace
        ],
        prov,
    )
    print(f"best seed: F_h={best.f_h} MHz V_l={best.v_l} mV "
          f"T_W={best.t_w} ms T_d={best.t_d} ms")
    print(f"best fitness: {trace[-1].best_so_far:.1f} points over {len(trace)} generations")
    return 0


def _cmd_report(args) -> int:
    prov, records = io.read_jsonl(args.infile)
    if not records:
        raise ValueError(f"no trial records in {args.infile}")
    classes = 1 + max(
        max(r["true_label"] for r in records),
        max(r["final_class"] or 0 for r in records),
        max(r["baseline_class"] for r in records),
    )
    completed = [r for r in records if r["status"] == "completed"]
    crashes = sum(r["status"] == "crash" for r in records)
    norsps = sum(r["status"] == "no_response" for r in records)
    base_acc = 100.0 * sum(
        r["baseline_class"] == r["true_label"] for r in records
    ) / len(records)
    att_acc = (
        100.0 * sum(r["final_class"] == r["true_label"] for r in completed) / len(completed)
        if completed
        else base_acc
    )
    confusion = np.zeros((classes, classes), dtype=np.int64)
    for r in completed:
        if r["final_class"] >= 0:
            confusion[r["true_label"], r["final_class"]] += 1
    print(f"source: {args.infile}")
    if prov:
        print(f"provenance: {prov}")
    print(f"trials: {len(records)}  completed: {len(completed)}  "
          f"crashes: {crashes}  no_responses: {norsps}")
    print(f"baseline accuracy: {base_acc:.1f}%  attacked accuracy: {att_acc:.1f}%  "
          f"degradation: {base_acc - att_acc:.1f} points")
    eligible = [
        r for r in completed
        if r.get("target_class") is not None
        and r["baseline_class"] == r["true_label"]
        and r["true_label"] != r["target_class"]
    ]
    if eligible:
        rate = 100.0 * sum(
            r["final_class"] == r["target_class"] for r in eligible
        ) / len(eligible)
        print(f"targeted success: {rate:.1f}% over {len(eligible)} eligible trials")
    if args.out_confusion:
        io.write_confusion_csv(args.out_confusion, confusion, prov or "-")
        print(f"wrote confusion matrix to {args.out_confusion}")
    return 0


_COMMANDS = {
    "sensitivity": _cmd_sensitivity,
    "attack": _cmd_attack,
    "baseline": _cmd_baseline,
    "calibrate": _cmd_calibrate,
    "evolve": _cmd_evolve,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (io.ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
