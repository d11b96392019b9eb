"""Command-line entry point: ``calibench <subcommand> [options]``.

Every subcommand is a pure function of (config, seed, input files). All
randomness flows from ``--seed``; sub-seeds come from the splitmix expansion in
``numkit.rng``. Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 I/O or
format error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import divergence, evalkit, models, navsim, planner, synthdata, trainer
from .numkit.calt import FormatError
from .numkit.rng import derive_seed
from .numkit.tensor import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
PRESET_DIR = Path(__file__).parent / "presets"


# -- config ---------------------------------------------------------------------------------

def _dc_defaults(cls, skip=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        v = getattr(cls(), f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    data = asdict(synthdata.preset("mild-shift"))
    data.update({"name": "mild-shift", "n_source": 64, "n_target": 64})
    return {
        "data": data,
        "arch": _dc_defaults(models.ArchitectureConfig, skip=("num_classes", "in_channels")),
        "train": _dc_defaults(trainer.TrainConfig, skip=("seed",)),
        "planner": _dc_defaults(planner.PlannerConfig),
        "sim": {"suite": "benchmark", "n_worlds": 10, "max_steps": 200, "n_obstacles": 6,
                "world_length": 8.0, "camera": _dc_defaults(planner.CameraModel)},
    }


def _check_type(path: str, default, value):
    if default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {json.dumps(value)}")
    return value


def merge_config(base: dict, override: dict, prefix: str = "") -> dict:
    """Return ``base`` updated by ``override``; unknown keys raise with their key path."""
    out = json.loads(json.dumps(base))
    for k, v in override.items():
        path = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {path}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{path}: expected an object")
            out[k] = merge_config(out[k], v, path + ".")
        else:
            out[k] = _check_type(path, out[k], v)
    return out


def load_config(path: str | None) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists() and (PRESET_DIR / p.name).exists():
        p = PRESET_DIR / p.name
    try:
        raw = json.loads(p.read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    return merge_config(cfg, raw)


def _flatten(d: dict, prefix: str = "") -> list[tuple[str, object]]:
    rows = []
    for k, v in d.items():
        if isinstance(v, dict):
            rows += _flatten(v, f"{prefix}{k}.")
        else:
            rows.append((f"{prefix}{k}", v))
    return rows


def config_help() -> str:
    lines = ["config keys (JSON sections; defaults shown):"]
    lines += [f"  {k} = {json.dumps(v)}" for k, v in _flatten(default_config())]
    return "\n".join(lines)


def domain_spec(cfg: dict) -> synthdata.DomainSpec:
    d = {k: v for k, v in cfg["data"].items() if k not in ("name", "n_source", "n_target")}
    spec = synthdata.DomainSpec(**d)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from None
    return spec


def arch_config(cfg: dict, spec: synthdata.DomainSpec) -> models.ArchitectureConfig:
    a = dict(cfg["arch"])
    a["disc_channels"] = tuple(a["disc_channels"])
    arch = models.ArchitectureConfig(num_classes=spec.num_classes, in_channels=spec.channels, **a)
    try:
        arch.validate()
    except ValueError as exc:
        raise ConfigError(f"arch: {exc}") from None
    return arch


def train_config(cfg: dict, seed: int) -> trainer.TrainConfig:
    tc = trainer.TrainConfig(seed=seed, **cfg["train"])
    try:
        tc.validate()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    return tc


def planner_config(cfg: dict) -> tuple[planner.PlannerConfig, planner.CameraModel]:
    return planner.PlannerConfig(**cfg["planner"]), planner.CameraModel(**cfg["sim"]["camera"])


def _datasets(cfg: dict, seed: int, data_dir: str | None):
    if data_dir is not None:
        root = Path(data_dir)
        return synthdata.read_dataset(root / "source"), synthdata.read_dataset(root / "target")
    spec = domain_spec(cfg)
    return synthdata.generate_domain_pair(spec, cfg["data"]["n_source"], cfg["data"]["n_target"],
                                          derive_seed(seed, "data"))


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands ----------------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    out = Path(args.out)
    src, tgt = _datasets(cfg, args.seed, None)
    synthdata.write_dataset(src, out / "source")
    synthdata.write_dataset(tgt, out / "target")
    print(f"wrote {len(src)} source and {len(tgt)} target samples to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    if args.method:
        cfg["train"]["method"] = args.method
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src, tgt = _datasets(cfg, args.seed, args.data)
    tc = train_config(cfg, args.seed)
    arch = arch_config(cfg, src.spec)
    _dump_json({"config": cfg, "seed": args.seed}, out / "config.json")

    def progress(row):
        print(f"iter={row['iter']} phase={row['phase']} miou={row['miou']:.4f} "
              f"discrepancy={row['target_discrepancy']:.6f}", flush=True)

    res = trainer.run(tc, src, tgt, arch, out_dir=out, progress=None if args.quiet else progress)
    print(f"target mIoU {res.final['target_miou']:.4f} -> {out / 'summary.json'}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    bundle, _ = models.load_checkpoint(args.checkpoint)
    src, tgt = _datasets(cfg, args.seed, args.data)
    ds = tgt if args.split == "target" else src
    cm = evalkit.evaluate_segmentation(bundle, ds.images, ds.labels, head=args.head)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summ = evalkit.summary(cm)
    summ["split"] = args.split
    evalkit.write_json(summ, out / "eval.json")
    evalkit.write_summary_csv(cm, out / "eval.csv")
    print(f"{args.split} mIoU {summ['miou']:.4f}")
    return EXIT_OK


def cmd_divergence(args, cfg) -> int:
    if args.preset:
        spec = synthdata.preset(args.preset)
        n_s, n_t = cfg["data"]["n_source"], cfg["data"]["n_target"]
    else:
        spec = domain_spec(cfg)
        n_s, n_t = cfg["data"]["n_source"], cfg["data"]["n_target"]
    dseed = derive_seed(args.seed, "data")
    src = synthdata.generate_domain(spec, "source", n_s, dseed)
    # an independent draw keeps "identical" honest: same distribution, different samples
    tgt = synthdata.generate_domain(spec, "target", n_t, derive_seed(args.seed, "data", "target"))
    sets = divergence.SampleSets(synthdata.pixel_features(src, seed=dseed),
                                 synthdata.pixel_features(tgt, seed=dseed))
    rep = divergence.report(sets, seed=args.seed, oracle_points=args.oracle_points)
    rep["preset"] = args.preset or cfg["data"]["name"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(rep, out / "divergence.json")
    print(json.dumps(rep, sort_keys=True))
    return EXIT_OK


def _sim_worlds(cfg: dict, seed: int, suite: str) -> list[navsim.World]:
    sim = cfg["sim"]
    n = sim["n_worlds"]
    if suite == "benchmark":
        return [navsim.random_world(derive_seed(seed, "world", k), sim["n_obstacles"], sim["world_length"])
                for k in range(n)]
    if suite == "gap":
        return [navsim.gap_wall_world(derive_seed(seed, "gap", k)) for k in range(n)]
    if suite == "box":
        return [navsim.sealed_box_world(seed)]
    if suite == "empty":
        return [navsim.empty_world()]
    raise ConfigError(f"sim.suite: unknown suite {suite!r}")


def cmd_plan(args, cfg) -> int:
    pc, cam = planner_config(cfg)
    world = _sim_worlds(cfg, args.seed, cfg["sim"]["suite"])[0]
    pl = planner.Planner(pc, cam)
    mask = navsim.render_segmentation(world, world.start, cam)
    omega = planner.extract_boundary(mask, pl.v_thres)
    E = planner.edf(omega, cam.image_h, cam.image_w)
    fld = planner.sedf(E, pc.alpha)
    res = planner.select_primitive(pl.library, fld, world.start, world.goal,
                                   pc.w1, pc.w2, pc.a, pc.b, pc.literal_eq25)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    planner.write_mask_pgm(mask, out / "mask.pgm")
    planner.write_pgm(planner.sedf(E, 1.0), out / "edf.pgm")
    planner.write_pgm(fld, out / "sedf.pgm")
    trace = {"selected": res.index, "omega": pl.library[res.index].omega,
             "costs": [{"index": i, "omega": p.omega, "collision": c, "target": t, "total": s}
                       for i, (p, c, t, s) in enumerate(zip(pl.library, res.collision, res.target, res.total))],
             "boundary_pixels": int(len(omega)), "world": world.to_dict()}
    _dump_json(trace, out / "plan.json")
    print(f"selected primitive {res.index} (omega {pl.library[res.index].omega:+.3f} rad/s)")
    return EXIT_OK


def cmd_navigate(args, cfg) -> int:
    pc, cam = planner_config(cfg)
    suite = args.suite or cfg["sim"]["suite"]
    out = Path(args.out)
    (out / "episodes").mkdir(parents=True, exist_ok=True)
    rows = []
    for k, world in enumerate(_sim_worlds(cfg, args.seed, suite)):
        dump = out / "dump" / f"episode_{k:02d}" if args.dump else None
        log = navsim.run_episode(world, pc, cfg["sim"]["max_steps"], cam, dump_dir=dump)
        (out / "episodes" / f"episode_{k:02d}.json").write_text(log.to_json() + "\n")
        rows.append([k, world.seed, log.outcome, len(log.selected), f"{log.path_length:.6f}"])
        print(f"episode {k}: {log.outcome} after {len(log.selected)} steps, path {log.path_length:.2f} m")
    with open(out / "navigate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "world_seed", "outcome", "steps", "path_length"])
        w.writerows(rows)
    counts = {o: sum(r[2] == o for r in rows) for o in ("reached", "collided", "timeout")}
    _dump_json({"suite": suite, "episodes": len(rows), **counts}, out / "navigate.json")
    return EXIT_OK


# -- report ---------------------------------------------------------------------------------

def collect_runs(roots: list[str]) -> list[dict]:
    """Every training run (a directory holding summary.json) under the given roots."""
    runs = []
    for root in roots:
        for summ in sorted(Path(root).rglob("summary.json")):
            d = summ.parent
            final = json.loads(summ.read_text())
            cfg_path = d / "config.json"
            preset = json.loads(cfg_path.read_text())["config"]["data"]["name"] if cfg_path.exists() else ""
            rows = list(csv.DictReader(io.StringIO((d / "metrics.csv").read_text()))) \
                if (d / "metrics.csv").exists() else []
            runs.append({"dir": str(d), "preset": preset, "final": final, "rows": rows})
    return runs


def summary_table(runs: list[dict]) -> list[dict]:
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in runs:
        groups.setdefault((r["preset"], r["final"]["method"]), []).append(r["final"])
    order = {m: i for i, m in enumerate(trainer.METHODS)}
    table = []
    for (preset, method), fs in sorted(groups.items(), key=lambda kv: (kv[0][0], order.get(kv[0][1], 99))):
        mi = np.array([f["target_miou"] for f in fs])
        table.append({"preset": preset, "method": method, "runs": len(fs),
                      "seeds": sorted(f["seed"] for f in fs),
                      "target_miou_mean": float(mi.mean()),
                      "target_miou_std": float(mi.std()),
                      "source_miou_mean": float(np.mean([f["source_miou"] for f in fs])),
                      "target_discrepancy_mean": float(np.mean([f["target_discrepancy"] for f in fs]))})
    return table


def _plot_curves(runs, column: str, ylabel: str, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for r in runs:
        pts = [(int(x["iter"]), float(x[column])) for x in r["rows"] if x.get(column)]
        if pts:
            it, val = zip(*pts)
            f = r["final"]
            ax.plot(it, val, label=f"{r['preset']} {f['method']} s{f['seed']}", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    if runs:
        ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_bars(table, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"{t['preset']}\n{t['method']}" for t in table]
    ax.bar(range(len(table)), [t["target_miou_mean"] for t in table],
           yerr=[t["target_miou_std"] for t in table], color="tab:blue", capsize=3)
    ax.set_xticks(range(len(table)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("target mIoU")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_report(args, cfg) -> int:
    runs = collect_runs(args.runs)
    if not runs:
        raise OSError(f"no summary.json found under {args.runs}")
    table = summary_table(runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["preset", "method", "runs", "target_miou_mean", "target_miou_std",
            "source_miou_mean", "target_discrepancy_mean"]
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for t in table:
            w.writerow([f"{t[c]:.6f}" if isinstance(t[c], float) else t[c] for c in cols])
    _dump_json(table, out / "table.json")
    _plot_curves(runs, "miou", "target mIoU (eval subset)", out / "miou_curves.png")
    _plot_curves(runs, "target_discrepancy", "target discrepancy", out / "discrepancy_curves.png")
    _plot_bars(table, out / "final_miou.png")
    for t in table:
        print(f"{t['preset']:>12} {t['method']:>6}  n={t['runs']}  mIoU {t['target_miou_mean']:.4f}"
              f" +/- {t['target_miou_std']:.4f}")
    return EXIT_OK


# -- dispatch -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calibench", description=__doc__.splitlines()[0],
                                epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(name, help_text, out_default):
        sp = sub.add_parser(name, help=help_text, epilog=config_help(),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="RunConfig JSON (file path or shipped preset name)")
        sp.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
        sp.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")
        return sp

    common("gen-data", "write source/target datasets", "data")
    sp = common("train", "train one model", "run")
    sp.add_argument("--method", choices=trainer.METHODS)
    sp.add_argument("--data", help="dataset directory from gen-data (default: generate from config)")
    sp.add_argument("--quiet", action="store_true")
    sp = common("eval", "evaluate a checkpoint", "eval")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--split", choices=("source", "target"), default="target")
    sp.add_argument("--head", choices=("C1", "C2"), default="C1")
    sp = common("divergence", "H-divergence estimate, oracles and bound check", "divergence")
    sp.add_argument("--preset", choices=("identical", "mild-shift", "hard-shift"))
    sp.add_argument("--oracle-points", type=int, default=24, help="samples per domain for the oracles")
    common("plan", "plan one frame and dump the fields", "plan")
    sp = common("navigate", "run an episode suite", "navigate")
    sp.add_argument("--suite", choices=("benchmark", "gap", "box", "empty"))
    sp.add_argument("--dump", action="store_true", help="write per-step mask and SEDF PGMs")
    sp = common("report", "aggregate training runs into tables and figures", "report")
    sp.add_argument("runs", nargs="+", help="directories searched for summary.json")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "divergence": cmd_divergence,
            "plan": cmd_plan, "navigate": cmd_navigate, "report": cmd_report}


def dispatch(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except trainer.NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
