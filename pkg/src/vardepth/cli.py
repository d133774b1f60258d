"""Command-line entry point: datagen, train, infer, eval, bench.

Thread pinning has to happen before numpy initializes its BLAS, so this
module imports nothing numeric at the top; each command pulls in the heavy
modules only after --threads / VARD_THREADS is applied.

Exit codes: 0 success, 2 configuration, 3 missing or incompatible artifact,
4 file format or I/O, 5 data, 1 any other deliberate failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import (CompatibilityError, ConfigError, DataError,
                     DependencyError, IOFormatError, VardepthError)

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_IO = 4
EXIT_DATA = 5

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _apply_threads(threads) -> None:
    if threads is None:
        threads = os.environ.get("VARD_THREADS")
    if threads in (None, ""):
        return
    try:
        n = int(threads)
    except ValueError as exc:
        raise ConfigError(f"thread count must be an integer, got {threads!r}") from exc
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                   help="run config JSON (defaults apply if omitted)")
    p.add_argument("--seed", type=int, metavar="N", default=argparse.SUPPRESS,
                   help="override the run seed (training, guidance, datagen)")
    p.add_argument("--threads", metavar="N", default=argparse.SUPPRESS,
                   help="BLAS thread count (fallback: VARD_THREADS)")
    return p


def _guidance_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=("none", "constant", "optimized"),
                   help="guidance weight preset")
    p.add_argument("--weights", metavar="W1,W2,...",
                   help="explicit per-scale guidance weights")


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    root = argparse.ArgumentParser(prog="vardepth", parents=[common],
                                   description=__doc__.splitlines()[0])
    sub = root.add_subparsers(dest="command", required=True)

    sub.add_parser("datagen", parents=[common],
                   help="render the synthetic train/val/test splits")

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("stage", choices=("tokenizer", "prior", "upsampler", "all"))
    p.add_argument("--resume", action="store_true",
                   help="continue from the stage's last checkpoint")

    p = sub.add_parser("infer", parents=[common],
                       help="predict depth for a PNG file or directory")
    p.add_argument("input", help="RGB PNG file or a directory of them")
    p.add_argument("--out", metavar="DIR", help="output directory")
    _guidance_flags(p)
    p.add_argument("--ensemble", type=int, default=0, metavar="N",
                   help="median over N stochastic members (0 = single pass)")

    p = sub.add_parser("eval", parents=[common],
                       help="score predictions over a dataset split")
    p.add_argument("dataset", help="split directory (rgb/ depth/ mask/)")
    p.add_argument("--records", metavar="PATH",
                   help="machine-readable per-sample records file")
    _guidance_flags(p)
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (pipeline check)")
    p.add_argument("--sweep-guidance", action="store_true",
                   help="compare the three guidance presets")

    p = sub.add_parser("bench", parents=[common],
                       help="per-scale latency of the sampling pipeline")
    p.add_argument("--repeats", type=int, default=5, metavar="N")
    return root


def _load_run_config(args):
    from .config import default_config, load_config
    path = getattr(args, "config", None)
    if path is not None:
        cfg = load_config(path)
    else:
        cfg = default_config()
        base = Path.cwd()
        cfg.data.root = str(base / cfg.data.root)
        for name in ("checkpoints", "outputs", "logs"):
            setattr(cfg.paths, name, str(base / getattr(cfg.paths, name)))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.training.seed = seed
        cfg.data.base_seed = seed
    return cfg


def _guidance_config(cfg, args):
    from .guidance import make_schedule
    preset = getattr(args, "preset", None)
    weights = getattr(args, "weights", None)
    if preset is not None and weights is not None:
        raise ConfigError("give either --preset or --weights, not both")
    g = cfg.guidance
    if weights is not None:
        try:
            spec = tuple(float(w) for w in weights.split(","))
        except ValueError as exc:
            raise ConfigError(f"--weights: {exc}") from exc
    elif preset is not None:
        spec = preset
    else:
        return cfg.guidance_config()
    return make_schedule(spec, n_scales=cfg.model.n_scales,
                         temperature=g.temperature, top_k=cfg.effective_top_k(),
                         seed=cfg.training.seed, late_weight=g.late_weight)


def cmd_datagen(args) -> int:
    from .pipeline import run_datagen
    cfg = _load_run_config(args)
    counts = run_datagen(cfg, log=print)
    print(f"wrote {sum(counts.values())} samples "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import train_all, train_stage
    cfg = _load_run_config(args)
    if args.stage == "all":
        paths = train_all(cfg, resume=args.resume, log=print)
    else:
        paths = train_stage(cfg, args.stage, resume=args.resume, log=print)
    for p in paths:
        print(f"checkpoint: {p}")
    return EXIT_OK


def _collect_pngs(target: Path) -> list[Path]:
    if target.is_file():
        return [target]
    if target.is_dir():
        found = sorted(target.glob("*.png"))
        if not found:
            raise DataError(f"no PNG images found in {target}")
        return found
    raise IOFormatError(f"input not found: {target}")


def cmd_infer(args) -> int:
    import numpy as np

    from .guidance import sample_depth, sample_depth_ensemble
    from .pfmio import load_rgb_png, save_colormap_png, save_gray16_png, save_pfm
    from .pipeline import load_models

    cfg = _load_run_config(args)
    gcfg = _guidance_config(cfg, args)
    models = load_models(cfg)
    images = _collect_pngs(Path(args.input))
    out_dir = Path(args.out) if args.out else Path(cfg.paths.outputs)
    out_dir.mkdir(parents=True, exist_ok=True)
    scale_lines = []
    for path in images:
        rgb = load_rgb_png(str(path))
        if args.ensemble > 0:
            depth, _ = sample_depth_ensemble(rgb, gcfg, models, args.ensemble)
        else:
            depth, _ = sample_depth(rgb, gcfg, models)
        d2 = np.asarray(depth)[0]
        stem = path.stem
        save_pfm(str(out_dir / f"{stem}.pfm"), d2)
        lo, hi = save_gray16_png(str(out_dir / f"{stem}_depth16.png"), d2)
        save_colormap_png(str(out_dir / f"{stem}_viz.png"), d2)
        scale_lines.append(f"{stem} {lo:.9g} {hi:.9g}")
        print(f"{path} -> {out_dir / stem}.pfm")
    (out_dir / "scales.txt").write_text("\n".join(scale_lines) + "\n")
    print(f"{len(images)} image(s) done; 16-bit scaling in {out_dir / 'scales.txt'}")
    return EXIT_OK


def _model_runner(models, gcfg):
    from .guidance import sample_depth

    def runner(rgb, depth, mask):
        return sample_depth(rgb, gcfg, models)

    return runner


def _load_eval_triples(dataset_dir: str):
    from .pfmio import list_indices, load_sample
    indices = list_indices(dataset_dir)
    triples, failures = [], []
    for i in indices:
        try:
            triples.append(load_sample(dataset_dir, i))
        except (IOFormatError, OSError) as exc:
            failures.append(f"sample {i:04d}: {exc}")
    if not triples:
        raise DataError(f"no samples found in {dataset_dir}")
    return triples, failures


def cmd_eval(args) -> int:
    from .evaluation import evaluate, format_records, format_report
    from .pipeline import load_models

    cfg = _load_run_config(args)
    if args.oracle and args.sweep_guidance:
        raise ConfigError("--oracle and --sweep-guidance are mutually exclusive")
    triples, failures = _load_eval_triples(args.dataset)
    for line in failures:
        print(f"error: {line}", file=sys.stderr)

    out_dir = Path(cfg.paths.outputs)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.oracle:
        def runner(rgb, depth, mask):
            return depth.copy(), None
    else:
        models = load_models(cfg)

    if args.sweep_guidance:
        from .guidance import PRESET_NAMES, make_schedule
        g = cfg.guidance
        rows = []
        for preset in PRESET_NAMES:
            gcfg = make_schedule(preset, n_scales=cfg.model.n_scales,
                                 temperature=g.temperature, top_k=cfg.effective_top_k(),
                                 seed=cfg.training.seed, late_weight=g.late_weight)
            report = evaluate(_model_runner(models, gcfg), triples)
            rows.append((preset, report))
            rec = out_dir / f"eval_records_{preset}.txt"
            rec.write_text(format_records(report))
        print(f"{'preset':<12} {'AbsRel x100':>12} {'delta1 %':>10}")
        for preset, report in rows:
            print(f"{preset:<12} {100 * report.abs_rel_mean:>12.4f} "
                  f"{report.delta1_mean:>10.4f}")
    else:
        runner = runner if args.oracle else _model_runner(models, _guidance_config(cfg, args))
        report = evaluate(runner, triples)
        print(format_report(report, title=f"evaluation of {args.dataset}"), end="")
        rec = Path(args.records) if args.records else out_dir / "eval_records.txt"
        rec.parent.mkdir(parents=True, exist_ok=True)
        rec.write_text(format_records(report))
        print(f"records: {rec}")

    if failures:
        print(f"{len(failures)} sample(s) failed to load", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_bench(args) -> int:
    import numpy as np

    from .guidance import sample_depth
    from .pipeline import load_models
    from .synthdata import generate_scene

    if args.repeats < 1:
        raise ConfigError(f"--repeats must be >= 1, got {args.repeats}")
    cfg = _load_run_config(args)
    gcfg = _guidance_config(cfg, args)
    models = load_models(cfg)
    probe = generate_scene(42, cfg.scene_config("indoor")).rgb

    sample_depth(probe, gcfg, models)  # warm-up, excluded
    states = [sample_depth(probe, gcfg, models)[1] for _ in range(args.repeats)]

    stage = np.array([s.stage_ms for s in states])          # (repeats, K)
    med = np.median(stage, axis=0)
    print(f"{'stage':<10} {'median ms':>10} {'min ms':>10} {'max ms':>10}")
    for k in range(stage.shape[1]):
        print(f"scale {k + 1:<4} {med[k]:>10.2f} "
              f"{stage[:, k].min():>10.2f} {stage[:, k].max():>10.2f}")
    dec = np.median([s.decode_ms for s in states])
    tot = np.median([s.total_ms for s in states])
    print(f"{'decode':<10} {dec:>10.2f}")
    print(f"{'total':<10} {tot:>10.2f}")
    accounted = med.sum() + dec
    gap = abs(tot - accounted) / tot * 100.0
    print(f"accounting: stages + decode = {accounted:.2f} ms, "
          f"total = {tot:.2f} ms, gap {gap:.2f}% "
          f"({'within' if gap <= 5.0 else 'OVER'} 5%)")
    print(f"{stage.shape[1]} scale stages over {args.repeats} repeats "
          f"(one warm-up run excluded)")
    return EXIT_OK


_HANDLERS = {"datagen": cmd_datagen, "train": cmd_train, "infer": cmd_infer,
             "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_threads(getattr(args, "threads", None))
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, CompatibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (IOFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VardepthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERIC


if __name__ == "__main__":
    sys.exit(main())
