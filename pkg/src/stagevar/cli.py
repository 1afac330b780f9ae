"""Batch front-end: config handling and the four commands.

Commands: ``generate``, ``rank-stats``, ``bench``, ``sweep``.  Configuration
is a single JSON file with the schema documented in the README; absent keys
take package defaults, unknown keys are rejected, and command-line flags win
over file values.  Exit codes: 0 success, 2 configuration error, 3 numeric
failure.  All artifacts are written atomically and embed the hash of the
resolved configuration; report paths render a matplotlib figure next to
every delimited output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, figures
from .errors import ConfigError, DegenerateInputError, NumericFailureError, StageVarError
from .reporting import atomic_write_text, config_hash, write_csv, write_json, write_ppm
from .stageaccel import (
    RankTable,
    StageConfig,
    StrategyVariant,
    build_rank_table,
    generate_stagevar,
    load_rank_table,
    save_rank_table,
)
from .varengine import (
    Codebook,
    GenerationTrace,
    Predictor,
    PredictorConfig,
    ScaleSchedule,
    decode_to_image,
    generate_vanilla,
    make_codebook,
)

__all__ = ["main", "default_config", "resolve_config"]


def default_config() -> dict:
    return {
        "schedule": {"sides": [1, 2, 4, 8, 16, 32, 64], "refinement_start": 5},
        "predictor": {"d": 32, "num_blocks": 8, "heads": 1, "seed": 7, "flop_counter": True},
        "codebook": {"size": 4096, "seed": 11},
        "stage": {
            "variant": "rp-rtr",
            "alphas": [0.96, 0.0, 0.0],
            "cfg_zero_in_refinement": True,
            "projection_sharing": "per-scale",
            "seed": 23,
        },
        "guidance": 2.0,
        "seeds": [7],
        "rank_table": {"path": None, "seeds": [101, 102, 103, 104], "alphas": None},
        "out": "stagevar-out",
        "formats": ["csv"],
        "cutoff_fraction": 0.25,
        "bench": {
            "variants": [1, 2, 3, 4, 5, 6],
            "alphas": [0.96, 0.96, 0.96],
            "seeds": [0],
            "warmup": 1,
            "repeats": 5,
        },
        "sweep": {
            "variant": "low-rank-full",
            "alphas": [0.999, 0.99, 0.98, 0.97, 0.96, 0.95],
            "seeds": [0, 1],
        },
    }


def _merge_checked(defaults: dict, overrides: dict, path: str = "") -> dict:
    merged = dict(defaults)
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            merged[key] = _merge_checked(defaults[key], value, where)
        else:
            merged[key] = value
    return merged


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _validate(config: dict) -> None:
    sched = config["schedule"]
    _require(
        isinstance(sched["sides"], list) and len(sched["sides"]) >= 1,
        "schedule.sides must be a nonempty list",
    )
    pred = config["predictor"]
    for key in ("d", "num_blocks", "heads", "seed"):
        _require(isinstance(pred[key], int), f"predictor.{key} must be an integer")
    _require(pred["d"] >= 3, "predictor.d must be at least 3 (images decode 3 channels)")
    _require(isinstance(config["codebook"]["size"], int), "codebook.size must be an integer")
    _require(
        isinstance(config["seeds"], list) and config["seeds"],
        "seeds must be a nonempty list of integers",
    )
    for fmt in config["formats"]:
        _require(fmt in ("csv", "json"), f"unknown report format {fmt!r}")
    _require(
        isinstance(config["stage"]["alphas"], list) and config["stage"]["alphas"],
        "stage.alphas must be a nonempty list",
    )


def resolve_config(file_path: str | None, flags: argparse.Namespace | None = None) -> dict:
    """Defaults <- config file <- command-line flags, with schema checking."""
    config = default_config()
    if file_path:
        try:
            loaded = json.loads(Path(file_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {file_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        config = _merge_checked(config, loaded)

    if flags is not None:
        if getattr(flags, "seed", None) is not None:
            config["seeds"] = [int(flags.seed)]
        if getattr(flags, "out", None) is not None:
            config["out"] = flags.out
        if getattr(flags, "fmt", None) is not None:
            config["formats"] = [flags.fmt]
        if getattr(flags, "variant", None) is not None:
            target = "sweep" if flags.command == "sweep" else "stage"
            config[target]["variant"] = flags.variant
        if getattr(flags, "alpha", None) is not None:
            try:
                alphas = [float(a) for a in flags.alpha.split(",") if a != ""]
            except ValueError:
                raise ConfigError(f"--alpha expects a comma-separated float list, got {flags.alpha!r}") from None
            section = {"bench": "bench", "sweep": "sweep"}.get(flags.command, "stage")
            config[section]["alphas"] = alphas
    _validate(config)
    return config


def _config_hash(config: dict) -> str:
    # The output directory is purely locational; artifacts produced from the
    # same computation must hash identically wherever they are written.
    return config_hash({k: v for k, v in config.items() if k != "out"})


def _build_parts(config: dict) -> tuple[ScaleSchedule, Codebook, Predictor]:
    sched = config["schedule"]
    pred = config["predictor"]
    try:
        schedule = ScaleSchedule.from_sides(tuple(sched["sides"]), int(sched["refinement_start"]))
        predictor = Predictor(
            PredictorConfig(
                d=int(pred["d"]),
                num_blocks=int(pred["num_blocks"]),
                heads=int(pred["heads"]),
                seed=int(pred["seed"]),
                flop_counter_enabled=bool(pred["flop_counter"]),
            )
        )
        codebook = make_codebook(
            int(config["codebook"]["size"]), int(pred["d"]), int(config["codebook"]["seed"])
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return schedule, codebook, predictor


def _stage_config(config: dict, num_refinement: int) -> StageConfig:
    stage = config["stage"]
    alphas = [float(a) for a in stage["alphas"]]
    if len(alphas) != num_refinement:
        raise ConfigError(
            f"stage.alphas has {len(alphas)} entries for {num_refinement} refinement scales"
        )
    return StageConfig(
        alphas=tuple(alphas),
        strategy=StrategyVariant.parse(stage["variant"]),
        cfg_zero_in_refinement=bool(stage["cfg_zero_in_refinement"]),
        projection_sharing=str(stage["projection_sharing"]),
        seed=int(stage["seed"]),
    )


def _table_alphas(config: dict, needed: list[float]) -> list[float]:
    explicit = config["rank_table"]["alphas"]
    if explicit:
        return sorted({float(a) for a in explicit} | {a for a in needed if a > 0})
    alphas = sorted({a for a in needed if a > 0})
    _require(bool(alphas), "rank table needs at least one positive alpha")
    return alphas


def _obtain_rank_table(
    config: dict,
    schedule: ScaleSchedule,
    codebook: Codebook,
    predictor: Predictor,
    needed_alphas: list[float],
) -> RankTable:
    path = config["rank_table"]["path"]
    if path:
        table = load_rank_table(path)
        missing = [a for a in needed_alphas if a > 0 and a not in table.alphas]
        _require(not missing, f"rank table at {path} lacks alphas {missing}")
        return table
    seeds = [int(s) for s in config["rank_table"]["seeds"]]
    _require(bool(seeds), "rank_table.seeds must be nonempty when no path is given")
    return build_rank_table(
        seeds, schedule, codebook, predictor, _table_alphas(config, needed_alphas),
        guidance=float(config["guidance"]),
    )


def _tokens_digest(tokens: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(tokens, dtype="<i8").tobytes()).hexdigest()[:16]


def _trace_rows(trace: GenerationTrace) -> list[list]:
    rows = []
    for rec in trace.records:
        rows.append(
            [
                rec.k,
                rec.grid[0],
                rec.grid[1],
                rec.variant,
                "" if rec.alpha is None else rec.alpha,
                "" if rec.rank is None else rec.rank,
                rec.flops_attention,
                rec.flops_total,
                _tokens_digest(rec.tokens),
                float(np.linalg.norm(rec.full_map.data)),
            ]
        )
    return rows


_TRACE_HEADER = [
    "k", "h", "w", "variant", "alpha", "rank",
    "flops_attention", "flops_total", "tokens_sha256", "feature_norm",
]


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_generate(config: dict) -> int:
    schedule, codebook, predictor = _build_parts(config)
    stage = _stage_config(config, len(schedule.refinement_ks))
    cfg_hash = _config_hash(config)
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    rank_table = None
    if stage.strategy.needs_rank_table and any(a > 0 for a in stage.alphas):
        rank_table = _obtain_rank_table(config, schedule, codebook, predictor, list(stage.alphas))

    manifest: dict = {
        "command": "generate",
        "config": config,
        "variant": stage.strategy.label,
        "alphas": list(stage.alphas),
        "seeds": [int(s) for s in config["seeds"]],
        "runs": {},
        "artifacts": {},
    }
    cutoff = float(config["cutoff_fraction"])
    emit_json = "json" in config["formats"]

    for seed in config["seeds"]:
        seed = int(seed)
        if stage.strategy == StrategyVariant.VANILLA and not stage.cfg_zero_in_refinement:
            final, trace = generate_vanilla(
                seed, schedule, codebook, predictor, float(config["guidance"])
            )
        else:
            final, trace = generate_stagevar(
                seed, schedule, codebook, predictor, stage,
                guidance=float(config["guidance"]), rank_table=rank_table,
            )

        image_path = out_dir / f"image_seed{seed}.ppm"
        write_ppm(image_path, decode_to_image(final), cfg_hash)
        trace_path = out_dir / f"trace_seed{seed}.csv"
        write_csv(trace_path, _TRACE_HEADER, _trace_rows(trace), cfg_hash)
        timing_path = out_dir / f"timing_seed{seed}.csv"
        write_csv(
            timing_path,
            ["k", "mod_seconds", "add_seconds"],
            [[r.k, r.mod_seconds, r.add_seconds] for r in trace.records],
            cfg_hash,
        )
        if emit_json:
            write_json(
                out_dir / f"trace_seed{seed}.json",
                {"rows": [dict(zip(_TRACE_HEADER, row)) for row in _trace_rows(trace)]},
                cfg_hash,
            )

        low, high = analysis.frequency_evolution(trace, cutoff)
        conv = analysis.convergence_curve(trace)
        figures.save_curves_figure(
            [low, high], out_dir / f"fig_frequency_seed{seed}.png",
            f"band energy movement (seed {seed})", cfg_hash,
        )
        figures.save_curves_figure(
            [conv], out_dir / f"fig_convergence_seed{seed}.png",
            f"distance to final feature (seed {seed})", cfg_hash, logy=False,
        )

        manifest["runs"][str(seed)] = {
            "skipped_scales": list(trace.skipped_scales),
            "flops_total": trace.total_flops,
            "flops_attention": trace.attention_flops,
            "tokens_sha256": [_tokens_digest(r.tokens) for r in trace.records],
        }
        manifest["artifacts"][image_path.name] = _file_digest(image_path)
        manifest["artifacts"][trace_path.name] = _file_digest(trace_path)

    write_json(out_dir / "manifest.json", manifest, cfg_hash)
    print(f"wrote {out_dir} ({len(config['seeds'])} run(s), config {cfg_hash})")
    return 0


def _rank_grid_text(table: RankTable) -> str:
    lines = []
    blocks = sorted({b for b, _, _ in table.entries})
    for alpha in table.alphas:
        scales = sorted({k for _, k, a in table.entries if a == alpha})
        lines.append(f"threshold alpha = {alpha:g}  (mean fraction +- std over {max((e.sample_count for e in table.entries.values()), default=0)} runs)")
        header = "block".ljust(8) + "".join(f"scale {k}".rjust(18) for k in scales)
        lines.append(header)
        for b in blocks:
            cells = []
            for k in scales:
                entry = table.entries.get((b, k, alpha))
                cells.append(
                    f"{entry.mean_fraction:.3f}+-{entry.std_fraction:.4f}".rjust(18)
                    if entry
                    else "-".rjust(18)
                )
            lines.append(str(b).ljust(8) + "".join(cells))
        lines.append("")
    if table.degenerate_inputs:
        lines.append(f"excluded all-zero block inputs: {table.degenerate_inputs}")
    return "\n".join(lines) + "\n"


def cmd_rank_stats(config: dict) -> int:
    schedule, codebook, predictor = _build_parts(config)
    cfg_hash = _config_hash(config)
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    stage_alphas = [float(a) for a in config["stage"]["alphas"]]
    alphas = _table_alphas(config, stage_alphas)
    seeds = [int(s) for s in config["rank_table"]["seeds"]]
    _require(bool(seeds), "rank_table.seeds must be nonempty")
    table = build_rank_table(
        seeds, schedule, codebook, predictor, alphas, guidance=float(config["guidance"])
    )

    table_path = out_dir / "rank_table.dat"
    save_rank_table(table, table_path, extra_meta={"config_hash": cfg_hash})
    atomic_write_text(out_dir / "rank_table.txt", f"# config_hash: {cfg_hash}\n" + _rank_grid_text(table))
    rows = [
        [b, k, a, e.mean_fraction, e.std_fraction, e.sample_count]
        for (b, k, a), e in sorted(table.entries.items())
    ]
    write_csv(
        out_dir / "rank_table.csv",
        ["block", "scale", "alpha", "mean_fraction", "std_fraction", "sample_count"],
        rows,
        cfg_hash,
    )
    for alpha in alphas:
        figures.save_rank_heatmap(table, alpha, out_dir / f"fig_rank_alpha{alpha:g}.png", cfg_hash)
    print(f"wrote {out_dir} (rank table over {len(seeds)} runs, config {cfg_hash})")
    return 0


def cmd_bench(config: dict) -> int:
    schedule, codebook, predictor = _build_parts(config)
    cfg_hash = _config_hash(config)
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    bench = config["bench"]
    variants = [StrategyVariant.parse(v) for v in bench["variants"]]
    alphas = [float(a) for a in bench["alphas"]]
    if len(alphas) != len(schedule.refinement_ks):
        raise ConfigError(
            f"bench.alphas has {len(alphas)} entries for {len(schedule.refinement_ks)} refinement scales"
        )
    rank_table = None
    if any(v.needs_rank_table for v in variants):
        rank_table = _obtain_rank_table(config, schedule, codebook, predictor, alphas)

    rows = analysis.bench_variants(
        variants,
        schedule=schedule,
        codebook=codebook,
        predictor=predictor,
        alphas=tuple(alphas),
        rank_table=rank_table,
        guidance=float(config["guidance"]),
        stage_seed=int(config["stage"]["seed"]),
        seeds=[int(s) for s in bench["seeds"]],
        warmup=int(bench["warmup"]),
        repeats=int(bench["repeats"]),
        cfg_zero_in_refinement=bool(config["stage"]["cfg_zero_in_refinement"]),
        projection_sharing=str(config["stage"]["projection_sharing"]),
    )
    header = [
        "variant", "mod_seconds", "add_seconds",
        "flops_total", "flops_attention", "rel_error", "rank_fraction",
    ]
    data = [
        [r.variant, r.mod_seconds, r.add_seconds, r.flops_total, r.flops_attention,
         r.rel_error, r.rank_fraction]
        for r in rows
    ]
    write_csv(out_dir / "bench.csv", header, data, cfg_hash)
    if "json" in config["formats"]:
        write_json(out_dir / "bench.json", {"rows": [dict(zip(header, row)) for row in data]}, cfg_hash)
    figures.save_bench_figure(rows, out_dir / "fig_bench.png", cfg_hash)
    write_json(
        out_dir / "bench_manifest.json",
        {"command": "bench", "config": config, "variants": [r.variant for r in rows]},
        cfg_hash,
    )
    print(f"wrote {out_dir} ({len(rows)} bench rows, config {cfg_hash})")
    return 0


def cmd_sweep(config: dict) -> int:
    schedule, codebook, predictor = _build_parts(config)
    cfg_hash = _config_hash(config)
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    sweep = config["sweep"]
    variant = StrategyVariant.parse(sweep["variant"])
    alphas = [float(a) for a in sweep["alphas"]]
    seeds = [int(s) for s in sweep["seeds"]]
    rank_table = None
    if variant.needs_rank_table:
        rank_table = _obtain_rank_table(config, schedule, codebook, predictor, alphas)

    rows = analysis.alpha_sweep(
        seeds,
        alphas,
        variant,
        schedule=schedule,
        codebook=codebook,
        predictor=predictor,
        guidance=float(config["guidance"]),
        stage_seed=int(config["stage"]["seed"]),
        cfg_zero_in_refinement=bool(config["stage"]["cfg_zero_in_refinement"]),
        rank_table=rank_table,
    )
    header = [
        "alpha", "mean_rank_fraction", "rel_error",
        "mod_seconds", "add_seconds", "flops_total", "flops_attention",
    ]
    data = [
        [r.alpha, r.mean_rank_fraction, r.rel_error, r.mod_seconds, r.add_seconds,
         r.flops_total, r.flops_attention]
        for r in rows
    ]
    reference = " ".join(
        f"{a:g}={100 * f:.1f}%" for a, f in sorted(analysis.REFERENCE_RANK_FRACTIONS.items(), reverse=True)
    )
    lines = [
        f"# config_hash: {cfg_hash}",
        f"# reference_rank_fractions_full_scale: {reference}",
        ",".join(header),
    ]
    lines.extend(",".join(repr(c) if isinstance(c, float) else str(c) for c in row) for row in data)
    atomic_write_text(out_dir / "sweep.csv", "\n".join(lines) + "\n")
    if "json" in config["formats"]:
        write_json(
            out_dir / "sweep.json",
            {
                "reference_rank_fractions_full_scale": analysis.REFERENCE_RANK_FRACTIONS,
                "rows": [dict(zip(header, row)) for row in data],
            },
            cfg_hash,
        )
    figures.save_sweep_figure(rows, out_dir / "fig_sweep.png", cfg_hash)
    write_json(
        out_dir / "sweep_manifest.json",
        {"command": "sweep", "config": config, "variant": variant.label},
        cfg_hash,
    )
    print(f"wrote {out_dir} ({len(rows)} sweep rows, config {cfg_hash})")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagevar",
        description="Desk-scale next-scale-prediction generation with stage-aware acceleration.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config file (see README for the schema)")
    shared.add_argument("--seed", type=int, help="single prompt seed (overrides config seeds)")
    shared.add_argument("--out", help="output directory")
    shared.add_argument(
        "--variant",
        choices=["vanilla", "1", "2", "3", "4", "5", "6"],
        help="strategy variant (number or 'vanilla')",
    )
    shared.add_argument("--alpha", help="comma-separated threshold list, 0 skips a scale")
    shared.add_argument("--format", dest="fmt", choices=["csv", "json"], help="report format")

    sub.add_parser("generate", parents=[shared], help="run generation, write image + trace + manifest")
    sub.add_parser("rank-stats", parents=[shared], help="predetermine rank fractions over a seed corpus")
    sub.add_parser("bench", parents=[shared], help="strategy latency/FLOP/error comparison")
    sub.add_parser("sweep", parents=[shared], help="threshold sweep report")
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "rank-stats": cmd_rank_stats,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = resolve_config(args.config, args)
        return _COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericFailureError, DegenerateInputError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except StageVarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
