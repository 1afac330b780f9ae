"""Observation instruments over generation traces.

Per-scale spectral-band deltas, convergence-to-final curves, threshold
sweeps, and the strategy benchmark rows.  Perceptual scoring is out of
scope; the honest desk-scale proxies are feature-space relative error and
spectral energy movement, and they are named as such so nobody mistakes
them for perceptual metrics.  Aggregation uses a fixed summation order so
reports are bit-reproducible for fixed seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .matgrid import spectrum_split
from .stageaccel import (
    RankTable,
    StageConfig,
    StrategyVariant,
    build_rank_table,
    generate_stagevar,
)
from .varengine import (
    Codebook,
    GenerationTrace,
    Predictor,
    ScaleSchedule,
    generate_vanilla,
)

__all__ = [
    "ScaleCurve",
    "SweepRow",
    "BenchRow",
    "frequency_evolution",
    "convergence_curve",
    "alpha_sweep",
    "bench_variants",
    "REFERENCE_RANK_FRACTIONS",
]

# Published large-model operating points (threshold -> rank fraction); carried
# as report metadata for orientation, never asserted against the toy model.
REFERENCE_RANK_FRACTIONS = {
    0.999: 0.595,
    0.99: 0.344,
    0.98: 0.261,
    0.97: 0.211,
    0.96: 0.176,
    0.95: 0.149,
}

DEFAULT_CUTOFF_FRACTION = 0.25


@dataclass(frozen=True)
class ScaleCurve:
    """Named per-scale series: one (scale number, value) entry per point."""

    metric_name: str
    entries: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        entries = tuple((int(k), float(v)) for k, v in self.entries)
        object.__setattr__(self, "entries", entries)
        if any(not np.isfinite(v) for _, v in entries):
            raise ValueError(f"curve {self.metric_name!r} contains non-finite values")

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.entries])


def frequency_evolution(
    trace: GenerationTrace, cutoff: float = DEFAULT_CUTOFF_FRACTION
) -> tuple[ScaleCurve, ScaleCurve]:
    """Per-scale movement of low/high spectral energy of the running feature.

    Each entry is the absolute change of the band energy between consecutive
    executed scales, keyed by the later scale.  A single-scale trace yields
    empty curves.
    """
    if not trace.records:
        raise ValueError("trace has no records")
    bands = [spectrum_split(r.full_map, cutoff) for r in trace.records]
    low_entries = []
    high_entries = []
    for prev, cur, rec in zip(bands, bands[1:], trace.records[1:]):
        low_entries.append((rec.k, abs(cur.low_energy - prev.low_energy)))
        high_entries.append((rec.k, abs(cur.high_energy - prev.high_energy)))
    return (
        ScaleCurve("low_band_energy_delta", tuple(low_entries)),
        ScaleCurve("high_band_energy_delta", tuple(high_entries)),
    )


def convergence_curve(trace: GenerationTrace) -> ScaleCurve:
    """Relative Frobenius distance of each scale's running feature to the final one.

    The running feature already lives at the final grid, so no resampling is
    needed; the last entry is exactly zero.
    """
    if not trace.records:
        raise ValueError("trace has no records")
    final = trace.final_map.data
    denom = float(np.linalg.norm(final))
    if denom == 0.0:
        denom = 1.0
    entries = tuple(
        (rec.k, float(np.linalg.norm(rec.full_map.data - final)) / denom)
        for rec in trace.records
    )
    return ScaleCurve("relative_distance_to_final", entries)


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(b))
    return float(np.linalg.norm(a - b)) / (denom if denom > 0 else 1.0)


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    mean_rank_fraction: float
    rel_error: float
    mod_seconds: float
    add_seconds: float
    flops_total: int
    flops_attention: int


def alpha_sweep(
    prompt_seeds: list[int],
    alphas: list[float],
    variant: StrategyVariant,
    *,
    schedule: ScaleSchedule,
    codebook: Codebook,
    predictor: Predictor,
    guidance: float = 2.0,
    stage_seed: int = 0,
    cfg_zero_in_refinement: bool = True,
    rank_table: RankTable | None = None,
) -> list[SweepRow]:
    """One report row per threshold: rank fraction, error vs vanilla, cost.

    Each threshold is applied uniformly across all refinement scales.  For
    rank-table strategies a table is built from the same seeds when none is
    supplied.
    """
    if not prompt_seeds or not alphas:
        raise ConfigError("sweep needs nonempty seeds and alphas")
    alphas = [float(a) for a in alphas]
    if any(not 0.0 < a <= 1.0 for a in alphas):
        raise ConfigError(f"sweep alphas must lie in (0, 1], got {alphas}")

    if variant.needs_rank_table and rank_table is None:
        rank_table = build_rank_table(
            prompt_seeds, schedule, codebook, predictor, alphas, guidance
        )

    vanilla_finals = {}
    for seed in prompt_seeds:
        final, _ = generate_vanilla(seed, schedule, codebook, predictor, guidance)
        vanilla_finals[seed] = final.data

    num_refinement = len(schedule.refinement_ks)
    rows = []
    for alpha in alphas:
        stage = StageConfig(
            alphas=(alpha,) * num_refinement,
            strategy=variant,
            cfg_zero_in_refinement=cfg_zero_in_refinement,
            seed=stage_seed,
        )
        fractions: list[float] = []
        errors: list[float] = []
        mod = add = 0.0
        flops_total = flops_attention = 0
        for seed in prompt_seeds:
            final, trace = generate_stagevar(
                seed,
                schedule,
                codebook,
                predictor,
                stage,
                guidance=guidance,
                rank_table=rank_table,
            )
            for rec in trace.records:
                if rec.rank is not None:
                    fractions.append(rec.rank / (rec.grid[0] * rec.grid[1]))
            errors.append(_relative_error(final.data, vanilla_finals[seed]))
            mod += trace.mod_seconds
            add += _refinement_add_seconds(trace)
            flops_total += trace.total_flops
            flops_attention += trace.attention_flops
        n = len(prompt_seeds)
        rows.append(
            SweepRow(
                alpha=alpha,
                mean_rank_fraction=float(np.mean(fractions)) if fractions else 1.0,
                rel_error=float(np.mean(errors)),
                mod_seconds=mod / n,
                add_seconds=add / n,
                flops_total=flops_total // n,
                flops_attention=flops_attention // n,
            )
        )
    return rows


@dataclass(frozen=True)
class BenchRow:
    variant: str
    mod_seconds: float
    add_seconds: float
    flops_total: int
    flops_attention: int
    rel_error: float
    rank_fraction: float


def _refinement_add_seconds(trace: GenerationTrace) -> float:
    return sum(r.add_seconds for r in trace.records if r.refinement)


def _mean_rank_fraction(trace: GenerationTrace) -> float:
    fractions = [
        r.rank / (r.grid[0] * r.grid[1])
        for r in trace.records
        if r.refinement and r.rank is not None
    ]
    return float(np.mean(fractions)) if fractions else 1.0


def bench_variants(
    variants: list[StrategyVariant],
    *,
    schedule: ScaleSchedule,
    codebook: Codebook,
    predictor: Predictor,
    alphas: tuple[float, ...],
    rank_table: RankTable | None,
    guidance: float = 2.0,
    stage_seed: int = 0,
    seeds: list[int] | None = None,
    warmup: int = 1,
    repeats: int = 5,
    cfg_zero_in_refinement: bool = True,
    projection_sharing: str = "per-scale",
) -> list[BenchRow]:
    """Strategy comparison rows over shared prompt seeds.

    Mod. is the whole-run wall time inside predictor forwards, Add. the wall
    time spent outside forwards within refinement scales; both are medians
    over ``repeats`` timed runs (after ``warmup`` discarded runs) averaged
    across seeds.  The relative error is measured against the untouched
    baseline on the same prompt seed.
    """
    if repeats < 1 or warmup < 0:
        raise ConfigError("bench needs repeats >= 1 and warmup >= 0")
    seeds = list(seeds) if seeds else [0]

    def stage_for(variant: StrategyVariant) -> StageConfig:
        if variant == StrategyVariant.VANILLA:
            return StageConfig(
                alphas=alphas,
                strategy=variant,
                cfg_zero_in_refinement=False,
                projection_sharing=projection_sharing,
                seed=stage_seed,
            )
        return StageConfig(
            alphas=alphas,
            strategy=variant,
            cfg_zero_in_refinement=cfg_zero_in_refinement,
            projection_sharing=projection_sharing,
            seed=stage_seed,
        )

    baseline_finals: dict[int, np.ndarray] = {}
    for seed in seeds:
        final, _ = generate_stagevar(
            seed,
            schedule,
            codebook,
            predictor,
            stage_for(StrategyVariant.VANILLA),
            guidance=guidance,
        )
        baseline_finals[seed] = final.data

    rows = []
    for variant in variants:
        stage = stage_for(variant)
        table = rank_table if variant.needs_rank_table else None
        mods: list[float] = []
        adds: list[float] = []
        errors: list[float] = []
        fractions: list[float] = []
        flops_total = flops_attention = 0
        for seed in seeds:
            run_mods: list[float] = []
            run_adds: list[float] = []
            final = trace = None
            for i in range(warmup + repeats):
                final, trace = generate_stagevar(
                    seed,
                    schedule,
                    codebook,
                    predictor,
                    stage,
                    guidance=guidance,
                    rank_table=table,
                )
                if i >= warmup:
                    run_mods.append(trace.mod_seconds)
                    run_adds.append(_refinement_add_seconds(trace))
            mods.append(float(np.median(run_mods)))
            adds.append(float(np.median(run_adds)))
            errors.append(_relative_error(final.data, baseline_finals[seed]))
            fractions.append(_mean_rank_fraction(trace))
            flops_total += trace.total_flops
            flops_attention += trace.attention_flops
        n = len(seeds)
        rows.append(
            BenchRow(
                variant=variant.label,
                mod_seconds=float(np.mean(mods)),
                add_seconds=float(np.mean(adds)),
                flops_total=flops_total // n,
                flops_attention=flops_attention // n,
                rel_error=float(np.mean(errors)),
                rank_fraction=float(np.mean(fractions)),
            )
        )
    return rows
