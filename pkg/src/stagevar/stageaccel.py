"""Stage-aware acceleration of the refinement scales.

Establishment scales always run untouched.  Each refinement scale runs one
of six strategies:

    1 vanilla        full forward on the step input (baseline)
    2 low-rank-full  exact SVD truncation of the input, full-width forward
    3 svd-rdim       energy-selected rank r, forward on the r x d core,
                     output rebuilt from the input's left factors plus left
                     factors of the upsampled previous-step output
    4 svd-rdim-pred  as 3 with a predetermined rank and rank-r-only
                     decompositions (no spectrum scan)
    5 rp-lls         seeded Gaussian projection to r x d, forward, output
                     rebuilt through least-squares reconstruction weights
                     plus weights regressed against the upsampled cache
    6 rp-rtr         seeded Gaussian projection to r x d, forward, then the
                     r computed rows are placed at squared-norm-sampled
                     token positions and the rest filled from the upsampled
                     cache (the fast path)

Strategies 4-6 take their rank from a precomputed table of per-block rank
fractions; alpha = 0 skips a scale outright and carries the running feature
forward.  With the guidance bypass active (default) every refinement scale
runs exactly one null-prompt forward.

The decomposition routine differs per strategy on purpose: 2 needs the most
accurate full factorization (LAPACK SVD), 3 needs the full spectrum but only
r leading vectors (Gram eigendecomposition), and 4 needs r leading vectors
only (seeded randomized range finder).  The additive left-factor / weight
compensation in 3-5 is applied literally as stated, without renormalization;
its conditioning is a known open point.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .matgrid import FeatureMap, downsample, upsample
from .numcore import (
    random_project,
    sample_rows,
    select_rank,
    solve_lls,
    svd,
    truncate,
)
from .reporting import atomic_write_text
from .seeding import child_seed
from .varengine import (
    Codebook,
    Condition,
    FlopCounter,
    GenerationTrace,
    Predictor,
    ScaleSchedule,
    StepStats,
    advance_feature,
    generate_vanilla,
    guided_forward,
    null_condition,
    prompt_condition,
    record_step,
    start_state,
    vanilla_step,
)
from .varengine import _timed_forward  # shared timing boundary for Mod./Add.

__all__ = [
    "StrategyVariant",
    "StageConfig",
    "RankEntry",
    "RankTable",
    "OutputCache",
    "build_rank_table",
    "refinement_forward",
    "restore_tokens",
    "generate_stagevar",
    "save_rank_table",
    "load_rank_table",
]

RANK_TABLE_HEADER = "stagevar-ranktable v1"


class StrategyVariant(Enum):
    VANILLA = 1
    LOW_RANK_FULL = 2
    SVD_RDIM = 3
    SVD_RDIM_PRED = 4
    RP_LLS = 5
    RP_RTR = 6

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def needs_rank_table(self) -> bool:
        return self in (
            StrategyVariant.SVD_RDIM_PRED,
            StrategyVariant.RP_LLS,
            StrategyVariant.RP_RTR,
        )

    @property
    def needs_cache(self) -> bool:
        return self in (
            StrategyVariant.SVD_RDIM,
            StrategyVariant.SVD_RDIM_PRED,
            StrategyVariant.RP_LLS,
            StrategyVariant.RP_RTR,
        )

    @classmethod
    def parse(cls, value) -> "StrategyVariant":
        if isinstance(value, cls):
            return value
        if isinstance(value, int) or (isinstance(value, str) and value.isdigit()):
            number = int(value)
            try:
                return cls(number)
            except ValueError:
                raise ConfigError(f"unknown strategy variant number {number}") from None
        if isinstance(value, str):
            name = value.strip().lower()
            for variant, label in _LABELS.items():
                if name == label:
                    return variant
            raise ConfigError(f"unknown strategy variant {value!r}")
        raise ConfigError(f"cannot parse strategy variant from {value!r}")


_LABELS = {
    StrategyVariant.VANILLA: "vanilla",
    StrategyVariant.LOW_RANK_FULL: "low-rank-full",
    StrategyVariant.SVD_RDIM: "svd-rdim",
    StrategyVariant.SVD_RDIM_PRED: "svd-rdim-pred",
    StrategyVariant.RP_LLS: "rp-lls",
    StrategyVariant.RP_RTR: "rp-rtr",
}


@dataclass(frozen=True)
class StageConfig:
    """Per-run acceleration settings for the refinement scales."""

    alphas: tuple[float, ...]
    strategy: StrategyVariant = StrategyVariant.RP_RTR
    cfg_zero_in_refinement: bool = True
    projection_sharing: str = "per-scale"
    seed: int = 0

    def __post_init__(self) -> None:
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "alphas", alphas)
        if not alphas:
            raise ConfigError("stage config needs at least one alpha")
        if any(not 0.0 <= a <= 1.0 for a in alphas):
            raise ConfigError(f"alphas must lie in [0, 1], got {alphas}")
        if self.projection_sharing not in ("per-scale", "per-block"):
            raise ConfigError(
                f"projection_sharing must be 'per-scale' or 'per-block', got {self.projection_sharing!r}"
            )


@dataclass(frozen=True)
class RankEntry:
    mean_fraction: float
    std_fraction: float
    sample_count: int


@dataclass
class RankTable:
    """Predetermined rank fractions keyed by (block index, scale number, alpha)."""

    entries: dict[tuple[int, int, float], RankEntry]
    alphas: tuple[float, ...]
    scale_ks: tuple[int, ...]
    num_blocks: int
    degenerate_inputs: int = 0
    meta: dict = field(default_factory=dict)

    def lookup(self, block: int, k: int, alpha: float) -> RankEntry:
        key = (int(block), int(k), float(alpha))
        try:
            return self.entries[key]
        except KeyError:
            raise ConfigError(
                f"rank table has no entry for block={block}, scale={k}, alpha={alpha}"
            ) from None

    def rank_for(self, block: int, k: int, alpha: float, m: int, cap: int | None = None) -> int:
        entry = self.lookup(block, k, alpha)
        r = max(1, int(round(entry.mean_fraction * m)))
        limit = m if cap is None else min(m, cap)
        return min(r, limit)


@dataclass(frozen=True)
class OutputCache:
    """Previous executed scale's block-stack output, at its own grid."""

    feature: FeatureMap


def build_rank_table(
    corpus_seeds: list[int],
    schedule: ScaleSchedule,
    codebook: Codebook,
    predictor: Predictor,
    alphas: list[float],
    guidance: float = 2.0,
) -> RankTable:
    """Predetermine rank fractions from vanilla runs over a seed corpus.

    Every refinement scale of every run contributes the singular spectrum of
    each block's input (taken on the null-prompt forward, which is what the
    accelerated path later sees); the per-alpha selected rank is recorded as
    a fraction of the token count.  All-zero block inputs are excluded and
    counted.
    """
    if not corpus_seeds:
        raise ConfigError("rank table needs a nonempty seed corpus")
    if not schedule.refinement_ks:
        raise ConfigError("schedule has no refinement scales")
    alphas = [float(a) for a in alphas]
    if any(not 0.0 < a <= 1.0 for a in alphas):
        raise ConfigError(f"rank table alphas must lie in (0, 1], got {alphas}")

    samples: dict[tuple[int, int, float], list[float]] = {}
    degenerate = [0]

    def hook(k: int, block_inputs: list[np.ndarray]) -> None:
        if not schedule.is_refinement(k):
            return
        for b, x in enumerate(block_inputs):
            svals = np.linalg.svd(x, compute_uv=False)
            if not (svals > 0).any():
                degenerate[0] += 1
                continue
            m = x.shape[0]
            for a in alphas:
                r = select_rank(svals, a)
                samples.setdefault((b, k, a), []).append(r / m)

    for seed in corpus_seeds:
        generate_vanilla(seed, schedule, codebook, predictor, guidance, collect_hook=hook)

    entries = {
        key: RankEntry(
            mean_fraction=float(np.mean(fr)),
            std_fraction=float(np.std(fr)),
            sample_count=len(fr),
        )
        for key, fr in samples.items()
    }
    return RankTable(
        entries=entries,
        alphas=tuple(alphas),
        scale_ks=schedule.refinement_ks,
        num_blocks=predictor.config.num_blocks,
        degenerate_inputs=degenerate[0],
    )


def _orient(u: np.ndarray, vt: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    # Largest-magnitude entry of each left vector made nonnegative (ties to
    # the lower row index), matching the svd() convention.
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, None if vt is None else vt * signs[:, None]


def _gram_factors(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full spectrum plus factors from the Gram eigendecomposition.

    One M*d^2 product plus a d x d (or M x M) symmetric eigensolve; cheaper
    than a full SVD when only the spectrum and leading vectors matter.
    Near-null directions get zeroed factor columns.
    """
    m, d = a.shape
    if d <= m:
        vals, vecs = np.linalg.eigh(a.T @ a)
        vals = np.clip(vals[::-1], 0.0, None)
        v = vecs[:, ::-1]
        sigma = np.sqrt(vals)
        keep = sigma > (sigma[0] if sigma[0] > 0 else 1.0) * 1e-12
        u = np.zeros((m, d))
        if keep.any():
            u[:, keep] = (a @ v[:, keep]) / sigma[keep]
        u, vt = _orient(u, v.T)
    else:
        vals, vecs = np.linalg.eigh(a @ a.T)
        vals = np.clip(vals[::-1], 0.0, None)
        u = vecs[:, ::-1]
        sigma = np.sqrt(vals)
        keep = sigma > (sigma[0] if sigma[0] > 0 else 1.0) * 1e-12
        vt = np.zeros((m, d))
        if keep.any():
            vt[keep] = (a.T @ u[:, keep]).T / sigma[keep][:, None]
        u, vt = _orient(u, vt)
    return sigma, u, vt


def _randomized_factors(
    a: np.ndarray, r: int, seed: int, oversample: int = 8
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded randomized rank-r factorization (range finder + small SVD)."""
    m, d = a.shape
    n = min(m, d)
    r = min(r, n)
    k = min(n, r + oversample)
    rng = np.random.default_rng(seed)
    sketch = a @ rng.standard_normal((d, k))
    sketch = a @ (a.T @ sketch)  # one power pass sharpens the captured range
    q, _ = np.linalg.qr(sketch)
    ub, s, vt = np.linalg.svd(q.T @ a, full_matrices=False)
    u = q @ ub
    u, vt = _orient(u, vt)
    return u[:, :r], s[:r], vt[:r]


def restore_tokens(
    f_r_out: np.ndarray,
    f_tilde_prev: FeatureMap,
    cache: OutputCache,
    r: int,
    seed: int,
) -> FeatureMap:
    """Place the r computed rows at sampled token positions, fill the rest
    from the upsampled previous-step output."""
    f_r_out = np.asarray(f_r_out, dtype=np.float64)
    if f_r_out.shape[0] != r:
        raise ValueError(f"expected {r} computed rows, got {f_r_out.shape[0]}")
    sampled = sample_rows(f_tilde_prev.data, r, seed)
    if sampled.indices.shape[0] != r:
        raise ValueError("sampled index count does not match r")
    cache_up = upsample(cache.feature, f_tilde_prev.grid)
    out = cache_up.data.copy()
    out[sampled.indices] = f_r_out
    return FeatureMap(out, f_tilde_prev.grid)


def _upsampled_cache(cache: OutputCache | None, grid: tuple[int, int], variant: StrategyVariant) -> FeatureMap:
    if cache is None:
        raise ConfigError(
            f"strategy {variant.label} needs the previous step's output cache; "
            "the first refinement scale must follow at least one executed scale"
        )
    return upsample(cache.feature, grid)


def refinement_forward(
    variant: StrategyVariant,
    feat_in: FeatureMap,
    cache: OutputCache | None,
    rank_table: RankTable | None,
    cond: Condition,
    *,
    predictor: Predictor,
    k: int,
    alpha: float,
    stage: StageConfig,
    guidance: float,
    counter: FlopCounter | None = None,
    stats: StepStats | None = None,
) -> tuple[FeatureMap, int | None]:
    """One accelerated scale step's block-stack output, plus the rank used."""
    grid = feat_in.grid
    gain = Predictor.level_gain(grid)

    def forward(x: FeatureMap) -> FeatureMap:
        if stage.cfg_zero_in_refinement:
            return _timed_forward(
                predictor, x, null_condition(predictor.config.d), gain, counter, stats
            )
        return guided_forward(predictor, x, cond, guidance, gain, counter=counter, stats=stats)

    def table_rank(block: int, cap: int | None = None) -> int:
        if rank_table is None:
            raise ConfigError(f"strategy {variant.label} needs a rank table")
        return rank_table.rank_for(block, k, alpha, feat_in.m, cap)

    if stage.projection_sharing == "per-block" and variant != StrategyVariant.VANILLA:
        return _per_block_forward(
            variant, feat_in, cache, rank_table, cond,
            predictor=predictor, k=k, alpha=alpha, stage=stage, guidance=guidance,
            counter=counter, stats=stats,
        )

    if variant == StrategyVariant.VANILLA:
        return forward(feat_in), None

    if variant == StrategyVariant.LOW_RANK_FULL:
        factors = svd(feat_in.data)
        r = select_rank(factors.sigma, alpha)
        return forward(FeatureMap(truncate(factors, r), grid)), r

    if variant == StrategyVariant.SVD_RDIM:
        sigma, u, vt = _gram_factors(feat_in.data)
        if not (sigma > 0).any():
            raise DegenerateInputError("all-zero refinement input")
        r = select_rank(sigma, alpha)
        core = sigma[:r, None] * vt[:r]
        core_out = forward(FeatureMap(core, (r, 1)))
        cache_up = _upsampled_cache(cache, grid, variant)
        _, u_cache, _ = _gram_factors(cache_up.data)
        left = u[:, :r] + u_cache[:, :r]
        return FeatureMap(left @ core_out.data, grid), r

    if variant == StrategyVariant.SVD_RDIM_PRED:
        r = table_rank(block=0, cap=min(feat_in.m, feat_in.d))
        u_r, s_r, vt_r = _randomized_factors(feat_in.data, r, child_seed(stage.seed, k, 2))
        core_out = forward(FeatureMap(s_r[:, None] * vt_r, (r, 1)))
        cache_up = _upsampled_cache(cache, grid, variant)
        u_cache, _, _ = _randomized_factors(cache_up.data, r, child_seed(stage.seed, k, 3))
        left = u_r + u_cache
        return FeatureMap(left @ core_out.data, grid), r

    if variant == StrategyVariant.RP_LLS:
        r = table_rank(block=0)
        reduced, _ = random_project(feat_in.data, r, child_seed(stage.seed, k, 0))
        core_out = forward(FeatureMap(reduced, (r, 1)))
        weights_in = solve_lls(reduced, feat_in.data)
        cache_up = _upsampled_cache(cache, grid, variant)
        weights_cache = solve_lls(core_out.data, cache_up.data)
        return FeatureMap((weights_in + weights_cache) @ core_out.data, grid), r

    if variant == StrategyVariant.RP_RTR:
        r = table_rank(block=0)
        reduced, _ = random_project(feat_in.data, r, child_seed(stage.seed, k, 0))
        core_out = forward(FeatureMap(reduced, (r, 1)))
        if cache is None:
            raise ConfigError(
                "rp-rtr needs the previous step's output cache; "
                "the first refinement scale must follow at least one executed scale"
            )
        return restore_tokens(core_out.data, feat_in, cache, r, child_seed(stage.seed, k, 1)), r

    raise ConfigError(f"unhandled strategy variant {variant!r}")


def _per_block_forward(
    variant: StrategyVariant,
    feat_in: FeatureMap,
    cache: OutputCache | None,
    rank_table: RankTable | None,
    cond: Condition,
    *,
    predictor: Predictor,
    k: int,
    alpha: float,
    stage: StageConfig,
    guidance: float,
    counter: FlopCounter | None,
    stats: StepStats | None,
) -> tuple[FeatureMap, int | None]:
    """Per-block sharing: every block gets its own reduction and restoration.

    Supported for the strategies whose reduction is re-drawable per block
    (2, 5, 6).  Unsampled rows of every block's output are filled from the
    same upsampled previous-step cache.
    """
    if variant not in (
        StrategyVariant.LOW_RANK_FULL,
        StrategyVariant.RP_LLS,
        StrategyVariant.RP_RTR,
    ):
        raise ConfigError(
            f"per-block projection sharing is not supported for strategy {variant.label}"
        )
    grid = feat_in.grid
    gain = Predictor.level_gain(grid)
    cache_up = None
    if variant != StrategyVariant.LOW_RANK_FULL:
        cache_up = _upsampled_cache(cache, grid, variant)

    def run_stack(x: np.ndarray, cond_used: Condition) -> tuple[np.ndarray, int | None]:
        used_rank = None
        prepared = predictor.embed_condition(x, cond_used, grid)
        h = prepared
        forward_seconds = 0.0
        for b in range(predictor.config.num_blocks):
            if variant == StrategyVariant.LOW_RANK_FULL:
                factors = svd(h)
                r = select_rank(factors.sigma, alpha)
                tb = time.perf_counter()
                h = predictor.run_block(b, truncate(factors, r), counter=counter)
                forward_seconds += time.perf_counter() - tb
            else:
                if rank_table is None:
                    raise ConfigError(f"strategy {variant.label} needs a rank table")
                r = rank_table.rank_for(b, k, alpha, h.shape[0])
                reduced, _ = random_project(h, r, child_seed(stage.seed, k, b, 0))
                tb = time.perf_counter()
                z = predictor.run_block(b, reduced, counter=counter)
                forward_seconds += time.perf_counter() - tb
                if variant == StrategyVariant.RP_LLS:
                    weights = solve_lls(reduced, h) + solve_lls(z, cache_up.data)
                    h = weights @ z
                else:
                    sampled = sample_rows(h, r, child_seed(stage.seed, k, b, 1))
                    merged = cache_up.data.copy()
                    merged[sampled.indices] = z
                    h = merged
            used_rank = r
        if stats is not None:
            # Only block time counts as model time; reductions land in Add.
            stats.forward_seconds += forward_seconds
        return predictor.finalize(h, prepared, gain), used_rank

    if stage.cfg_zero_in_refinement:
        out, used_rank = run_stack(feat_in.data, null_condition(predictor.config.d))
        return FeatureMap(out, grid), used_rank
    uncond, used_rank = run_stack(feat_in.data, null_condition(predictor.config.d))
    if guidance == 0.0:
        return FeatureMap(uncond, grid), used_rank
    conditioned, _ = run_stack(feat_in.data, cond)
    return FeatureMap(uncond + guidance * (conditioned - uncond), grid), used_rank


def generate_stagevar(
    prompt_seed: int,
    schedule: ScaleSchedule,
    codebook: Codebook,
    predictor: Predictor,
    stage: StageConfig,
    *,
    guidance: float = 2.0,
    rank_table: RankTable | None = None,
) -> tuple[FeatureMap, GenerationTrace]:
    """Full generation with accelerated refinement scales.

    Establishment scales run exactly as the vanilla loop.  Refinement scales
    with alpha = 0 are skipped outright: the running feature carries forward
    untouched (it already lives at the final grid) and the cache is left
    alone.  Executed refinement scales run the configured strategy, then
    quantize and accumulate exactly like the vanilla path.
    """
    refinement_ks = schedule.refinement_ks
    if len(stage.alphas) != len(refinement_ks):
        raise ConfigError(
            f"stage config has {len(stage.alphas)} alphas for {len(refinement_ks)} refinement scales"
        )
    if stage.strategy.needs_rank_table and rank_table is None and any(a > 0 for a in stage.alphas):
        raise ConfigError(f"strategy {stage.strategy.label} needs a rank table")

    cond = prompt_condition(prompt_seed, predictor.config.d)
    counter = FlopCounter() if predictor.config.flop_counter_enabled else None
    trace = GenerationTrace(prompt_seed=int(prompt_seed), guidance=float(guidance))
    feat_full, feat_in = start_state(schedule, predictor)
    cache: OutputCache | None = None

    for k in range(1, schedule.num_scales + 1):
        refining = schedule.is_refinement(k)
        alpha = stage.alphas[k - schedule.refinement_start] if refining else None
        if refining and alpha == 0.0:
            trace.skipped_scales.append(k)
            feat_in = None
            continue

        before = counter.snapshot() if counter is not None else (0, 0)
        stats = StepStats()
        t0 = time.perf_counter()
        if feat_in is None:  # previous scale was skipped
            feat_in = downsample(feat_full, schedule.grid(k))

        if not refining:
            feat_full, out_map, tokens, feat_in = vanilla_step(
                k,
                feat_full,
                feat_in,
                schedule=schedule,
                codebook=codebook,
                predictor=predictor,
                cond=cond,
                guidance=guidance,
                counter=counter,
                stats=stats,
            )
            variant_label = "vanilla"
            rank = None
        else:
            out_map, rank = refinement_forward(
                stage.strategy,
                feat_in,
                cache,
                rank_table,
                cond,
                predictor=predictor,
                k=k,
                alpha=alpha,
                stage=stage,
                guidance=guidance,
                counter=counter,
                stats=stats,
            )
            feat_full, tokens, feat_in = advance_feature(feat_full, out_map, codebook, schedule, k)
            variant_label = stage.strategy.label
        cache = OutputCache(out_map)

        record_step(
            trace,
            k=k,
            grid=schedule.grid(k),
            variant=variant_label,
            tokens=tokens,
            out_map=out_map,
            full_map=feat_full,
            counter_before=before,
            counter=counter,
            step_seconds=time.perf_counter() - t0,
            forward_seconds=stats.forward_seconds,
            alpha=alpha,
            rank=rank,
            refinement=refining,
        )
    return feat_full, trace


def save_rank_table(table: RankTable, path, extra_meta: dict | None = None) -> None:
    """Write the versioned rank table file (header line + JSON body)."""
    payload = {
        "alphas": list(table.alphas),
        "scale_ks": list(table.scale_ks),
        "num_blocks": table.num_blocks,
        "degenerate_inputs": table.degenerate_inputs,
        "meta": {**table.meta, **(extra_meta or {})},
        "entries": [
            {
                "block": block,
                "scale": k,
                "alpha": alpha,
                "mean_fraction": entry.mean_fraction,
                "std_fraction": entry.std_fraction,
                "sample_count": entry.sample_count,
            }
            for (block, k, alpha), entry in sorted(table.entries.items())
        ],
    }
    atomic_write_text(path, RANK_TABLE_HEADER + "\n" + json.dumps(payload, indent=1) + "\n")


def load_rank_table(path) -> RankTable:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != RANK_TABLE_HEADER:
            raise ConfigError(f"unrecognized rank table header {header!r} in {path}")
        payload = json.load(fh)
    entries = {
        (int(e["block"]), int(e["scale"]), float(e["alpha"])): RankEntry(
            mean_fraction=float(e["mean_fraction"]),
            std_fraction=float(e["std_fraction"]),
            sample_count=int(e["sample_count"]),
        )
        for e in payload["entries"]
    }
    return RankTable(
        entries=entries,
        alphas=tuple(float(a) for a in payload["alphas"]),
        scale_ks=tuple(int(k) for k in payload["scale_ks"]),
        num_blocks=int(payload["num_blocks"]),
        degenerate_inputs=int(payload.get("degenerate_inputs", 0)),
        meta=dict(payload.get("meta", {})),
    )
