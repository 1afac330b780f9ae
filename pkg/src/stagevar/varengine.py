"""Desk-scale next-scale-prediction engine.

A coarse-to-fine generator: at every scale step the running full-resolution
feature is downsampled to the step's grid, pushed through a frozen
seeded-random transformer stack, quantized against a codebook, and the
quantized residual is upsampled and accumulated back into the running
feature.  Classifier-free guidance blends a prompt-conditioned forward with
a null-prompt forward.

The predictor is deliberately a toy: random frozen weights, a bounded MLP
nonlinearity, and a per-scale output gain standing in for a trained model's
scale conditioning.  Everything that matters downstream (cost scaling in
the token count, determinism, the pipeline equivalences) holds without
trained weights, and nothing here should be mistaken for a trained model.

FLOP accounting is analytic, per block, with M tokens and width d:

    attention: 4*M^2*d + 8*M*d^2     (scores + weighted sum, qkv/out projections)
    mlp:       16*M*d^2              (two layers at 4x expansion)

These closed forms are the single source of truth for every cost assertion.
"""

from __future__ import annotations

import functools
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericFailureError
from .matgrid import FeatureMap, downsample, upsample
from .seeding import child_seed

__all__ = [
    "ScaleSchedule",
    "Codebook",
    "Condition",
    "PredictorConfig",
    "Predictor",
    "FlopCounter",
    "StepStats",
    "ScaleRecord",
    "GenerationTrace",
    "default_desk_schedule",
    "make_codebook",
    "null_condition",
    "prompt_condition",
    "quantize",
    "predictor_forward",
    "cfg_combine",
    "vanilla_step",
    "generate_vanilla",
    "encode_multiscale",
    "decode_to_image",
]

_LN_EPS = 1e-6
_COND_SCALE = 0.1
_POS_SCALE = 1.5


@dataclass(frozen=True)
class ScaleSchedule:
    """Ordered grids (h_k, w_k), k = 1..K, plus the stage split.

    Scale numbers are 1-based.  Steps with k >= refinement_start form the
    fidelity-refinement stage; earlier steps are the establishment stages.
    """

    scales: tuple[tuple[int, int], ...]
    refinement_start: int

    def __post_init__(self) -> None:
        scales = tuple((int(h), int(w)) for h, w in self.scales)
        object.__setattr__(self, "scales", scales)
        if not scales:
            raise ValueError("schedule needs at least one scale")
        if scales[0] != (1, 1):
            raise ValueError(f"first scale must be (1, 1), got {scales[0]}")
        for (h0, w0), (h1, w1) in zip(scales, scales[1:]):
            if h1 < h0 or w1 < w0:
                raise ValueError("grid sizes must be nondecreasing in both axes")
        if any(h < 1 or w < 1 for h, w in scales):
            raise ValueError("grid dimensions must be positive")
        if not 1 <= self.refinement_start <= len(scales):
            raise ValueError(
                f"refinement_start must lie in [1, {len(scales)}], got {self.refinement_start}"
            )

    @classmethod
    def from_sides(cls, sides: tuple[int, ...], refinement_start: int) -> "ScaleSchedule":
        return cls(tuple((s, s) for s in sides), refinement_start)

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @property
    def final_grid(self) -> tuple[int, int]:
        return self.scales[-1]

    def grid(self, k: int) -> tuple[int, int]:
        if not 1 <= k <= self.num_scales:
            raise ValueError(f"scale number must lie in [1, {self.num_scales}], got {k}")
        return self.scales[k - 1]

    def is_refinement(self, k: int) -> bool:
        return k >= self.refinement_start

    @property
    def refinement_ks(self) -> tuple[int, ...]:
        return tuple(range(self.refinement_start, self.num_scales + 1))


def default_desk_schedule() -> ScaleSchedule:
    """Seven square scales with token sides 1..64; the last three refine."""
    return ScaleSchedule.from_sides((1, 2, 4, 8, 16, 32, 64), refinement_start=5)


@dataclass(frozen=True)
class Codebook:
    """V x d quantization table, reproducible from its seed."""

    vectors: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        vectors = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "vectors", vectors)
        if vectors.ndim != 2 or vectors.shape[0] < 2:
            raise ValueError(f"codebook needs at least 2 rows, got shape {vectors.shape}")
        if not np.isfinite(vectors).all():
            raise ValueError("codebook contains non-finite entries")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


def make_codebook(size: int, d: int, seed: int) -> Codebook:
    """Seeded codebook with log-spaced row magnitudes and an exact zero row.

    Row 0 is the zero vector so residual quantization can express "no
    change"; the remaining rows are random directions with norms spread
    geometrically over three decades, letting late small residuals be
    matched at their own magnitude.
    """
    if size < 2:
        raise ValueError(f"codebook size must be >= 2, got {size}")
    rng = np.random.default_rng(child_seed(seed, 0xC0DE))
    directions = rng.standard_normal((size, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    magnitudes = np.geomspace(1e-3, 2.0, size) * np.sqrt(d)
    vectors = directions * magnitudes[:, None]
    vectors[0] = 0.0
    return Codebook(vectors=vectors, seed=int(seed))


@dataclass(frozen=True)
class Condition:
    """Prompt stand-in: a length-d embedding added to every token."""

    embedding: np.ndarray
    is_null: bool

    def __post_init__(self) -> None:
        emb = np.asarray(self.embedding, dtype=np.float64)
        object.__setattr__(self, "embedding", emb)
        if emb.ndim != 1:
            raise ValueError(f"embedding must be 1-D, got shape {emb.shape}")
        if not np.isfinite(emb).all():
            raise ValueError("condition embedding contains non-finite entries")
        if self.is_null and np.any(emb != 0.0):
            raise ValueError("null condition must have an all-zero embedding")


def null_condition(d: int) -> Condition:
    return Condition(embedding=np.zeros(d), is_null=True)


def prompt_condition(prompt_seed: int, d: int) -> Condition:
    """Seeded embedding standing in for text conditioning."""
    rng = np.random.default_rng(child_seed(prompt_seed, 0x9E0))
    return Condition(embedding=_COND_SCALE * rng.standard_normal(d), is_null=False)


@dataclass(frozen=True)
class PredictorConfig:
    d: int
    num_blocks: int = 8
    heads: int = 1
    seed: int = 0
    flop_counter_enabled: bool = True

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError(f"d must be positive, got {self.d}")
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.heads < 1 or self.d % self.heads != 0:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")


@dataclass
class FlopCounter:
    """Analytic multiply-add counter, exact integer arithmetic."""

    attention: int = 0
    mlp: int = 0

    def add_block(self, m: int, d: int) -> None:
        self.attention += 4 * m * m * d + 8 * m * d * d
        self.mlp += 16 * m * d * d

    @property
    def total(self) -> int:
        return self.attention + self.mlp

    def snapshot(self) -> tuple[int, int]:
        return self.attention, self.total


@dataclass
class StepStats:
    """Wall time spent inside predictor forwards during one scale step."""

    forward_seconds: float = 0.0


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS)


@functools.lru_cache(maxsize=64)
def _positional_field(grid: tuple[int, int], d: int) -> np.ndarray:
    """Sinusoidal 2-D position code on corner-aligned [0, 1] coordinates.

    Without it the stack is permutation-equivariant and a constant input
    would stay constant through every scale.  Resolution-consistent: every
    grid samples the same continuous field.
    """
    h, w = grid
    ys = np.zeros(h) if h == 1 else np.arange(h) / (h - 1)
    xs = np.zeros(w) if w == 1 else np.arange(w) / (w - 1)
    coords = np.stack(
        [np.repeat(ys, w), np.tile(xs, h)], axis=1
    )  # (M, 2) row-major grid order
    pe = np.empty((h * w, d))
    for c in range(d):
        band = c // 2
        freq = np.pi * 2.0 ** (band // 2)
        phase = 0.0 if band % 2 == 0 else np.pi / 2
        pe[:, c] = np.sin(freq * coords[:, c % 2] + phase)
    pe *= _POS_SCALE
    pe.setflags(write=False)
    return pe


class Predictor:
    """Frozen seeded-random pre-norm transformer stack.

    Each block: layer norm, full softmax self-attention over all tokens,
    residual add, then a 2-layer tanh MLP (4x expansion) with residual add.
    The condition embedding and a sinusoidal position code are added to
    every token before block 1.  The head emits the accumulated block
    increments (stack output minus prepared input) scaled by a
    caller-supplied level gain (1/sqrt(tokens at the nominal grid)), so
    successive scales contribute decaying refinements instead of re-emitting
    the running feature.
    """

    def __init__(self, config: PredictorConfig):
        self.config = config
        d = config.d
        rng = np.random.default_rng(child_seed(config.seed, 0x5EED))
        self.start_token = rng.standard_normal(d)
        self._blocks = []
        for _ in range(config.num_blocks):
            self._blocks.append(
                {
                    "wq": rng.standard_normal((d, d)) / np.sqrt(d),
                    "wk": rng.standard_normal((d, d)) / np.sqrt(d),
                    "wv": rng.standard_normal((d, d)) / np.sqrt(d),
                    "wo": rng.standard_normal((d, d)) / np.sqrt(d),
                    "w1": rng.standard_normal((d, 4 * d)) / np.sqrt(d),
                    "w2": rng.standard_normal((4 * d, d)) / np.sqrt(4 * d),
                }
            )

    @staticmethod
    def level_gain(grid: tuple[int, int]) -> float:
        """Output gain for a nominal grid; tapers as scales grow."""
        return 1.0 / np.sqrt(float(grid[0] * grid[1]))

    def embed_condition(self, x: np.ndarray, cond: Condition, grid: tuple[int, int] | None = None) -> np.ndarray:
        if x.shape[1] != self.config.d:
            raise ValueError(f"input width {x.shape[1]} != predictor d {self.config.d}")
        if cond.embedding.shape[0] != self.config.d:
            raise ValueError("condition width does not match predictor d")
        if grid is None:
            grid = (x.shape[0], 1)
        return x + cond.embedding[None, :] + _positional_field(grid, self.config.d)

    def run_block(
        self,
        index: int,
        h: np.ndarray,
        counter: FlopCounter | None = None,
        collect: list[np.ndarray] | None = None,
    ) -> np.ndarray:
        if collect is not None:
            collect.append(h)
        weights = self._blocks[index]
        m, d = h.shape
        heads = self.config.heads
        dh = d // heads

        a = _layer_norm(h)
        q = a @ weights["wq"]
        k = a @ weights["wk"]
        v = a @ weights["wv"]
        out = np.empty_like(h)
        for hd in range(heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
            scores -= scores.max(axis=1, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=1, keepdims=True)
            out[:, sl] = scores @ v[:, sl]
        h = h + out @ weights["wo"]

        a = _layer_norm(h)
        h = h + np.tanh(a @ weights["w1"]) @ weights["w2"]

        if counter is not None:
            counter.add_block(m, d)
        return h

    def finalize(self, h: np.ndarray, prepared: np.ndarray, level_gain: float) -> np.ndarray:
        out = level_gain * (h - prepared)
        if not np.isfinite(out).all():
            raise NumericFailureError("predictor produced non-finite values")
        return out

    def forward(
        self,
        f_in: FeatureMap,
        cond: Condition,
        level_gain: float = 1.0,
        counter: FlopCounter | None = None,
        collect: list[np.ndarray] | None = None,
    ) -> FeatureMap:
        prepared = self.embed_condition(f_in.data, cond, f_in.grid)
        h = prepared
        for b in range(self.config.num_blocks):
            h = self.run_block(b, h, counter=counter, collect=collect)
        return FeatureMap(self.finalize(h, prepared, level_gain), f_in.grid)


@functools.lru_cache(maxsize=8)
def _predictor_for(config: PredictorConfig) -> Predictor:
    return Predictor(config)


def predictor_forward(f_in: FeatureMap, cond: Condition, cfg: PredictorConfig) -> FeatureMap:
    """Convenience single-call forward; predictors are cached per config."""
    return _predictor_for(cfg).forward(f_in, cond)


def quantize(f: FeatureMap, cb: Codebook) -> tuple[np.ndarray, FeatureMap]:
    """Nearest codebook row per token (squared Euclidean, ties to lower index)."""
    if f.d != cb.d:
        raise ValueError(f"feature width {f.d} != codebook width {cb.d}")
    x = f.data
    sq = (x * x).sum(axis=1, keepdims=True) - 2.0 * (x @ cb.vectors.T)
    sq += (cb.vectors * cb.vectors).sum(axis=1)[None, :]
    tokens = np.argmin(sq, axis=1)
    embedded = FeatureMap(cb.vectors[tokens], f.grid)
    return tokens, embedded


def cfg_combine(cond_out: FeatureMap, uncond_out: FeatureMap, g: float) -> FeatureMap:
    """Classifier-free guidance blend: uncond + g * (cond - uncond)."""
    if cond_out.grid != uncond_out.grid or cond_out.d != uncond_out.d:
        raise ValueError("guidance operands must share grid and width")
    if g == 0.0:
        return uncond_out
    if g == 1.0:
        return cond_out
    return FeatureMap(uncond_out.data + g * (cond_out.data - uncond_out.data), cond_out.grid)


def _timed_forward(
    predictor: Predictor,
    f_in: FeatureMap,
    cond: Condition,
    level_gain: float,
    counter: FlopCounter | None,
    stats: StepStats | None,
    collect: list[np.ndarray] | None = None,
) -> FeatureMap:
    t0 = time.perf_counter()
    out = predictor.forward(f_in, cond, level_gain=level_gain, counter=counter, collect=collect)
    if stats is not None:
        stats.forward_seconds += time.perf_counter() - t0
    return out


def guided_forward(
    predictor: Predictor,
    f_in: FeatureMap,
    cond: Condition,
    guidance: float,
    level_gain: float,
    counter: FlopCounter | None = None,
    stats: StepStats | None = None,
    collect_hook=None,
    k: int | None = None,
) -> FeatureMap:
    """One or two predictor forwards depending on the guidance scale.

    g == 0 runs the null-prompt forward alone and returns it untouched; any
    other g runs both branches and blends them.
    """
    null = null_condition(predictor.config.d)
    collect: list[np.ndarray] | None = [] if collect_hook is not None else None
    uncond_out = _timed_forward(predictor, f_in, null, level_gain, counter, stats, collect)
    if collect_hook is not None and k is not None:
        collect_hook(k, collect)
    if guidance == 0.0:
        return uncond_out
    cond_out = _timed_forward(predictor, f_in, cond, level_gain, counter, stats)
    return cfg_combine(cond_out, uncond_out, guidance)


def advance_feature(
    feat_full: FeatureMap,
    out_map: FeatureMap,
    codebook: Codebook,
    schedule: ScaleSchedule,
    k: int,
) -> tuple[FeatureMap, np.ndarray, FeatureMap | None]:
    """Quantize a step output and fold it into the running feature.

    Returns the updated full-grid feature, the tokens, and the next step's
    input (downsampled running feature), or None after the last scale.
    """
    tokens, embedded = quantize(out_map, codebook)
    residual = upsample(embedded, schedule.final_grid)
    feat_full = FeatureMap(feat_full.data + residual.data, schedule.final_grid)
    feat_in_next = None
    if k < schedule.num_scales:
        feat_in_next = downsample(feat_full, schedule.grid(k + 1))
    return feat_full, tokens, feat_in_next


def vanilla_step(
    k: int,
    feat_full: FeatureMap,
    feat_in: FeatureMap,
    *,
    schedule: ScaleSchedule,
    codebook: Codebook,
    predictor: Predictor,
    cond: Condition,
    guidance: float,
    counter: FlopCounter | None = None,
    stats: StepStats | None = None,
    collect_hook=None,
) -> tuple[FeatureMap, FeatureMap, np.ndarray, FeatureMap | None]:
    """One un-accelerated scale step; returns (F_k, step output, tokens, next input)."""
    if feat_in.grid != schedule.grid(k):
        raise ValueError(f"input grid {feat_in.grid} does not match scale {k} grid {schedule.grid(k)}")
    out_map = guided_forward(
        predictor,
        feat_in,
        cond,
        guidance,
        Predictor.level_gain(schedule.grid(k)),
        counter=counter,
        stats=stats,
        collect_hook=collect_hook,
        k=k,
    )
    feat_full, tokens, feat_in_next = advance_feature(feat_full, out_map, codebook, schedule, k)
    return feat_full, out_map, tokens, feat_in_next


@dataclass
class ScaleRecord:
    """Everything retained about one executed scale step."""

    k: int
    grid: tuple[int, int]
    variant: str
    alpha: float | None
    rank: int | None
    tokens: np.ndarray
    out_map: FeatureMap
    full_map: FeatureMap
    flops_attention: int
    flops_total: int
    mod_seconds: float
    add_seconds: float
    refinement: bool = False


@dataclass
class GenerationTrace:
    prompt_seed: int
    guidance: float
    records: list[ScaleRecord] = field(default_factory=list)
    skipped_scales: list[int] = field(default_factory=list)

    @property
    def final_map(self) -> FeatureMap:
        return self.records[-1].full_map

    @property
    def attention_flops(self) -> int:
        return sum(r.flops_attention for r in self.records)

    @property
    def total_flops(self) -> int:
        return sum(r.flops_total for r in self.records)

    @property
    def mod_seconds(self) -> float:
        return sum(r.mod_seconds for r in self.records)

    @property
    def add_seconds(self) -> float:
        return sum(r.add_seconds for r in self.records)


def start_state(schedule: ScaleSchedule, predictor: Predictor) -> tuple[FeatureMap, FeatureMap]:
    """Zero running feature plus the 1x1 start-token input."""
    fh, fw = schedule.final_grid
    feat_full = FeatureMap(np.zeros((fh * fw, predictor.config.d)), schedule.final_grid)
    feat_in = FeatureMap(predictor.start_token[None, :], (1, 1))
    return feat_full, feat_in


def record_step(
    trace: GenerationTrace,
    *,
    k: int,
    grid: tuple[int, int],
    variant: str,
    tokens: np.ndarray,
    out_map: FeatureMap,
    full_map: FeatureMap,
    counter_before: tuple[int, int],
    counter: FlopCounter | None,
    step_seconds: float,
    forward_seconds: float,
    alpha: float | None = None,
    rank: int | None = None,
    refinement: bool = False,
) -> None:
    attn = total = 0
    if counter is not None:
        attn = counter.attention - counter_before[0]
        total = counter.total - counter_before[1]
    trace.records.append(
        ScaleRecord(
            k=k,
            grid=grid,
            variant=variant,
            alpha=alpha,
            rank=rank,
            tokens=tokens,
            out_map=out_map,
            full_map=full_map,
            flops_attention=attn,
            flops_total=total,
            mod_seconds=forward_seconds,
            add_seconds=step_seconds - forward_seconds,
            refinement=refinement,
        )
    )


def generate_vanilla(
    prompt_seed: int,
    schedule: ScaleSchedule,
    codebook: Codebook,
    predictor: Predictor,
    guidance: float = 2.0,
    collect_hook=None,
) -> tuple[FeatureMap, GenerationTrace]:
    """Full coarse-to-fine generation without any acceleration."""
    cond = prompt_condition(prompt_seed, predictor.config.d)
    counter = FlopCounter() if predictor.config.flop_counter_enabled else None
    trace = GenerationTrace(prompt_seed=int(prompt_seed), guidance=float(guidance))
    feat_full, feat_in = start_state(schedule, predictor)

    for k in range(1, schedule.num_scales + 1):
        before = counter.snapshot() if counter is not None else (0, 0)
        stats = StepStats()
        t0 = time.perf_counter()
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
            collect_hook=collect_hook,
        )
        record_step(
            trace,
            k=k,
            grid=schedule.grid(k),
            variant="vanilla",
            tokens=tokens,
            out_map=out_map,
            full_map=feat_full,
            counter_before=before,
            counter=counter,
            step_seconds=time.perf_counter() - t0,
            forward_seconds=stats.forward_seconds,
            refinement=schedule.is_refinement(k),
        )
    return feat_full, trace


def encode_multiscale(
    target: FeatureMap, schedule: ScaleSchedule, codebook: Codebook
) -> tuple[list[np.ndarray], FeatureMap]:
    """Multi-scale residual quantization of a given target feature map.

    The counterpart of generation: at each scale the remaining residual is
    downsampled, quantized, and the embedded rows are upsampled and added
    to the running approximation.
    """
    if target.grid != schedule.final_grid:
        raise ValueError("target grid must match the schedule's final grid")
    approx = FeatureMap(np.zeros_like(target.data), target.grid)
    token_maps: list[np.ndarray] = []
    for k in range(1, schedule.num_scales + 1):
        residual = FeatureMap(target.data - approx.data, target.grid)
        coarse = downsample(residual, schedule.grid(k))
        tokens, embedded = quantize(coarse, codebook)
        approx = FeatureMap(approx.data + upsample(embedded, target.grid).data, target.grid)
        token_maps.append(tokens)
    return token_maps, approx


def decode_to_image(f: FeatureMap, seed: int = 0) -> np.ndarray:
    """Map channels to RGB through a seeded linear mix and rescale to 0..255.

    Each output channel is affinely rescaled to the full 8-bit range; a
    constant channel (zero spread) maps to mid-gray 128.
    """
    if f.d < 3:
        raise ValueError(f"decoding needs at least 3 channels, got {f.d}")
    rng = np.random.default_rng(child_seed(seed, 0xDEC0))
    mix = rng.standard_normal((f.d, 3)) / np.sqrt(f.d)
    rgb = f.data @ mix
    lo = rgb.min(axis=0, keepdims=True)
    hi = rgb.max(axis=0, keepdims=True)
    spread = hi - lo
    scaled = np.where(spread > 0, (rgb - lo) / np.where(spread > 0, spread, 1.0) * 255.0, 128.0)
    return np.rint(scaled).astype(np.uint8).reshape(f.h, f.w, 3)
