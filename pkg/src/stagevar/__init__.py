"""Desk-scale next-scale-prediction generation with stage-aware acceleration.

The package splits into grid/matrix primitives (``matgrid``), the numerical
core (``numcore``), the generation engine (``varengine``), the refinement
accelerator (``stageaccel``), trace instruments (``analysis``), and the
batch CLI (``cli``).
"""

from .errors import ConfigError, DegenerateInputError, NumericFailureError, StageVarError
from .matgrid import FeatureMap, SpectrumSplit, downsample, spectrum_split, upsample
from .numcore import (
    ProjectionMatrix,
    SampledIndices,
    SvdFactors,
    energy_ratio,
    random_project,
    sample_rows,
    select_rank,
    solve_lls,
    svd,
    truncate,
)
from .stageaccel import (
    OutputCache,
    RankEntry,
    RankTable,
    StageConfig,
    StrategyVariant,
    build_rank_table,
    generate_stagevar,
    load_rank_table,
    refinement_forward,
    restore_tokens,
    save_rank_table,
)
from .varengine import (
    Codebook,
    Condition,
    FlopCounter,
    GenerationTrace,
    Predictor,
    PredictorConfig,
    ScaleRecord,
    ScaleSchedule,
    cfg_combine,
    decode_to_image,
    default_desk_schedule,
    encode_multiscale,
    generate_vanilla,
    make_codebook,
    null_condition,
    predictor_forward,
    prompt_condition,
    quantize,
    vanilla_step,
)

__version__ = "0.1.0"
