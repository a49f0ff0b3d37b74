"""stepflow: step-wise regional generation in a miniature diffusion transformer.

One denoising trajectory produces every step image of a procedure at once:
each step's text is bound to its own image region by a block-pairing
attention mask, positions restart per region (so every region sees the same
coordinate frame), and per-step conditioning is stabilized with slices of
the whole-recipe encoding. Everything runs on a small float64 tensor core
with reverse-mode autodiff — slow, transparent, and testable to the bit.
"""

__version__ = "0.1.0"

from .tensor import (  # noqa: F401
    DegenerateRowError,
    GradTape,
    ParameterError,
    ShapeError,
    TapeError,
    Tensor,
    gradient,
)
from .layout import LatentSequence, RegionLayout  # noqa: F401
from .rope import RotationTable, apply_flexible_rope, apply_original_rope  # noqa: F401
from .attention import (  # noqa: F401
    JointSequence,
    StepMask,
    base_pass,
    build_full_mask,
    build_step_mask,
    fuse_latents,
    joint_attention,
    mask_to_pbm,
    regional_pass,
)
from .text import (  # noqa: F401
    RecipeSpec,
    TextEncoder,
    TokenBlock,
    recipe_from_json,
    recipe_to_json,
    refine_recipe,
)
from .consistency import (  # noqa: F401
    AlignmentError,
    FusedConditioning,
    extract_contextual_tokens,
    fuse_conditioning,
    fuse_step_tokens,
)
from .engine import (  # noqa: F401
    CheckpointError,
    ModelConfig,
    TrainingError,
    denoise_step,
    init_params,
    load_checkpoint,
    predict_velocity,
    sample,
    save_checkpoint,
    train,
)
from .synthetic import SyntheticRecipe, make_synthetic_dataset  # noqa: F401
from .metrics import (  # noqa: F401
    Embedder,
    MetricReport,
    cross_step_consistency,
    evaluate_sequences,
    goal_faithfulness,
    llm_score,
    step_faithfulness_clip,
)
