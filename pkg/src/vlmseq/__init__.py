"""Multimodal training-sequence machinery.

Sequence packing, hybrid bidirectional/causal attention-mask compilation,
convolution-safe padding, grounding coordinate formats, and a desk-scale MoE
transformer that serves as an executable verifier for all of it.
"""

from .convpad import (
    IsolationReport,
    PaddedKind,
    PaddedLayout,
    PaddedToken,
    plan_conv_padding,
    verify_isolation,
)
from .datamodel import (
    ImageSpec,
    MultimodalExample,
    SequenceLayout,
    SpecialToken,
    TokenInfo,
    TokenRole,
    Turn,
    concatenate_layouts,
    dump_manifest,
    load_manifest,
    render_chat_template,
)
from .geometry import (
    PatchGrid,
    ResolutionCap,
    resize_to_patch_grid,
    resolution_cap_at,
    vision_token_count,
)
from .grounding import (
    BoundingBox,
    CoordScale,
    FormatError,
    PointSet,
    box_to_pixels,
    convert_scale,
    parse_box,
    parse_point_tokens,
    parse_xml_points,
    point_set_to_pixels,
    render_box,
    render_point_tokens,
    render_xml_points,
)
from .masking import (
    BlockKind,
    MaskBlock,
    MaskDecisions,
    MaskSpec,
    allowed,
    compile_block_mask,
    decode_mask_row,
    dense_allowed_oracle,
    extend_mask_for_decode,
    sample_masking_decisions,
)
from .packing import (
    ExampleTooLongError,
    ExpertBudget,
    LossTokenStats,
    PackedSequence,
    loss_token_stats,
    pack,
    required_examples_per_update,
)
from .toymodel import (
    ModelInputs,
    RouterTieError,
    RouterTrace,
    ToyConfig,
    ToyModelParams,
    accumulate_normalized_loss,
    answer_loss,
    decode_incremental,
    extend_inputs_for_decode,
    forward,
    forward_full,
    grad_check,
    init_params,
    lora_weight_decay_step,
    loss_and_grads,
    moe_dispatch,
    prepare_inputs,
)

__version__ = "0.1.0"
