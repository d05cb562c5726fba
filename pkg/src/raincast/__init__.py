"""raincast: satellite-IR precipitation nowcasting.

Extrapolates infrared radiance frames with sparse-feature optical flow,
translates each forecast frame to a rain-rate map with a compact
conditional GAN, and scores cumulative rainfall with CRPS.
"""

from .grids import (
    Grid2D,
    GridStack,
    Kind,
    PipelineConfig,
    crop_center,
    read_grid_stack,
    reflect_pad,
    replace_nonfinite,
    write_grid_stack,
    write_pgm,
)
from .preprocess import (
    ChannelSelection,
    CorrelationMatrix,
    SequenceSample,
    channel_mean,
    denormalize,
    make_sequences,
    mask_background,
    normalize,
    otsu_threshold,
    pearson_correlation_matrix,
    prepare_radiance,
    prepare_rain,
)
from .optflow import (
    Feature,
    FlowField,
    FlowParams,
    SparseFlow,
    advect,
    detect_blobs,
    extrapolate,
    lk_flow_at,
    mean_sparse_flow,
    rbf_interpolate,
)
from .evaluate import (
    EvalReport,
    accumulate_rain,
    bilinear_resample,
    block_average,
    crps_empirical,
    evaluate_run,
)

__version__ = "0.1.0"
