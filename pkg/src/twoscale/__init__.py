"""Two-scaled post-training quantization toolkit.

Submodules:
    tensor      float32 tensor substrate, .npy subset io, bundles
    quant       uniform symmetric quantization, error metrics
    v2sf        value-aware two-region codec + fixed twin-region baseline
    o2sf        outlier-channel dual-scale quantization + channel-shift baseline
    intsoftmax  integer-only softmax on a fixed-point exponential
    search      candidate grids, distortion metric, alternating scale search
    block       deterministic toy transformer block (float reference)
    pipeline    quantized execution (fake-quant / integer path), scheme comparison
    calibrate   whole-model calibration orchestration
    cli         command-line entry points
"""

from .tensor import (TensorBundle, TensorFormatError, TensorValidationError,
                     elementwise_stats, ensure_tensor, load_tensor, save_tensor)
from .quant import (QuantParams, QuantizedTensor, calibrate_uniform, dequantize, mse,
                    quantize, quantize_dequantize, round_half_away, sqnr_db)
from .v2sf import (KIND_GELU, KIND_SOFTMAX, TwinRegionEncoded, V2sfEncoded, V2sfParams,
                   canonical_codes, distinct_levels, load_v2sf, save_v2sf,
                   twin_region_encode, v2sf_bits_per_element, v2sf_decode, v2sf_encode,
                   v2sf_qdq)
from .o2sf import (ChannelPartition, ChannelShiftSelection, O2sfParams, O2sfQuantized,
                   channelwise_shift_select, detect_outlier_channels, o2sf_dequantize,
                   o2sf_quantize, o2sf_qdq, pack_mask, shift_candidates, unpack_mask)
from .intsoftmax import (IntSoftmaxConfig, int_exp, int_softmax, int_softmax_row,
                         max_relative_exp_error)
from .search import (CalibrationResult, LayerCalibration, MetricInput, SearchConfig,
                     candidate_grid, hessian_metric, search_layer)
from .block import BlockSpec, BlockWeights, fp_forward, init_weights, sample_inputs
from .pipeline import (QuantPipelineSpec, SiteSpec, compare_schemes, default_pipeline,
                       quant_forward)
from .calibrate import calibrate_bundle_sites, calibrate_model

__version__ = "0.1.0"
