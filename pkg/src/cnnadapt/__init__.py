"""Adapt float CNNs for integer inference: fuse, prune, quantize, compare."""

from .errors import (
    CnnAdaptError,
    EvaluatorError,
    ModelFormatError,
    PipelineError,
    ShapeError,
)
from .tensor import (
    BatchNormParams,
    FeatureMap,
    FilterBank,
    IntFeatureMap,
    batchnorm_forward,
    concat,
    conv2d,
    leaky_relu,
    load_tensor,
    maxpool,
    save_tensor,
    upsample_nearest,
)
from .model import (
    ConvParams,
    LayerSpec,
    Model,
    float_infer,
    load_model,
    model_digest,
    randomize_weights,
    save_model,
    shape_infer,
)
from .fusion import fuse_layer, fuse_model
from .pruning import (
    PruneConfig,
    PruneReport,
    PruneStep,
    compute_metric_table,
    filter_sparsity,
    frobenius_norms,
    prune_below,
    prune_routine,
)
from .quantization import (
    OverflowStats,
    QuantConfig,
    QuantizedModel,
    dequantize,
    int_infer,
    load_quantized_model,
    quant_leaky_relu,
    quantize_input,
    quantize_model,
    quantize_tensor,
    rshift,
    save_quantized_model,
)
from .analysis import (
    FlopReport,
    MseReport,
    ParamReport,
    compare_traces,
    count_flops,
    count_params,
)
from .evaluation import (
    Detection,
    GroundTruthBox,
    accuracy_evaluator,
    evaluate_map,
    iou,
    load_dataset,
    map_evaluator,
    ordered_map,
)
from .tinyyolo import build_tinyyolov3

__version__ = "0.1.0"

__all__ = [
    "BatchNormParams",
    "ConvParams",
    "CnnAdaptError",
    "Detection",
    "EvaluatorError",
    "FeatureMap",
    "FilterBank",
    "FlopReport",
    "GroundTruthBox",
    "IntFeatureMap",
    "LayerSpec",
    "Model",
    "ModelFormatError",
    "MseReport",
    "OverflowStats",
    "ParamReport",
    "PipelineError",
    "PruneConfig",
    "PruneReport",
    "PruneStep",
    "QuantConfig",
    "QuantizedModel",
    "ShapeError",
    "accuracy_evaluator",
    "batchnorm_forward",
    "build_tinyyolov3",
    "compare_traces",
    "compute_metric_table",
    "concat",
    "conv2d",
    "count_flops",
    "count_params",
    "dequantize",
    "evaluate_map",
    "filter_sparsity",
    "float_infer",
    "frobenius_norms",
    "fuse_layer",
    "fuse_model",
    "int_infer",
    "iou",
    "leaky_relu",
    "load_dataset",
    "load_model",
    "load_quantized_model",
    "load_tensor",
    "map_evaluator",
    "maxpool",
    "model_digest",
    "ordered_map",
    "prune_below",
    "prune_routine",
    "quant_leaky_relu",
    "quantize_input",
    "quantize_model",
    "quantize_tensor",
    "randomize_weights",
    "rshift",
    "save_model",
    "save_quantized_model",
    "save_tensor",
    "shape_infer",
    "upsample_nearest",
]
