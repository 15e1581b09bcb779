from .inputs import (
    N_INPUT,
    DetectionFeature,
    FilterInput,
    MotionState,
    build_filter_array,
    build_filter_input,
    extrapolate_inputs,
    motion_extrapolate,
)
from .metrics import (
    IDEAL_ONE_SIGMA,
    bench_runtime,
    disk_probability,
    evaluate_filter,
    metric_ade,
    metric_ctp,
    metric_desv,
    metric_ll,
    motion_ade,
)
from .models import (
    FCFilter,
    FilterConfig,
    MixtureFilter,
    MixturePrediction,
    NumericFault,
    PMCFilter,
    filter_checksum,
    load_filter,
    make_filter,
    nll_loss,
    nll_tensor,
)
from .training import FilterHyper, TrainResult, train_filter

__all__ = [name for name in dir() if not name.startswith("_")]
