"""fixelfit: multi-compartment diffusion MRI fitting by analysis-by-synthesis."""

from .acquisition import (
    AcquisitionScheme,
    load_scheme,
    make_scheme,
    shell_partition,
    synthetic_scheme,
    write_scheme,
)
from .errors import ConfigError, DataError, FixelfitError, NumericalError
from .forward_model import (
    CalibrationParams,
    ConstrainedTissue,
    ModelConstants,
    TissueParams,
    constrain,
    predict_volume,
)
from .objective import LossMode, RegWeights, log_i0, mse_loss, rician_nll, total_objective
from .optimizer import FitConfig, RpropOptions, fit_patch, fit_volume, init_params
from .phantom import GroundTruth, PhantomSpec, build_benchmark
from .volume_io import Volume, read_nifti, write_nifti

__version__ = "0.1.0"

__all__ = [
    "AcquisitionScheme", "CalibrationParams", "ConfigError", "ConstrainedTissue",
    "DataError", "FitConfig", "FixelfitError", "GroundTruth", "LossMode",
    "ModelConstants", "NumericalError", "PhantomSpec", "RegWeights", "RpropOptions",
    "TissueParams", "Volume", "build_benchmark", "constrain", "fit_patch",
    "fit_volume", "init_params", "load_scheme", "log_i0", "make_scheme", "mse_loss",
    "predict_volume", "read_nifti", "rician_nll", "shell_partition",
    "synthetic_scheme", "total_objective", "write_nifti", "write_scheme",
]
