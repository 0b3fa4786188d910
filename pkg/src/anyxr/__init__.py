"""Any-to-any chest X-ray generation at desk scale.

Frontal view (F), lateral view (L) and report text (T) are each given a
prompt encoder, an autoencoder and a latent diffusion denoiser; stage-wise
training aligns the prompts, fits the per-modality generators and finally
couples parallel sampling chains through cross-modal attention.
"""
from .errors import (AnyXRError, CheckpointError, CheckpointVersionError, ConfigError, ContractError,
                     DataError, NumericError, PreconditionError, ShapeError, UndefinedMetricError)
from .settings import GenerationSetting

__version__ = "0.1.0"

__all__ = [
    "AnyXRError", "CheckpointError", "CheckpointVersionError", "ConfigError", "ContractError",
    "DataError", "NumericError", "PreconditionError", "ShapeError", "UndefinedMetricError",
    "GenerationSetting", "__version__",
]
