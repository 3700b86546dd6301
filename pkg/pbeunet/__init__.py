"""PBE-UNet package initialization."""
__version__ = "1.0.0"

from pbeunet.models import (  # noqa: E402
    AggregateReport,
    LossWeights,
    MetricReport,
    PbeConfig,
    PbeOutput,
    RunConfig,
    Sample,
    SynthConfig,
    TrainConfig,
)
from pbeunet.data_io import DatasetAgent  # noqa: E402
from pbeunet.trainer import TrainerAgent  # noqa: E402
from pbeunet.evaluator import EvaluatorAgent  # noqa: E402
from pbeunet.gradcheck import GradcheckAgent  # noqa: E402
from pbeunet.ablation import AblationAgent  # noqa: E402
from pbeunet.presenter import PresenterAgent  # noqa: E402
from pbeunet.main import PbeRunner  # noqa: E402

__all__ = [
    "AggregateReport",
    "LossWeights",
    "MetricReport",
    "PbeConfig",
    "PbeOutput",
    "RunConfig",
    "Sample",
    "SynthConfig",
    "TrainConfig",
    "DatasetAgent",
    "TrainerAgent",
    "EvaluatorAgent",
    "GradcheckAgent",
    "AblationAgent",
    "PresenterAgent",
    "PbeRunner",
]
