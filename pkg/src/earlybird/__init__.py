"""Early structured lottery tickets for small transformer encoders, in numpy."""

__version__ = "0.1.0"

from .config import PipelineConfig, load_config  # noqa: E402
from .masks import TicketMask  # noqa: E402
from .model import ModelConfig, SlimCoefficients, forward, init_model  # noqa: E402
from .search import SearchConfig, draw_ticket, run_search  # noqa: E402
from .surgery import PrunedArchitecture, apply_ticket  # noqa: E402
from .train import run_earlybert, train  # noqa: E402

__all__ = [
    "ModelConfig",
    "PipelineConfig",
    "PrunedArchitecture",
    "SearchConfig",
    "SlimCoefficients",
    "TicketMask",
    "apply_ticket",
    "draw_ticket",
    "forward",
    "init_model",
    "load_config",
    "run_earlybert",
    "run_search",
    "train",
]
