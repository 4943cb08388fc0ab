from .config import RunConfig, load_config
from .pipeline import run
from .report import EvalReport, evaluate
