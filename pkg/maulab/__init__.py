__version__ = "v0.1.0"
__description__ = "Masked acoustic unit mispronunciation detection and correction."


from maulab.config import resolve_run_config
from maulab.corpus import generate_corpus
from maulab.inference import correct, detect, phoneme_error_scores
from maulab.metrics import mask_auc, prf1, recovery_rate
from maulab.models import RunConfig
from maulab.pipeline import Workspace


__all__ = [
    "__version__",
    "__description__",
    "RunConfig",
    "Workspace",
    "resolve_run_config",
    "generate_corpus",
    "detect",
    "correct",
    "phoneme_error_scores",
    "prf1",
    "mask_auc",
    "recovery_rate",
]
