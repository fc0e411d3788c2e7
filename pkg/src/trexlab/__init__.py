"""Supervised representation learning that transfers: multi-crop, expendable
projectors, cosine softmax and online class means, at desk scale."""

from .config import RunConfig, load_config, load_recipe
from .data import Dataset, SyntheticSpec, generate_synthetic, load_trxd, save_trxd
from .estimator import SupervisedEncoder
from .evalsuite import extract_features, transfer_report
from .probe import LogisticProbe, linear_probe, log_odds, mean_log_odds
from .training import Trainer, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "LogisticProbe", "RunConfig", "SupervisedEncoder", "SyntheticSpec", "Trainer",
    "extract_features", "generate_synthetic", "linear_probe", "load_config", "load_recipe", "load_trxd",
    "log_odds", "mean_log_odds", "save_trxd", "train", "transfer_report",
]
