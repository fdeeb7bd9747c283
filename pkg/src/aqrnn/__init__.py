"""Any-quantile probabilistic PV forecasting with a dual-track dilated RNN."""

from .config import NetworkConfig, RunConfig, TrainConfig, desk_config
from .dataset import Panel, load_panel, synth_panel, write_panel
from .network import QuantileModel, ensemble_predict, load_model, predict, save_model
from .training import fit

__all__ = [
    "NetworkConfig", "RunConfig", "TrainConfig", "desk_config",
    "Panel", "load_panel", "synth_panel", "write_panel",
    "QuantileModel", "ensemble_predict", "load_model", "predict", "save_model",
    "fit",
]
__version__ = "0.1.0"
