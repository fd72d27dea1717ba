"""Progressive graph convolutional networks for traffic forecasting, in numpy."""
from ._accel import BACKEND
from .autodiff import Parameter, Tensor, backward, grad_check, no_grad
from .data import (SignalTable, SyntheticSpec, WindowedDataset, chronological_split, fit_scaler,
                   generate_synthetic, load_signal_csv, make_windows, prepare_dataset)
from .graph import (RoadGraph, TransitionPair, load_edge_list, normalize_window,
                    progressive_adjacency, self_adaptive_adjacency, transition_matrix)
from .model import PGCNConfig, PGCNModel, load_checkpoint, parameter_count, receptive_field, save_checkpoint
from .training import (evaluate, historical_average_baseline, masked_mae, masked_mape, masked_rmse,
                       train)

__version__ = "0.1.0"
