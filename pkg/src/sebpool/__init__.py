from .linalg import SymEig, sym_eig, sym_eig_many, fro_inner, fro_norm
from .spectral import Sqrt, PRoot, Log, ExpInv, EigGrad, mat_fn, mat_fn_backward, eig_backward
from .gcp import GcpConfig, GcpState, SubsetMode, gcp_forward, gcp_backward, upper_tri_vec
from .model import ToyModel, model_forward, model_backward
from .data import Dataset, DatasetConfig, gen_dataset
from .training import TrainConfig, TrainReport, train, truncation_sweep

import logging
logging.getLogger(__name__).addHandler(logging.NullHandler())
