"""ESTATICS multi-echo fitting: loglinear, Tikhonov-MAP and JTV-MAP, with a
leave-one-echo-out Rice-likelihood harness on synthetic phantoms."""

from .diffops import RegConfig
from .loglinear import fit_loglinear
from .mapfit import FitConfig, FitReport, fit_map
from .phantom import default_protocol, make_phantom_maps, simulate_dataset
from .projection import RigidTransform, pull, push
from .rice import fit_rice_mixture, rice_logpdf, rice_sample
from .signal import compute_quantitative_maps, ernst_signal, predict_echo
from .solver import SolverConfig
from .volume import (ContrastMeta, ContrastSeries, Dataset, EchoVolume, Grid3,
                     ParameterMaps, validate_dataset)

__version__ = "0.1.0"
