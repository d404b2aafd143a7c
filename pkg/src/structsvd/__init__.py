from .kernels import CoordinateSet, KernelSpec
from .model import SvdModelConfig, SvdModelState
from .sampler import PosteriorChain, run_mcmc

__version__ = "0.1.0"
