"""Wiener chaos processes on grids: multiple integrals, controlled shifts,
skeletons, rate functions and importance-sampled rare-event estimates."""
from .grid import ConfigError, Grid, GridFn, GridMismatchError, SiteSet, build_grid, l2_inner, l2_norm
from .kernels import (DenseSym, KernelFamily, ModulusSpec, SeparableSum, check_exponential_type,
                      construct_kernel, kernel_norm, modulus_profile, series_bound, symmetrize)
from .noise import Control, NoisePath, sample_white_noise, shift_noise
from .chaos import (NOISE, NU, ThetaPattern, deterministic_integral, mixed_integral, multiple_integral,
                    shifted_multiple_integral, theta_patterns)
from .assembly import ChaosSpec, PathValue, assemble_controlled, assemble_Xeps, skeleton

__version__ = "0.1.0"
