"""Training-free subject/style control of a toy latent-diffusion sampler.

The pieces, bottom up: a float64 reverse-mode autodiff tape with Adam
(:mod:`~latentctl.autodiff`, :mod:`~latentctl.optim`), a documented PRNG
(:mod:`~latentctl.rng`), noise schedules and DDIM stepping
(:mod:`~latentctl.schedule`), text/descriptor conditioning and projectors
(:mod:`~latentctl.conditioning`), a cross-attention denoiser with
orthogonal temporal aggregation (:mod:`~latentctl.denoiser`), the latent
controller (:mod:`~latentctl.controller`), training, metrics, the synthetic
benchmark and bit-exact persistence.
"""

from .autodiff import Tensor, backward, count_allocations, no_grad
from .conditioning import ReferencePair, embed_text, style_descriptor, subject_descriptor
from .controller import (CostBreakdown, GenerationResult, GenerationSetup, optimize_latent_fo, optimize_latent_zo,
                         run_generation, spsa_gradient, terminal_cost)
from .denoiser import AggregationState, Decoder, decode, denoise
from .errors import ConfigError, ContractError, IntegrityError, NonFiniteError, ShapeError
from .io import ControllerConfig, RunConfig, load_builtin, parse_config
from .metrics import MetricsReport, cosine_similarity, eval_run, leakage_score
from .schedule import add_noise, ddim_step, make_schedule, predict_x0

__version__ = "0.1.0"
