"""Noise-level guidance for diffusion and rectified-flow samplers, at toy scale."""
from .guidance import GuidanceSpec, guided_output
from .models import (AnalyticMixtureModel, ConditionToken, DenoiserEstimator, ModelPair, ScoreNet, TrainConfig,
                     analytic_posterior, make_quality_pair, predict, train_diffusion, train_flow)
from .nlg import (AlignmentTrace, NLGConfig, NoiseAligner, align_noise, align_noise_batch, edit_direction,
                  norm_clip, renormalize, steps_for_guidance_scale)
from .numerics import RngStream, l2_norm, linear_combine, sample_gaussian
from .sampling import Aligner, SamplerConfig, generate_batch, sample
from .schedules import NoiseSchedule, initial_noise_std, perturb, rectified_flow, ve_geometric, vp_cosine

__version__ = "0.1.0"
