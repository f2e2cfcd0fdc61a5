"""Differentiable geometric-acoustics engine for room impulse responses.

Beam tracing against room geometry enumerates specular reflection paths;
learnable source, surface-reflection, and residual parameters are fitted to
sparse measured RIRs by gradient descent through a custom reverse-mode tape,
optionally conditioned on precomputed multi-view visual features.
"""

from .autodiff import Tape, Var, adjoint_probe, grad_check
from .beams import BeamConfig, SpecularPath, beam_hit, hit_covariance, trace_paths
from .data import (DatasetManifest, ShoeboxSpec, gen_synthetic,
                   image_source_paths, load_manifest, load_wav,
                   manifest_records, oracle_rir, save_manifest, save_wav)
from .dsp import (FrequencyGrid, ImpulseResponse, convolve, default_grid,
                  min_phase, propagate, stft_mag)
from .geometry import (BasisPointSet, HitRecord, RoomGeometry, intersect,
                       is_visible, load_basis_points, load_geometry,
                       sample_basis_points, sample_fibonacci, save_basis_points,
                       save_geometry, shoebox_geometry)
from .metrics import MetricReport, c50, edt, evaluate, loudness_error, t60
from .params import ParameterStore, load_checkpoint, save_checkpoint
from .reflection import (IPEConfig, ReflectionModel, ViewFeatureBank,
                         ipe_encode, load_feature_bank, save_feature_bank)
from .source import (RenderConfig, ResidualModel, RirModel, SourceModel,
                     config_from_json, config_to_json, render_rir)
from .training import (Adam, MeasurementRecord, TrainConfig, fit, loss_decay,
                       loss_mag, loss_pink, total_loss)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
