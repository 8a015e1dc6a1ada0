"""Multi-agent spatial-temporal attention for multimodal time-series windows.

Cooperating agents repeatedly pick (time, channel) glimpses from a sensor
window, fuse their observations through a recurrent core, and classify the
activity; the selection policies are trained by a score-function policy
gradient on a terminal correctness reward, jointly with cross-entropy.
"""

from .config import RunConfig, load_config, parse_config_text
from .data import Dataset, Recording, SynthSpec, load_csv, loso_split, standardize, synth_generate, windows_of
from .glimpse import Glimpse, NormalizedLocation, Window, base_patch_shape, denormalize, extract_patch, foveate
from .metrics import MetricsReport, compute_metrics, evaluate
from .network import (
    Model,
    Trajectory,
    load_checkpoint,
    monte_carlo_predict,
    rollout_episode,
    save_checkpoint,
    train_model,
    train_step,
)
from .numerics import ParamGroup, grad_check
from .policy import GaussianPolicyHead, SampledAction, gaussian_log_pdf, sample_action, terminal_reward

__version__ = "0.1.0"
