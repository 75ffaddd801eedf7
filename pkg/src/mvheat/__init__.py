"""Spectral heat-conduction backbones with routed transform experts, and a
small IoU-aware detector trained on synthetic event-camera scenes."""

from .backbone import Backbone, BackboneConfig, MHCOLayer, gumbel_softmax, parameter_summary
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .detect import detection_loss, hungarian_match, iou, iou_query_select
from .events import load_annotations, load_events, save_annotations, save_events, stack_events
from .gradcheck import grad_check
from .heat import HCOConfig, hco_apply, heat_multiplier, predict_diffusivity
from .metrics import evaluate_map
from .model import Detector, DetectorConfig
from .oracle import OracleGrid, pde_oracle_solve
from .synth import SyntheticSceneConfig, synth_generate
from .tensor import ConfigError, Parameter, ShapeError, Tensor, no_grad, precision, set_precision
from .transforms import dct2, dft2, haar2, idct2, idft2, ihaar2

__version__ = "0.1.0"
