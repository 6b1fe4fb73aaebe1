"""Global-local saliency for weakly supervised segmentation of high-resolution images."""

from glam.config import GlamConfig, TrainConfig, desk_config, smoke_config
from glam.global_net import ConfigError, GlobalConfig, GlobalNet
from glam.local_net import LocalConfig, LocalNet
from glam.maps import CLASSES, SaliencyMap
from glam.model import GLAM
from glam.synthdata import SynthConfig, generate

__version__ = "0.1.0"
