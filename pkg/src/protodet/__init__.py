"""Desk-scale few-shot detector with text and visual prototypes."""

from .config import RunConfig, load_config
from .episodes import Episode, generate_episode, load_episode, save_episode
from .evaluation import Detection, ensemble_detections, evaluate_map
from .geometry import Box, giou, iou
from .matching import hungarian_match
from .model import Detector, evaluate_episode
from .training import load_checkpoint, run_training, save_checkpoint

__version__ = "0.1.0"
