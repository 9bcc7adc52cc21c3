"""Implant position prediction on CBCT slices with a small vision transformer."""

from .centerline import CenterlineFit, fit_centerline, project_crown_to_root, project_root_to_crown
from .errors import ImplantFormerError
from .evaluation import EvalReport, average_precision, evaluate, five_fold_split, iou, keypoint_box
from .heatmap import Detection, decode_topk, encode_target, focal_loss, offset_loss
from .network import ImplantFormer, NetConfig, load_checkpoint, save_checkpoint
from .pipeline import infer_volume, render_implant_cylinder
from .training import TrainConfig, train
from .volume import KeypointTrack, PhantomConfig, Volume, generate_phantom, load_volume, save_volume

__version__ = "0.1.0"
