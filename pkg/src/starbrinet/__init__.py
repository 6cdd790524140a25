"""Framework-free radar-echo nowcasting.

Differentiable tensor kernels with hand-written backward passes, bridged
convolutional-LSTM encoder/decoder stacks with multi-column routing, a
multi-sigmoid training objective, CSI/MSE verification, a synthetic
radar-echo generator, and Adam training with bit-exact checkpoints.
"""

from .data import (GaussianCell, GenConfig, RadarSequence, Route, RouteThresholds,
                   calibrate_thresholds, filter_rainless, rseq_read, rseq_write,
                   sliding_window, split_by_intensity, synth_generate)
from .losses import (ConfusionCounts, LossConfig, csi, denormalize, frame_mse,
                     multi_sigmoid_loss, normalize, single_sigmoid_loss)
from .network import (ModelParams, NetworkConfig, decode, encode, forward_batch,
                      init_model_params, paper_scale_config, persistence_baseline,
                      predict)
from .training import (OptimState, TrainConfig, adam_init, adam_step,
                       checkpoint_load, checkpoint_save, evaluate, scale_schedule,
                       train)

__version__ = "0.1.0"

__all__ = [
    "ConfusionCounts", "GaussianCell", "GenConfig", "LossConfig", "ModelParams",
    "NetworkConfig", "OptimState", "RadarSequence", "Route", "RouteThresholds",
    "TrainConfig", "adam_init", "adam_step", "calibrate_thresholds",
    "checkpoint_load", "checkpoint_save", "csi", "decode", "denormalize",
    "encode", "evaluate", "filter_rainless", "forward_batch", "frame_mse",
    "init_model_params", "multi_sigmoid_loss", "normalize", "paper_scale_config",
    "persistence_baseline", "predict", "rseq_read", "rseq_write",
    "scale_schedule", "single_sigmoid_loss", "sliding_window",
    "split_by_intensity", "synth_generate", "train",
]
