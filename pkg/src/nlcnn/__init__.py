"""Non-local CNN speaker embeddings on a small numpy autodiff engine."""

from .evaluation import EvalReport, TrialList, compute_eer, evaluate, score_trial, ten_crops
from .frontend import AudioBuffer, LfbeFrames, crop_segment, extract_lfbe, load_wav
from .gradcheck import check_gradients
from .network import (ModelSpec, SpeakerEmbedder, build_model, count_parameters, embed, forward_features,
                      preset_spec, preset_specs, sap_pool)
from .nonlocal_block import NonLocalBlockParams, Variant, affinity, attention_matrix, nonlocal_forward, nonlocal_oracle
from .objectives import AmSoftmaxHead, AngularProtoHead, ams_loss, ap_loss, cosine_similarity
from .tensor import Tensor, backward, no_grad
from .training import DatasetManifest, TrainConfig, adam_step, sample_epoch, train

__all__ = [
    "AmSoftmaxHead", "AngularProtoHead", "AudioBuffer", "DatasetManifest", "EvalReport", "LfbeFrames",
    "ModelSpec", "NonLocalBlockParams", "SpeakerEmbedder", "Tensor", "TrainConfig", "TrialList", "Variant",
    "adam_step", "affinity", "ams_loss", "ap_loss", "attention_matrix", "backward", "build_model",
    "check_gradients", "compute_eer", "cosine_similarity", "count_parameters", "crop_segment", "embed",
    "evaluate", "extract_lfbe", "forward_features", "load_wav", "no_grad", "nonlocal_forward",
    "nonlocal_oracle", "preset_spec", "preset_specs", "sample_epoch", "sap_pool", "score_trial",
    "ten_crops", "train",
]
