"""Per-timestep detection flow: modality fusion, stage enhancement, temporal fusion, masked Top-k."""

from .fusion import FUSION_OPS, init_temporal, temporal_fuse
from .model import (GROUPS, Model, ModelConfig, ModelInputs, StageOutput, box_raw, encode, enhance,
                    enhance_stage, fuse, fuse_modalities, group_of, head_logits, heatmap, init_params)
from .selection import Query, SelectionError, StageConfig, StageMask, box_pool_mask, topk_select
from .timestep import (Detection, SampleInputs, collate, decode_batch, predict, prepare_sample,
                       read_detections, run_timestep, select_queries, warp_matrix, write_detections)

__all__ = [
    "FUSION_OPS", "init_temporal", "temporal_fuse", "GROUPS", "Model", "ModelConfig", "ModelInputs",
    "StageOutput", "box_raw", "encode", "enhance", "enhance_stage", "fuse", "fuse_modalities",
    "group_of", "head_logits", "heatmap", "init_params", "Query", "SelectionError", "StageConfig",
    "StageMask", "box_pool_mask", "topk_select", "Detection", "SampleInputs", "collate",
    "decode_batch", "predict", "prepare_sample", "read_detections", "run_timestep",
    "select_queries", "warp_matrix", "write_detections",
]
