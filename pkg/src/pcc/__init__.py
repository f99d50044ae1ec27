"""Weakly supervised segmentation with LLM-derived category-cluster tokens."""

from pcc.clusters import (
    ClusterAssignment,
    PromptTemplates,
    StopCondition,
    assignments_equal,
    cluster_vector,
    generate_clusters,
    parse_assignment,
)
from pcc.config import RunConfig
from pcc.fusion import ClusterFusion, FusionMode, HVBiLSTM, embed_clusters, fuse
from pcc.head import PCCModel, classify_patches, forward_loss, mce_loss, topk_pool
from pcc.llm import LLMBackend, LLMClient, MockScript, ResponseCache
from pcc.pseudo import CRFConfig, IoUReport, argmax_labels, compute_miou, crf_refine, upsample_predictions
from pcc.vit import EncoderConfig, ViTEncoder, encode

__version__ = "0.1.0"
