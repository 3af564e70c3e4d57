"""Adapter with local attributes for speech emotion recognition.

A weighted-average-pooling transformer adapter sits on top of frozen
frame-level embeddings. It is pretrained with a teacher-student
masked-prediction objective and a prototype codebook, then fine-tuned with an
attentive statistics pooling head and evaluated by cross-session k-fold CV.
Everything is plain numpy with hand-written backward passes.
"""

from .features import FrameSequence, Manifest, SynthSpec, gen_synthetic, read_manifest
from .sap import FinetuneConfig, SerModel, finetune
from .ssl import SslConfig, pretrain
from .wap import WapConfig, init_wap

__all__ = [
    "FinetuneConfig",
    "FrameSequence",
    "Manifest",
    "SerModel",
    "SslConfig",
    "SynthSpec",
    "WapConfig",
    "finetune",
    "gen_synthetic",
    "init_wap",
    "pretrain",
    "read_manifest",
]

__version__ = "0.1.0"
