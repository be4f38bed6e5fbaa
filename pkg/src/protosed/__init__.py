"""Few-shot bioacoustic sound event detection with prototypical networks.

The public API follows scikit-learn conventions: ``FeatureExtractor``,
``PrototypicalEmbedder``, ``NegativeSampleSearcher``, ``FewShotDetector``
and ``EventPostProcessor`` are estimators with ``fit`` / ``transform`` /
``predict`` and ``get_params``.
"""
__version__ = "0.1.0"

from .config import RunConfig
from .dataio import AnnotationEvent, AudioClip, DetectionEvent, LabeledFile, load_audio, parse_annotations
from .detect import FewShotDetector, adaptive_window
from .exceptions import ProtoSEDError
from .features import FeatureExtractor
from .negmine import NegativeSampleSearcher, sisnr
from .postproc import EventPostProcessor, EventStats, PostConfig, postprocess
from .protolearn import PrototypicalEmbedder, TrainConfig
from .score import MatchReport, match_events, report
from .synth import make_synthetic_dataset

__all__ = [
    "AnnotationEvent", "AudioClip", "DetectionEvent", "EventPostProcessor", "EventStats", "FeatureExtractor",
    "FewShotDetector", "LabeledFile", "MatchReport", "NegativeSampleSearcher", "PostConfig", "ProtoSEDError",
    "PrototypicalEmbedder", "RunConfig", "TrainConfig", "__version__", "adaptive_window", "load_audio",
    "make_synthetic_dataset", "match_events", "parse_annotations", "postprocess", "report", "sisnr",
]
